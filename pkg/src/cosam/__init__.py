"""Graph-walk negative sampling with matrix factorization for implicit-feedback recommendation."""

from .data import (DataError, ImplicitDataset, RawInteractions, SplitDataset,
                   binarize_and_filter, dataset_from_pairs, load_interactions,
                   load_vocab, save_vocab, split_holdout, split_kfold)
from .graph import InteractionGraph
from .recommender import RecommenderModel
from .sampler import (SampleBatch, SamplerConfig, SamplerModel, Terminal, WalkPath,
                      arw_sample, draw_candidate_set, exact_rho, uniform_component_p0)
from .trainer import TrainConfig, TrainedModel, train

__version__ = "0.1.0"
