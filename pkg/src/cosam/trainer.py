"""Alternating sampler/recommender training, baseline samplers and diagnostics."""

from __future__ import annotations

import dataclasses
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import SplitDataset
from .evaluation import evaluate
from .graph import InteractionGraph
from .recommender import (AdamState, RecommenderModel, adam_step, recommender_gradient,
                          recommender_objective, reward)
from .sampler import (SampleBatch, SamplerConfig, SamplerModel, apply_gradient,
                      WalkArrays, draw_candidates, exact_rho, policy_gradient,
                      sample_walks, truncated_rho)

log = logging.getLogger(__name__)

SAMPLER_KINDS = ("cosam", "uniform", "pop")
LOG_HEADER = "epoch,objective,seconds,pre5,rec5,ndcg"
# users per independent RNG stream inside a mini-batch; fixed so results do not
# depend on the number of worker threads
STREAM_CHUNK = 32


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    seed: int = 2021
    sampler: str = "cosam"
    c1: float = 0.6
    c2: float = 0.6
    l_max: int = 10
    multiplier: float = 5.0
    dim: int = 32
    lr: float = 0.01
    sampler_lr: float | None = None
    lam: float = 1e-5
    alpha: float = 1.0
    eval_every: int = 0
    update_sampler: bool = True
    threads: int = 1
    record_seconds: bool = True

    # config-file key -> attribute
    KEYS = {"lambda": "lam"}

    def __post_init__(self):
        if self.sampler == "popularity":
            self.sampler = "pop"
        if self.sampler not in SAMPLER_KINDS:
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.alpha < 0 or self.threads < 1:
            raise ValueError("need epochs >= 0, batch_size >= 1, alpha >= 0, threads >= 1")
        self.sampler_config  # validates c1, c2, l_max, multiplier

    @property
    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(self.c1, self.c2, self.l_max, self.multiplier)

    @property
    def theta_lr(self) -> float:
        return self.lr if self.sampler_lr is None else self.sampler_lr

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key = value")
            key, raw = (s.strip() for s in line.split("=", 1))
            name = cls.KEYS.get(key, key)
            if name not in types:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            values[name] = _coerce(types[name], raw)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), **overrides)

    def to_text(self) -> str:
        inverse = {v: k for k, v in self.KEYS.items()}
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{inverse.get(f.name, f.name)} = {value}")
        return "\n".join(lines) + "\n"


def _coerce(type_name, raw: str):
    t = str(type_name)
    if raw.lower() in ("none", "") and "None" in t:
        return None
    if t.startswith("bool"):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if t.startswith("int"):
        return int(raw)
    if t.startswith("float"):
        return float(raw)
    return raw


def positive_lists(graph: InteractionGraph, users) -> list[np.ndarray]:
    return [graph.user_items(u) for u in np.asarray(users).tolist()]


def _pathless_batch(graph, users, counts, items) -> SampleBatch:
    owner = np.repeat(np.arange(len(users)), counts)
    positive = graph.has_edge(users[owner], items) if len(items) else np.zeros(0, bool)
    return SampleBatch(users, counts, owner, items, np.asarray(positive))


def uniform_sample(graph: InteractionGraph, u: int, n_draws: int, rng) -> SampleBatch:
    """``n_draws`` i.i.d. items, uniform over all ``m`` items."""
    users = np.array([u], dtype=np.int64)
    return _pathless_batch(graph, users, np.array([n_draws]), rng.integers(0, graph.m, n_draws))


def popularity_table(graph: InteractionGraph, alpha: float) -> np.ndarray:
    """Cumulative table of ``p(i) ~ deg(i)**alpha``; uniform if every weight is zero."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    deg = graph.item_degree_array().astype(np.float64)
    weights = np.where(deg > 0, deg ** alpha, 0.0) if alpha > 0 else np.ones_like(deg)
    if weights.sum() <= 0:
        weights = np.ones_like(deg)
    cdf = np.cumsum(weights / weights.sum())
    cdf[-1] = 1.0
    return cdf


def popularity_sample(graph: InteractionGraph, u: int, n_draws: int, alpha: float, rng,
                      table: np.ndarray | None = None) -> SampleBatch:
    cdf = popularity_table(graph, alpha) if table is None else table
    items = np.searchsorted(cdf, rng.random(n_draws), side="right")
    users = np.array([u], dtype=np.int64)
    return _pathless_batch(graph, users, np.array([n_draws]), np.minimum(items, graph.m - 1))


class UniformSampler:
    kind = "uniform"

    def __init__(self, graph: InteractionGraph, config: SamplerConfig):
        self.graph, self.config = graph, config

    def item_distribution(self, users) -> np.ndarray:
        return np.full((len(users), self.graph.m), 1.0 / self.graph.m)

    def sample_items(self, starts, rng) -> np.ndarray:
        """One item per entry of ``starts``."""
        return rng.integers(0, self.graph.m, len(starts))

    def draw(self, users, rng) -> SampleBatch:
        users = np.asarray(users, dtype=np.int64)
        counts = self.config.draw_count(self.graph.degrees[users])
        return _pathless_batch(self.graph, users, counts, self.sample_items(
            np.repeat(users, counts), rng))


class PopularitySampler(UniformSampler):
    kind = "pop"

    def __init__(self, graph: InteractionGraph, config: SamplerConfig, alpha: float = 1.0):
        super().__init__(graph, config)
        self.alpha = alpha
        self.cdf = popularity_table(graph, alpha)

    def item_distribution(self, users) -> np.ndarray:
        p = np.diff(np.concatenate([[0.0], self.cdf]))
        return np.tile(p, (len(users), 1))

    def sample_items(self, starts, rng) -> np.ndarray:
        items = np.searchsorted(self.cdf, rng.random(len(starts)), side="right")
        return np.minimum(items, self.graph.m - 1)


class CoSamSampler:
    kind = "cosam"

    def __init__(self, model: SamplerModel):
        self.model = model
        self.graph, self.config = model.graph, model.config

    def item_distribution(self, users, truncated: bool = False) -> np.ndarray:
        if truncated:
            return truncated_rho(self.model, users).rho
        return exact_rho(self.model, users).rho

    def sample_items(self, starts, rng) -> np.ndarray:
        return sample_walks(self.model, starts, rng).emitted

    def draw(self, users, rng) -> SampleBatch:
        return draw_candidates(self.model, users, rng)


def make_sampler(kind: str, graph: InteractionGraph, config: SamplerConfig, alpha: float = 1.0,
                 model: SamplerModel | None = None):
    if kind == "cosam":
        return CoSamSampler(model if model is not None else SamplerModel.init(graph, config))
    if kind == "uniform":
        return UniformSampler(graph, config)
    if kind in ("pop", "popularity"):
        return PopularitySampler(graph, config, alpha)
    raise ValueError(f"unknown sampler {kind!r}")


def _concat_batches(parts: list[SampleBatch]) -> SampleBatch:
    if len(parts) == 1:
        return parts[0]
    shift = np.cumsum([0] + [len(p.users) for p in parts[:-1]])
    walks = None
    if parts[0].walks is not None:
        walks = WalkArrays(*(np.concatenate([getattr(p.walks, f) for p in parts])
                             for f in ("nodes", "edges", "lengths", "emitted", "terminal")))
    return SampleBatch(
        np.concatenate([p.users for p in parts]),
        np.concatenate([p.counts for p in parts]),
        np.concatenate([p.owner + s for p, s in zip(parts, shift)]),
        np.concatenate([p.items for p in parts]),
        np.concatenate([p.positive for p in parts]),
        walks,
    )


def draw_batch(sampler, users, seed: int, epoch: int, batch: int,
               pool: ThreadPoolExecutor | None = None) -> SampleBatch:
    """Sample a mini-batch with one RNG stream per fixed-size user chunk.

    Stream keys are ``(seed, epoch, batch, chunk)`` so the draws are identical
    whether chunks run serially or on a thread pool.
    """
    users = np.asarray(users, dtype=np.int64)
    chunks = [users[k:k + STREAM_CHUNK] for k in range(0, len(users), STREAM_CHUNK)]

    def job(c):
        rng = np.random.default_rng([seed, epoch, batch, c])
        return sampler.draw(chunks[c], rng)

    idx = range(len(chunks))
    parts = list(pool.map(job, idx)) if pool is not None else [job(c) for c in idx]
    return _concat_batches(parts)


@dataclass
class TrainedModel:
    config: TrainConfig
    recommender: RecommenderModel
    sampler: SamplerModel | None
    log: list[dict] = field(default_factory=list)
    events: list[tuple] = field(default_factory=list)

    def log_csv(self) -> str:
        lines = [LOG_HEADER]
        for row in self.log:
            fmt = lambda v: "" if v is None else f"{v:.6f}"
            seconds = f"{row['seconds']:.3f}" if self.config.record_seconds else "0"
            lines.append(f"{row['epoch']},{row['objective']:.6f},{seconds},"
                         f"{fmt(row['pre5'])},{fmt(row['rec5'])},{fmt(row['ndcg'])}")
        return "\n".join(lines) + "\n"


def train(split: SplitDataset, config: TrainConfig, graph: InteractionGraph | None = None,
          callback=None) -> TrainedModel:
    """Alternate recommender and sampler updates over user mini-batches.

    Per batch: draw candidates with the current sampler, take an Adam step on
    the recommender's sampled objective, compute rewards with the updated
    recommender, then (CoSam only) take a policy-gradient Adam step on the
    sampler logits. ``callback(row, recommender, sampler_model)`` runs after
    every epoch with the current models (``sampler_model`` is None for
    baselines).
    """
    if len(split.train) == 0:
        raise ValueError("empty training fold")
    graph = InteractionGraph.build(split.train) if graph is None else graph
    scfg = config.sampler_config
    rec = RecommenderModel.init(graph.n, graph.m, config.dim, config.seed, reg=config.lam)
    sampler = make_sampler(config.sampler, graph, scfg, config.alpha)
    cosam = isinstance(sampler, CoSamSampler)

    rec_state = AdamState.zeros_like(rec.params())
    theta_state = AdamState.zeros_like({"logits": sampler.model.logits}) if cosam else None
    result = TrainedModel(config, rec, sampler.model if cosam else None)
    active_users = np.flatnonzero(graph.user_degree_array() > 0)
    version = 0

    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    try:
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            order = np.random.default_rng([config.seed, epoch]).permutation(active_users)
            total = 0.0
            for b, lo in enumerate(range(0, len(order), config.batch_size)):
                users = order[lo:lo + config.batch_size]
                batch = draw_batch(sampler, users, config.seed, epoch, b, pool)
                result.events.append((epoch, b, "sample", version))

                obj = recommender_objective(rec, graph, batch)
                if not np.isfinite(obj):
                    raise TrainingDiverged(f"non-finite objective at epoch {epoch}, batch {b}")
                total += obj
                grads = recommender_gradient(rec, graph, batch)
                params, rec_state = adam_step(rec.params(), grads, rec_state, config.lr,
                                              maximize=True)
                rec = rec.with_params(params)
                result.events.append((epoch, b, "update_recommender", version))

                if cosam and config.update_sampler:
                    rewards = reward(rec, graph, batch.users[batch.owner], batch.items)
                    g = policy_gradient(sampler.model, batch, rewards)
                    model, theta_state = apply_gradient(sampler.model, g, theta_state,
                                                        config.theta_lr)
                    sampler = CoSamSampler(model)
                    version += 1
                    result.events.append((epoch, b, "update_sampler", version))

            row = {"epoch": epoch, "objective": total, "seconds": time.perf_counter() - t0,
                   "pre5": None, "rec5": None, "ndcg": None}
            if config.eval_every and epoch % config.eval_every == 0 and len(split.test):
                rep = evaluate(rec, graph, split.test.pairs, (5,),
                               sampler.model if cosam else None)
                row.update(pre5=rep.precision[5], rec5=rep.recall[5], ndcg=rep.ndcg)
            result.log.append(row)
            log.info("epoch %d objective %.4f (%.2fs)", epoch, total, row["seconds"])
            if callback is not None:
                callback(row, rec, sampler.model if cosam else None)
    finally:
        if pool is not None:
            pool.shutdown()

    result.recommender = rec
    result.sampler = sampler.model if cosam else None
    return result


@dataclass
class BoundEstimate:
    value: float
    stderr: float


def lower_bound_estimate(sampler, recommender: RecommenderModel, graph: InteractionGraph,
                         sample_count: int = 100, rng=None, draw_counts=None,
                         truncated: bool = False) -> BoundEstimate:
    """Monte-Carlo estimate of the Jensen lower bound on the training likelihood.

    ``sum_u [sum_{i in X_u} log p_s(i|u) + sum_{i in X_u} log f_r(u,i)
    + N_u * E_{p_s}[(1 - x_ui) log(1 - f_r(u,i))]]`` over users with train
    positives. The log-probabilities are exact; only the expectation is
    sampled, with ``sample_count`` draws per user.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    users = np.flatnonzero(graph.user_degree_array() > 0)
    if len(users) == 0:
        return BoundEstimate(0.0, 0.0)
    if isinstance(sampler, SamplerModel):
        sampler = CoSamSampler(sampler)
    if isinstance(sampler, CoSamSampler):
        rho = sampler.item_distribution(users, truncated=truncated)
    else:
        rho = sampler.item_distribution(users)
    counts = (sampler.config.draw_count(graph.degrees[users]) if draw_counts is None
              else np.asarray(draw_counts, dtype=np.float64))

    value = 0.0
    for k, u in enumerate(users.tolist()):
        pos = graph.user_items(u)
        value += np.log(rho[k, pos]).sum() + np.log(recommender.predict(u, pos)).sum()

    owner = np.repeat(np.arange(len(users)), sample_count)
    items = sampler.sample_items(users[owner], rng)
    r = reward(recommender, graph, users[owner], items)
    mean = np.bincount(owner, weights=r, minlength=len(users)) / sample_count
    sq = np.bincount(owner, weights=r * r, minlength=len(users)) / sample_count
    var_mean = np.maximum(sq - mean ** 2, 0.0) / max(sample_count - 1, 1)
    value += float((counts * mean).sum())
    return BoundEstimate(value, float(np.sqrt((counts ** 2 * var_mean).sum())))


@dataclass
class ProbeResult:
    gradient_variance: float
    sampled_loss: float
    repeats: int


def variance_probe(sampler, recommender: RecommenderModel, graph: InteractionGraph,
                   repeats: int = 1000, batch_size: int = 128, seed: int = 0,
                   threads: int = 1) -> ProbeResult:
    """Gradient variance and informativeness of a sampler at fixed models.

    Each repeat draws a random user mini-batch, samples candidates, and
    computes the recommender gradient scaled to unit L2 norm. Reports the mean
    over coordinates of the per-coordinate variance across repeats, and the
    mean loss ``-log(1 - f_r)`` over sampled non-positive items. Repeat ``r``
    uses RNG stream ``(seed, r)``, so ``threads`` does not change the result.
    """
    if batch_size < 1 or repeats < 1:
        raise ValueError("batch_size and repeats must be >= 1")
    if isinstance(sampler, SamplerModel):
        sampler = CoSamSampler(sampler)
    users_all = np.flatnonzero(graph.user_degree_array() > 0)
    size = min(batch_size, len(users_all))

    def one(r):
        rng = np.random.default_rng([seed, r])
        users = rng.choice(users_all, size=size, replace=False)
        batch = sampler.draw(users, rng)
        g = recommender_gradient(recommender, graph, batch)
        vec = np.concatenate([g["user_emb"].ravel(), g["item_emb"].ravel()])
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec /= norm
        neg = ~batch.positive
        loss = -np.log1p(-recommender.predict(batch.users[batch.owner[neg]], batch.items[neg]))
        return vec, float(loss.sum()), int(neg.sum())

    total = np.zeros(recommender.user_emb.size + recommender.item_emb.size)
    total_sq = np.zeros_like(total)
    loss_sum, loss_n = 0.0, 0
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        # consumed in repeat order, so sums match the serial path bit for bit
        results = pool.map(one, range(repeats)) if pool else map(one, range(repeats))
        for vec, ls, ln in results:
            total += vec
            total_sq += vec * vec
            loss_sum += ls
            loss_n += ln
    finally:
        if pool is not None:
            pool.shutdown()
    mean = total / repeats
    variance = float(np.mean(total_sq / repeats - mean ** 2))
    return ProbeResult(variance, loss_sum / max(loss_n, 1), repeats)
