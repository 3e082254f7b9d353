"""Command-line interface: prepare, train, evaluate, probe, inspect.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Human-readable
progress goes to stderr; CSV/JSON goes to files or stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .data import (DataError, ImplicitDataset, SplitDataset, binarize_and_filter,
                   load_interactions, load_pairs, load_vocab, save_pairs, save_vocab,
                   split_holdout, split_kfold)
from .evaluation import evaluate
from .graph import InteractionGraph
from .sampler import exact_rho, truncated_rho, uniform_component_p0
from .trainer import TrainConfig, TrainingDiverged, make_sampler, train, variance_probe

log = logging.getLogger("cosam")

DEFAULT_SEED = TrainConfig.seed
SEPARATORS = {"tab": "\t", "comma": ",", "auto": None}


class UsageError(Exception):
    pass


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def data_paths(data_dir) -> dict[str, Path]:
    d = Path(data_dir)
    return {"train": d / "train.tsv", "test": d / "test.tsv",
            "users": d / "user_vocab.txt", "items": d / "item_vocab.txt"}


def load_prepared(data_dir) -> tuple[SplitDataset, bytes]:
    paths = data_paths(data_dir)
    missing = [str(p) for p in paths.values() if not p.exists()]
    if missing:
        raise UsageError(f"not a prepared data directory, missing: {', '.join(missing)}")
    _, users = load_vocab(paths["users"])
    _, items = load_vocab(paths["items"])
    mk = lambda p: ImplicitDataset(len(users), len(items), load_pairs(p), users, items)
    split = SplitDataset(mk(paths["train"]), mk(paths["test"]), seed=-1)
    return split, ckpt_io.fingerprint_files(paths["users"], paths["items"])


def cmd_prepare(args) -> int:
    if not Path(args.input).is_file():
        raise UsageError(f"input file not found: {args.input}")
    raw = load_interactions(args.input, SEPARATORS[args.format])
    ds = binarize_and_filter(raw, args.min_item_degree)
    if args.folds:
        split = split_kfold(ds, args.folds, args.fold, args.seed)
    else:
        split = split_holdout(ds, args.test_fraction, args.seed)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = data_paths(out)
    save_pairs(paths["train"], split.train.pairs)
    save_pairs(paths["test"], split.test.pairs)
    save_vocab(paths["users"], ds.user_vocab, "user")
    save_vocab(paths["items"], ds.item_vocab, "item")
    stats = ds.stats() | {"train": len(split.train), "test": len(split.test),
                          "seed": args.seed, "malformed_lines": raw.malformed}
    (out / "stats.json").write_text(json.dumps(stats, indent=2) + "\n", encoding="utf-8")

    _err(f"seed {args.seed}")
    _err(f"Number of users               {ds.n:,}")
    _err(f"Number of items               {ds.m:,}")
    _err(f"Number of positive feedbacks  {len(ds):,}")
    _err(f"Density of positive feedbacks {100 * ds.density:.2f}%")
    _err(f"train/test positives          {len(split.train):,} / {len(split.test):,}")
    return 0


def cmd_train(args) -> int:
    overrides = dict(sampler=args.sampler, epochs=args.epochs, seed=args.seed,
                     threads=args.threads)
    if args.config:
        config = TrainConfig.from_file(args.config, **overrides)
    else:
        config = TrainConfig(**{k: v for k, v in overrides.items() if v is not None})
    split, fp = load_prepared(args.data_dir)
    _err(f"seed {config.seed}, sampler {config.sampler}, threads {config.threads}")

    def progress(row, *_):
        extra = "" if row["pre5"] is None else \
            f" pre5 {row['pre5']:.4f} rec5 {row['rec5']:.4f} ndcg {row['ndcg']:.4f}"
        _err(f"epoch {row['epoch']:4d} objective {row['objective']:.4f} "
             f"({row['seconds']:.2f}s){extra}")

    try:
        result = train(split, config, callback=progress)
    except TrainingDiverged as exc:
        _err(f"training diverged: {exc}")
        return 1

    ckpt = ckpt_io.Checkpoint(config.to_text(), fp, result.recommender,
                              None if result.sampler is None else result.sampler.config,
                              None if result.sampler is None else result.sampler.logits)
    ckpt_io.save(args.out, ckpt)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log.csv")
    log_path.write_text(result.log_csv(), encoding="utf-8")
    _err(f"wrote {args.out} and {log_path}")
    return 0


def _load_models(args):
    split, fp = load_prepared(args.data_dir)
    ckpt = ckpt_io.load(args.checkpoint, fp)
    graph = InteractionGraph.build(split.train)
    return split, graph, ckpt, ckpt.sampler_model(graph)


def cmd_evaluate(args) -> int:
    split, graph, ckpt, sampler = _load_models(args)
    ks = [int(k) for k in args.k.split(",") if k.strip()]
    if not ks or min(ks) < 1:
        raise UsageError("--k needs positive integers")
    report = evaluate(ckpt.recommender, graph, split.test.pairs, ks, sampler,
                      threads=args.threads)
    sys.stdout.write(report.to_csv())
    if args.json:
        Path(args.json).write_text(report.to_json(per_user=args.per_user) + "\n", encoding="utf-8")
    _err(f"evaluated {len(report.users)} users, skipped {report.skipped}, "
         f"{report.seconds:.2f}s")
    return 0


def cmd_probe(args) -> int:
    split, graph, ckpt, sampler_model = _load_models(args)
    config = TrainConfig.from_text(ckpt.config_text)
    kinds = args.sampler.split(",") if args.sampler else [config.sampler]
    _err(f"seed {args.seed}")
    print("sampler,repeats,gradient_variance,sampled_loss")
    for kind in kinds:
        if kind == "cosam" and sampler_model is None:
            raise UsageError("checkpoint has no CoSam sampler segment")
        sampler = make_sampler(kind, graph, config.sampler_config, config.alpha, sampler_model)
        res = variance_probe(sampler, ckpt.recommender, graph, args.repeats,
                             args.batch_size or config.batch_size, args.seed, args.threads)
        print(f"{kind},{res.repeats},{res.gradient_variance:.8e},{res.sampled_loss:.6f}")
    return 0


def cmd_inspect(args) -> int:
    split, graph, ckpt, sampler = _load_models(args)
    if sampler is None:
        raise UsageError("checkpoint has no CoSam sampler segment")
    vocab = split.train.user_vocab
    try:
        u = vocab.index(args.user)
    except ValueError:
        _err(f"unknown user token {args.user!r}")
        return 1
    res = exact_rho(sampler, [u])
    rho = res.rho[0]
    cfg = sampler.config
    tail = truncated_rho(sampler, [u]).tail_mass[0]
    print(f"user {args.user} (index {u}), positives {graph.degree(u)}")
    print(f"p0 {uniform_component_p0(cfg, graph.m):.6e}  sweeps {res.sweeps}  "
          f"residual {res.residual:.2e}")
    print(f"walks truncated at l_max={cfg.l_max}: {tail:.3e} "
          f"(bound {(cfg.c1 * cfg.c2) ** (cfg.l_max // 2):.3e})")
    print("rank,item,rho,train_positive")
    top = np.argsort(-rho, kind="stable")[:args.top]
    pos = set(graph.user_items(u).tolist())
    for r, i in enumerate(top.tolist(), 1):
        print(f"{r},{split.train.item_vocab[i]},{rho[i]:.6e},{int(i in pos)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cosam", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="binarize, filter and split an interaction log")
    s.add_argument("--input", required=True)
    s.add_argument("--format", choices=sorted(SEPARATORS), default="auto")
    s.add_argument("--min-item-degree", type=int, default=3)
    s.add_argument("--test-fraction", type=float, default=0.2)
    s.add_argument("--folds", type=int, default=0, help="k-fold mode when >= 2")
    s.add_argument("--fold", type=int, default=0)
    s.add_argument("--seed", type=int, default=DEFAULT_SEED)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train recommender and sampler")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--config")
    s.add_argument("--sampler", choices=["cosam", "uniform", "pop"])
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--threads", type=_positive)
    s.add_argument("--out", required=True)
    s.add_argument("--log", help="training-log CSV (default: <out>.log.csv)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="top-K metrics on the test fold")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--k", default="5,10,20")
    s.add_argument("--json")
    s.add_argument("--per-user", action="store_true")
    s.add_argument("--threads", type=_positive, default=1)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("probe", help="gradient variance and sampled training loss")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--repeats", type=_positive, default=1000)
    s.add_argument("--batch-size", type=_positive)
    s.add_argument("--sampler", help="comma list of samplers to probe (default: trained one)")
    s.add_argument("--seed", type=int, default=DEFAULT_SEED)
    s.add_argument("--threads", type=_positive, default=1)
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("inspect", help="show a user's sampling distribution")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--user", required=True, help="user token")
    s.add_argument("--top", type=_positive, default=20)
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        _err(f"cosam: error: {exc}")
        return 2
    except (DataError, ckpt_io.CheckpointError, ValueError, OSError) as exc:
        _err(f"cosam: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
