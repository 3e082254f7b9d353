"""Interaction-log ingestion, implicit binarization, item filtering and splits."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

VOCAB_VERSION = "v1"


class DataError(ValueError):
    """Raised when an input file or dataset violates the pipeline contract."""


@dataclass
class RawInteractions:
    users: list[str]
    items: list[str]
    ratings: list[float | None]
    timestamps: list[int | None]
    malformed: int = 0

    def __len__(self) -> int:
        return len(self.users)


@dataclass
class ImplicitDataset:
    """Binary user-item matrix stored as a duplicate-free pair array.

    ``pairs`` has shape ``(P, 2)`` with dense ``(user, item)`` indices. The
    vocabularies map dense index -> original token.
    """

    n: int
    m: int
    pairs: np.ndarray
    user_vocab: list[str]
    item_vocab: list[str]

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def density(self) -> float:
        return len(self.pairs) / (self.n * self.m) if self.n and self.m else 0.0

    def user_positives(self) -> list[np.ndarray]:
        """Positive items per user, sorted ascending."""
        order = np.lexsort((self.pairs[:, 1], self.pairs[:, 0]))
        p = self.pairs[order]
        bounds = np.searchsorted(p[:, 0], np.arange(self.n + 1))
        return [p[bounds[u]:bounds[u + 1], 1] for u in range(self.n)]

    def stats(self) -> dict:
        return {
            "users": self.n,
            "items": self.m,
            "positives": len(self.pairs),
            "density": self.density,
        }


@dataclass
class SplitDataset:
    train: ImplicitDataset
    test: ImplicitDataset
    seed: int
    meta: dict = field(default_factory=dict)


def load_interactions(path, sep: str | None = "\t") -> RawInteractions:
    """Parse ``user SEP item [SEP rating] [SEP timestamp]`` lines.

    ``sep=None`` accepts either tab or comma per line. Lines with fewer than two
    fields, empty tokens, or unparseable rating/timestamp are skipped and
    counted in ``malformed``. A header line is therefore skipped as malformed
    when its rating column is not numeric.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc

    raw = RawInteractions([], [], [], [])
    nonblank = 0
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        nonblank += 1
        if sep is None:
            fields = line.split("\t") if "\t" in line else line.split(",")
        else:
            fields = line.split(sep)
        fields = [f.strip() for f in fields]
        if len(fields) < 2 or not fields[0] or not fields[1]:
            raw.malformed += 1
            continue
        try:
            rating = float(fields[2]) if len(fields) > 2 and fields[2] else None
            ts = int(fields[3]) if len(fields) > 3 and fields[3] else None
        except ValueError:
            raw.malformed += 1
            continue
        raw.users.append(fields[0])
        raw.items.append(fields[1])
        raw.ratings.append(rating)
        raw.timestamps.append(ts)

    if nonblank == 0:
        log.warning("%s contains no interactions", path)
    elif len(raw) == 0:
        raise DataError(f"all {nonblank} lines of {path} are malformed")
    if raw.malformed:
        log.warning("%s: skipped %d malformed lines", path, raw.malformed)
    return raw


def _dense_ids(tokens: list[str]) -> tuple[np.ndarray, list[str]]:
    index: dict[str, int] = {}
    ids = np.fromiter((index.setdefault(t, len(index)) for t in tokens),
                      dtype=np.int64, count=len(tokens))
    return ids, list(index)


def _first_appearance_unique(pairs: np.ndarray) -> np.ndarray:
    if len(pairs) == 0:
        return pairs
    _, first = np.unique(pairs, axis=0, return_index=True)
    return pairs[np.sort(first)]


def binarize_and_filter(raw: RawInteractions, min_item_degree: int = 3) -> ImplicitDataset:
    """Collapse interactions to distinct positives and drop rare items.

    Items with fewer than ``min_item_degree`` distinct users are removed, then
    users left without positives. Dense ids follow first appearance.
    """
    if min_item_degree < 1:
        raise DataError("min_item_degree must be >= 1")
    u_ids, u_tok = _dense_ids(raw.users)
    i_ids, i_tok = _dense_ids(raw.items)
    pairs = _first_appearance_unique(np.stack([u_ids, i_ids], axis=1).reshape(-1, 2))

    item_deg = np.bincount(pairs[:, 1], minlength=len(i_tok))
    pairs = pairs[item_deg[pairs[:, 1]] >= min_item_degree]
    if len(pairs) == 0:
        raise DataError("no interactions survive filtering")

    # re-index by first appearance among surviving pairs
    uu, u_first = np.unique(pairs[:, 0], return_index=True)
    u_order = uu[np.argsort(u_first, kind="stable")]
    ii, i_first = np.unique(pairs[:, 1], return_index=True)
    i_order = ii[np.argsort(i_first, kind="stable")]
    u_map = np.full(len(u_tok), -1, dtype=np.int64)
    u_map[u_order] = np.arange(len(u_order))
    i_map = np.full(len(i_tok), -1, dtype=np.int64)
    i_map[i_order] = np.arange(len(i_order))

    return ImplicitDataset(
        n=len(u_order),
        m=len(i_order),
        pairs=np.stack([u_map[pairs[:, 0]], i_map[pairs[:, 1]]], axis=1),
        user_vocab=[u_tok[k] for k in u_order],
        item_vocab=[i_tok[k] for k in i_order],
    )


def dataset_from_pairs(pairs, n: int | None = None, m: int | None = None) -> ImplicitDataset:
    """Wrap integer pairs as a dataset with identity vocabularies (tests, synthetic data)."""
    pairs = _first_appearance_unique(np.asarray(pairs, dtype=np.int64).reshape(-1, 2))
    n = int(pairs[:, 0].max()) + 1 if n is None else n
    m = int(pairs[:, 1].max()) + 1 if m is None else m
    return ImplicitDataset(n, m, pairs, [str(u) for u in range(n)], [str(i) for i in range(m)])


def _holdout_count(size: int, fraction: float) -> int:
    # round half up, keep at least one train positive
    return min(int(math.floor(fraction * size + 0.5)), max(size - 1, 0))


def _views(ds: ImplicitDataset, test_mask: np.ndarray, seed: int, **meta) -> SplitDataset:
    mk = lambda p: ImplicitDataset(ds.n, ds.m, p, ds.user_vocab, ds.item_vocab)
    return SplitDataset(mk(ds.pairs[~test_mask]), mk(ds.pairs[test_mask]), seed, meta)


def split_holdout(ds: ImplicitDataset, test_fraction: float = 0.2, seed: int = 0) -> SplitDataset:
    """Per-user holdout: ``round(test_fraction * |X_u|)`` positives go to test."""
    if not 0 < test_fraction < 1:
        raise DataError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    test_mask = np.zeros(len(ds.pairs), dtype=bool)
    order = np.argsort(ds.pairs[:, 0], kind="stable")
    bounds = np.searchsorted(ds.pairs[order, 0], np.arange(ds.n + 1))
    for u in range(ds.n):
        rows = order[bounds[u]:bounds[u + 1]]
        k = _holdout_count(len(rows), test_fraction)
        if k:
            test_mask[rng.choice(rows, size=k, replace=False)] = True
    return _views(ds, test_mask, seed, mode="holdout", test_fraction=test_fraction)


def split_kfold(ds: ImplicitDataset, folds: int, fold: int, seed: int = 0) -> SplitDataset:
    """Fold ``fold`` of a per-user k-fold partition.

    Each user's positives are shuffled once per seed and dealt round-robin into
    ``folds`` buckets; users with a single positive stay entirely in train.
    """
    if folds < 2 or not 0 <= fold < folds:
        raise DataError("need folds >= 2 and 0 <= fold < folds")
    rng = np.random.default_rng(seed)
    test_mask = np.zeros(len(ds.pairs), dtype=bool)
    order = np.argsort(ds.pairs[:, 0], kind="stable")
    bounds = np.searchsorted(ds.pairs[order, 0], np.arange(ds.n + 1))
    for u in range(ds.n):
        rows = rng.permutation(order[bounds[u]:bounds[u + 1]])
        if len(rows) < 2:
            continue
        picked = rows[np.arange(len(rows)) % folds == fold]
        if len(picked) == len(rows):
            picked = picked[:-1]
        test_mask[picked] = True
    return _views(ds, test_mask, seed, mode="kfold", folds=folds, fold=fold)


def save_vocab(path, tokens: list[str], kind: str, sep: str = "\t") -> None:
    if kind not in ("user", "item"):
        raise DataError(f"unknown vocab kind {kind!r}")
    lines = [f"#cosam-vocab {VOCAB_VERSION} kind={kind} count={len(tokens)}"]
    lines += [f"{k}{sep}{tok}" for k, tok in enumerate(tokens)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_vocab(path, sep: str = "\t") -> tuple[str, list[str]]:
    """Read a vocab file; returns ``(kind, tokens)`` with tokens indexed densely."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("#cosam-vocab"):
        raise DataError(f"{path}: missing vocab header")
    head = lines[0].split()
    if len(head) < 2 or head[1] != VOCAB_VERSION:
        raise DataError(f"{path}: unsupported vocab version {head[1:2]}")
    meta = dict(h.split("=", 1) for h in head[2:] if "=" in h)
    kind = meta.get("kind", "")
    count = int(meta.get("count", -1))

    tokens: dict[int, str] = {}
    seen: set[str] = set()
    for line in lines[1:]:
        if not line:
            continue
        idx, tok = line.split(sep, 1)
        idx = int(idx)
        if tok in seen:
            raise DataError(f"{path}: duplicate token {tok!r}")
        if idx in tokens:
            raise DataError(f"{path}: duplicate index {idx}")
        seen.add(tok)
        tokens[idx] = tok
    if sorted(tokens) != list(range(len(tokens))):
        raise DataError(f"{path}: indices are not dense")
    if count != len(tokens):
        raise DataError(f"{path}: header count {count} != {len(tokens)} entries")
    return kind, [tokens[k] for k in range(len(tokens))]


def save_pairs(path, pairs: np.ndarray) -> None:
    body = "".join(f"{u}\t{i}\n" for u, i in np.asarray(pairs).tolist())
    Path(path).write_text(body, encoding="utf-8")


def load_pairs(path) -> np.ndarray:
    text = Path(path).read_text(encoding="utf-8").split()
    return np.array(text, dtype=np.int64).reshape(-1, 2)
