"""Integrated scoring, full-list ranking and top-K metrics."""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .graph import InteractionGraph
from .recommender import RecommenderModel
from .sampler import SamplerModel, exact_rho


def integrated_score(rho, fr):
    """Probability of an item being positive up to a per-user constant: ``rho * f_r``."""
    return np.asarray(rho) * np.asarray(fr)


def score_users(recommender: RecommenderModel, users, sampler: SamplerModel | None = None,
                tol: float = 1e-8) -> np.ndarray:
    """``(len(users), m)`` scores; ``f_r`` alone when no sampler was trained."""
    fr = recommender.score_all(users)
    if sampler is None:
        return fr
    return integrated_score(exact_rho(sampler, users, tol=tol).rho, fr)


@dataclass
class RankedList:
    user: int
    items: np.ndarray
    scores: np.ndarray


def rank_from_scores(scores: np.ndarray, exclude=()) -> np.ndarray:
    """Item ids by descending score, ties by ascending id, ``exclude`` removed."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    if len(exclude):
        order = order[~np.isin(order, exclude)]
    return order


def rank_items(recommender: RecommenderModel, graph: InteractionGraph, u: int,
               sampler: SamplerModel | None = None) -> RankedList:
    scores = score_users(recommender, [u], sampler)[0]
    order = rank_from_scores(scores, graph.user_items(u))
    return RankedList(u, order, scores[order])


def _hits(ranked, relevant, k):
    return len(set(np.asarray(ranked[:k]).tolist()) & set(np.asarray(relevant).tolist()))


def precision_at_k(ranked, relevant, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    return _hits(ranked, relevant, k) / k


def recall_at_k(ranked, relevant, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(relevant) == 0:
        raise ValueError("recall is undefined without relevant items")
    return _hits(ranked, relevant, k) / len(relevant)


def ndcg(ranked, relevant) -> float:
    """DCG over the whole ranked list divided by the ideal DCG (no top-K cut)."""
    if len(relevant) == 0:
        raise ValueError("NDCG is undefined without relevant items")
    rel = np.isin(np.asarray(ranked), relevant)
    ranks = np.flatnonzero(rel) + 1
    dcg = (1.0 / np.log2(ranks + 1.0)).sum()
    ideal = (1.0 / np.log2(np.arange(1, len(relevant) + 1) + 1.0)).sum()
    return float(dcg / ideal)


@dataclass
class EvalReport:
    ks: list[int]
    precision: dict[int, float]
    recall: dict[int, float]
    ndcg: float
    users: np.ndarray
    per_user: dict[str, np.ndarray] = field(default_factory=dict)
    skipped: int = 0
    seconds: float = 0.0

    def rows(self) -> list[tuple[str, int | str, float]]:
        out = []
        for k in self.ks:
            out.append(("precision", k, self.precision[k]))
            out.append(("recall", k, self.recall[k]))
        out.append(("ndcg", "", self.ndcg))
        return out

    def to_csv(self) -> str:
        lines = ["metric,k,value"] + [f"{m},{k},{v:.6f}" for m, k, v in self.rows()]
        return "\n".join(lines) + "\n"

    def to_json(self, per_user: bool = False) -> str:
        doc = {
            "precision": {str(k): v for k, v in self.precision.items()},
            "recall": {str(k): v for k, v in self.recall.items()},
            "ndcg": self.ndcg,
            "evaluated_users": int(len(self.users)),
            "skipped_users": self.skipped,
            "seconds": self.seconds,
        }
        if per_user:
            doc["per_user"] = {"users": self.users.tolist(),
                               **{k: v.tolist() for k, v in self.per_user.items()}}
        return json.dumps(doc, indent=2)


def evaluate_scores(scores: np.ndarray, users, train_items, test_items, ks=(5, 10, 20)) -> EvalReport:
    """Metrics from precomputed ``scores[k]`` for ``users[k]``.

    ``train_items[k]`` are excluded from ranking; users whose test set is empty
    (or lies entirely outside the candidates) are skipped and counted.
    """
    t0 = time.perf_counter()
    ks = sorted(set(int(k) for k in ks))
    kept, skipped = [], 0
    pre = {k: [] for k in ks}
    rec = {k: [] for k in ks}
    nd = []
    for row, u in enumerate(np.asarray(users).tolist()):
        con = np.setdiff1d(test_items[row], train_items[row])
        if len(con) == 0:
            skipped += 1
            continue
        s = np.array(scores[row], dtype=np.float64)
        s[train_items[row]] = -np.inf
        order = np.argsort(-s, kind="stable")[:len(s) - len(np.unique(train_items[row]))]
        is_hit = np.isin(order, con)
        for k in ks:
            h = int(is_hit[:k].sum())
            pre[k].append(h / k)
            rec[k].append(h / len(con))
        ranks = np.flatnonzero(is_hit) + 1
        ideal = (1.0 / np.log2(np.arange(2, len(con) + 2))).sum()
        nd.append((1.0 / np.log2(ranks + 1.0)).sum() / ideal)
        kept.append(u)
    mean = lambda xs: float(np.mean(xs)) if xs else 0.0
    per_user = {f"precision@{k}": np.array(pre[k]) for k in ks}
    per_user.update({f"recall@{k}": np.array(rec[k]) for k in ks})
    per_user["ndcg"] = np.array(nd)
    return EvalReport(ks, {k: mean(pre[k]) for k in ks}, {k: mean(rec[k]) for k in ks},
                      mean(nd), np.array(kept, dtype=np.int64), per_user, skipped,
                      time.perf_counter() - t0)


def evaluate(recommender: RecommenderModel, graph: InteractionGraph, test_pairs,
             ks=(5, 10, 20), sampler: SamplerModel | None = None, chunk: int = 256,
             tol: float = 1e-8, threads: int = 1) -> EvalReport:
    """Rank every non-train item for each user with test positives and average metrics.

    Users are processed in chunks (optionally on a thread pool); the report
    does not depend on ``chunk`` or ``threads``.
    """
    t0 = time.perf_counter()
    test_pairs = np.asarray(test_pairs, dtype=np.int64).reshape(-1, 2)
    users = np.unique(test_pairs[:, 0])
    order = np.argsort(test_pairs[:, 0], kind="stable")
    bounds = np.searchsorted(test_pairs[order, 0], np.append(users, graph.n))
    test_items = [test_pairs[order[bounds[k]:bounds[k + 1]], 1] for k in range(len(users))]

    def job(lo):
        part = users[lo:lo + chunk]
        scores = score_users(recommender, part, sampler, tol)
        return evaluate_scores(scores, part, [graph.user_items(u) for u in part.tolist()],
                               test_items[lo:lo + chunk], ks)

    starts = range(0, len(users), chunk)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            reports = list(pool.map(job, starts))
    else:
        reports = [job(lo) for lo in starts]
    report = merge_reports(reports, ks)
    report.seconds = time.perf_counter() - t0
    return report


def merge_reports(reports: list[EvalReport], ks) -> EvalReport:
    ks = sorted(set(int(k) for k in ks))
    per_user = {}
    for key in (reports[0].per_user if reports else {}):
        per_user[key] = np.concatenate([r.per_user[key] for r in reports])
    users = np.concatenate([r.users for r in reports]) if reports else np.zeros(0, np.int64)
    mean = lambda a: float(a.mean()) if len(a) else 0.0
    return EvalReport(
        ks,
        {k: mean(per_user.get(f"precision@{k}", np.zeros(0))) for k in ks},
        {k: mean(per_user.get(f"recall@{k}", np.zeros(0))) for k in ks},
        mean(per_user.get("ndcg", np.zeros(0))),
        users, per_user, sum(r.skipped for r in reports), sum(r.seconds for r in reports),
    )
