"""Learnable random-walk sampler on the user-item graph: edge weights and the adaptive walk.

The sampler assigns every directed edge ``v -> x`` of the interaction graph a
logit; a node's transition distribution is the softmax of its row. A walk
started at user ``u``:

* at a user node stops with probability ``1 - c1`` and emits a uniformly
  random item;
* at an item node stops with probability ``1 - c2`` and emits that item;
* otherwise moves to a neighbor drawn from the transition distribution.

After ``l_max`` transitions the walk is forced to stop (item node: emit it,
user node: emit a uniform item). Isolated nodes always stop. The emission
distribution of the untruncated walk is the fixed point ``rho_u`` of the
graph propagation; :func:`exact_rho` computes it, and with ``steps=l_max``
the exact distribution of the truncated walk.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .graph import InteractionGraph
from .recommender import AdamState, adam_step


class Terminal(enum.IntEnum):
    USER = 0  # stopped at a user node, uniform emission
    ITEM = 1  # stopped at an item node, emits it
    TRUNCATED = 2  # forced stop after l_max transitions


@dataclass(frozen=True)
class SamplerConfig:
    c1: float = 0.6
    c2: float = 0.6
    l_max: int = 10
    candidate_multiplier: float = 5.0

    def __post_init__(self):
        if not (0.0 <= self.c1 <= 1.0 and 0.0 <= self.c2 <= 1.0):
            raise ValueError("c1 and c2 must lie in [0, 1]")
        if min(self.c1, self.c2) >= 1.0:
            raise ValueError("c1 = c2 = 1 gives walks that never terminate")
        if self.l_max < 1:
            raise ValueError("l_max must be >= 1")
        if not self.candidate_multiplier > 0:
            raise ValueError("candidate_multiplier must be positive")

    def draw_count(self, num_positives):
        """``N_u = max(1, round(multiplier * |X_u|))``, vectorized."""
        k = np.floor(self.candidate_multiplier * np.asarray(num_positives) + 0.5)
        return np.maximum(1, k).astype(np.int64)


def uniform_component_p0(config: SamplerConfig, m: int) -> float:
    """Weight-independent mass every item gets from uniform emissions."""
    return (1.0 - config.c1) / (1.0 - config.c1 * config.c2) / m


class WalkPath(NamedTuple):
    nodes: np.ndarray  # global node ids, starts at the query user
    edges: np.ndarray  # CSR edge index of each transition taken
    emitted_item: int
    terminal: Terminal

    @property
    def length(self) -> int:
        return len(self.edges)


@dataclass
class WalkArrays:
    """Fixed-width storage for many walks; unused slots hold -1."""

    nodes: np.ndarray  # (W, l_max + 1)
    edges: np.ndarray  # (W, l_max)
    lengths: np.ndarray
    emitted: np.ndarray
    terminal: np.ndarray

    def __len__(self) -> int:
        return len(self.lengths)

    def path(self, k: int) -> WalkPath:
        L = int(self.lengths[k])
        return WalkPath(self.nodes[k, :L + 1].copy(), self.edges[k, :L].copy(),
                        int(self.emitted[k]), Terminal(int(self.terminal[k])))

    def graph_emitted(self, n: int) -> np.ndarray:
        """Mask of walks whose emission came from stopping at an item node."""
        last = self.nodes[np.arange(len(self)), self.lengths]
        return last >= n


@dataclass
class SampleBatch:
    """Candidate draws for a group of users, stored flat and grouped by user.

    ``owner[k]`` is the position in ``users`` of draw ``k``; draws of one user
    are contiguous. ``walks`` is ``None`` for pathless baseline samplers.
    """

    users: np.ndarray
    counts: np.ndarray
    owner: np.ndarray
    items: np.ndarray
    positive: np.ndarray
    walks: WalkArrays | None = None

    def __len__(self) -> int:
        return len(self.items)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.counts)])

    def user_items(self, k: int) -> np.ndarray:
        o = self.offsets
        return self.items[o[k]:o[k + 1]]

    def positive_part(self, k: int) -> np.ndarray:
        o = self.offsets
        return self.items[o[k]:o[k + 1]][self.positive[o[k]:o[k + 1]]]

    def rest_part(self, k: int) -> np.ndarray:
        o = self.offsets
        return self.items[o[k]:o[k + 1]][~self.positive[o[k]:o[k + 1]]]

    def paths(self, k: int) -> list[WalkPath]:
        if self.walks is None:
            return []
        o = self.offsets
        return [self.walks.path(j) for j in range(o[k], o[k + 1])]


def _row_softmax(logits: np.ndarray, graph: InteractionGraph) -> np.ndarray:
    if len(logits) == 0:
        return logits.copy()
    nonempty = graph.degrees > 0
    starts = graph.indptr[:-1][nonempty]
    rowmax = np.zeros(graph.num_nodes)
    rowmax[nonempty] = np.maximum.reduceat(logits, starts)
    ex = np.exp(logits - rowmax[graph.edge_src])
    rowsum = np.bincount(graph.edge_src, weights=ex, minlength=graph.num_nodes)
    return ex / rowsum[graph.edge_src]


class SamplerModel:
    """Edge logits aligned with ``graph``'s combined CSR plus walk parameters."""

    def __init__(self, graph: InteractionGraph, config: SamplerConfig, logits=None):
        self.graph = graph
        self.config = config
        if logits is None:
            logits = np.zeros(len(graph.indices))
        logits = np.asarray(logits, dtype=np.float64)
        if logits.shape != graph.indices.shape:
            raise ValueError("logit array does not match the graph's edge count")
        self._logits = logits
        self._cache = None

    @classmethod
    def init(cls, graph: InteractionGraph, config: SamplerConfig) -> "SamplerModel":
        return cls(graph, config)

    @property
    def logits(self) -> np.ndarray:
        return self._logits

    @logits.setter
    def logits(self, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._logits.shape:
            raise ValueError("logit array does not match the graph's edge count")
        self._logits = value
        self._cache = None

    @property
    def p0(self) -> float:
        return uniform_component_p0(self.config, self.graph.m)

    def _derived(self):
        if self._cache is None:
            g = self.graph
            w = _row_softmax(self._logits, g)
            cum = np.zeros_like(w)
            if len(w):
                cum = np.cumsum(w)
                cum -= np.repeat(_row_offsets(cum, g), g.degrees)
                # exact 1.0 at row ends keeps row keys inside (v, v + 1]
                last = g.indptr[1:][g.degrees > 0] - 1
                cum[last] = 1.0
                np.minimum(cum, 1.0, out=cum)
            cont = np.where(np.arange(g.num_nodes) < g.n, self.config.c1, self.config.c2)
            cont = np.where(g.degrees > 0, cont, 0.0)
            self._cache = {
                "weights": w,
                "keys": g.edge_src + cum,
                "cont": cont,
            }
        return self._cache

    @property
    def weights(self) -> np.ndarray:
        """Softmax transition weight of every CSR edge."""
        return self._derived()["weights"]

    @property
    def continue_prob(self) -> np.ndarray:
        """Per-node probability of taking another step (0 for isolated nodes)."""
        return self._derived()["cont"]

    def transition_weights(self, node: int) -> np.ndarray:
        g = self.graph
        if g.degree(node) == 0:
            raise ValueError(f"node {node} is isolated and has no transitions")
        return self.weights[g.indptr[node]:g.indptr[node + 1]]

    def is_degenerate(self, node: int) -> bool:
        return self.graph.degree(node) == 0

    def transition_matrix(self) -> sp.csr_matrix:
        g = self.graph
        return sp.csr_matrix((self.weights, g.indices, g.indptr),
                             shape=(g.num_nodes, g.num_nodes))

    def pick_edges(self, nodes: np.ndarray, r: np.ndarray) -> np.ndarray:
        """Edge taken from each (non-isolated) node given uniforms ``r`` in [0, 1)."""
        g = self.graph
        e = np.searchsorted(self._derived()["keys"], nodes + r, side="right")
        return np.clip(e, g.indptr[nodes], g.indptr[nodes + 1] - 1)


def _row_offsets(cum: np.ndarray, g: InteractionGraph) -> np.ndarray:
    """Cumulative weight preceding each non-empty row (per row, for np.repeat)."""
    before = np.zeros(g.num_nodes)
    starts = g.indptr[:-1]
    has_prev = starts > 0
    before[has_prev] = cum[starts[has_prev] - 1]
    return before


def sample_walks(model: SamplerModel, starts, rng: np.random.Generator) -> WalkArrays:
    """Run one adaptive random walk from each start user, all in lock step."""
    g, cfg = model.graph, model.config
    starts = np.asarray(starts, dtype=np.int64)
    W, L = len(starts), cfg.l_max
    cont = model.continue_prob
    nodes = np.full((W, L + 1), -1, dtype=np.int64)
    edges = np.full((W, L), -1, dtype=np.int64)
    lengths = np.zeros(W, dtype=np.int64)
    emitted = np.full(W, -1, dtype=np.int64)
    terminal = np.full(W, -1, dtype=np.int8)
    nodes[:, 0] = starts

    active = np.arange(W)
    cur = starts.copy()
    for step in range(L + 1):
        if len(active) == 0:
            break
        if step == L:
            stop = np.ones(len(active), dtype=bool)
            kind = np.full(len(active), Terminal.TRUNCATED, dtype=np.int8)
        else:
            stop = rng.random(len(active)) >= cont[cur]
            kind = np.where(cur < g.n, Terminal.USER, Terminal.ITEM).astype(np.int8)
        if stop.any():
            idx, at = active[stop], cur[stop]
            at_user = at < g.n
            out = at - g.n
            out[at_user] = rng.integers(0, g.m, size=int(at_user.sum()))
            emitted[idx] = out
            terminal[idx] = kind[stop]
        active, cur = active[~stop], cur[~stop]
        if len(active) == 0:
            break
        e = model.pick_edges(cur, rng.random(len(active)))
        cur = g.indices[e]
        edges[active, step] = e
        nodes[active, step + 1] = cur
        lengths[active] += 1
    return WalkArrays(nodes, edges, lengths, emitted, terminal)


def arw_sample(model: SamplerModel, u: int, rng: np.random.Generator) -> WalkPath:
    if not 0 <= u < model.graph.n:
        raise IndexError(f"user {u} out of range")
    return sample_walks(model, [u], rng).path(0)


def draw_candidates(model: SamplerModel, users, rng: np.random.Generator) -> SampleBatch:
    """``N_u`` independent walks for every user in ``users``."""
    g = model.graph
    users = np.asarray(users, dtype=np.int64)
    counts = model.config.draw_count(g.degrees[users])
    owner = np.repeat(np.arange(len(users)), counts)
    walks = sample_walks(model, users[owner], rng)
    positive = g.has_edge(users[owner], walks.emitted) if len(owner) else np.zeros(0, bool)
    return SampleBatch(users, counts, owner, walks.emitted, np.asarray(positive), walks)


def draw_candidate_set(model: SamplerModel, u: int, rng: np.random.Generator) -> SampleBatch:
    return draw_candidates(model, [u], rng)


@dataclass
class RhoResult:
    rho: np.ndarray  # (len(users), m)
    sweeps: int
    residual: float
    converged: bool
    tail_mass: np.ndarray  # un-terminated walk mass per user after the last sweep


def exact_rho(model: SamplerModel, users, tol: float = 1e-8, max_sweeps: int = 200,
              steps: int | None = None) -> RhoResult:
    """Sampling distributions of ``users`` from the propagation fixed point.

    Sweep ``t`` returns exactly the ``t``-th simultaneous update of the user
    distributions / item labels started from uniform distributions and item
    indicators, restricted to the requested users. It is evaluated from the
    user side by pushing the walk frontier ``f_t = e_u (C W)^t``:

        rho^(t) = sum_{k<t} f_k (I - C) X0 + f_t X0

    where ``X0`` maps user nodes to the uniform distribution and item nodes
    to their indicators. With ``steps`` given, exactly that many sweeps run and
    the result is the distribution of walks truncated after ``steps``
    transitions.
    """
    g = model.graph
    users = np.atleast_1d(np.asarray(users, dtype=np.int64))
    n, m, B = g.n, g.m, len(users)
    cont = model.continue_prob
    WT = model.transition_matrix().T.tocsr()

    f = np.zeros((g.num_nodes, B))
    f[users, np.arange(B)] = 1.0
    acc_user = np.zeros(B)
    acc_item = np.zeros((m, B))
    rho = np.full((m, B), 1.0 / m)
    limit = max_sweeps if steps is None else steps
    residual, sweeps = np.inf, 0
    for sweeps in range(1, limit + 1):
        stop = f * (1.0 - cont)[:, None]
        acc_user += stop[:n].sum(axis=0)
        acc_item += stop[n:]
        f = WT @ (f * cont[:, None])
        new = acc_item + f[n:] + ((acc_user + f[:n].sum(axis=0)) / m)[None, :]
        residual = float(np.abs(new - rho).max())
        rho = new
        if steps is None and residual < tol:
            break
    if steps is None and limit == 0:
        residual = 0.0
    converged = steps is not None or residual < tol
    return RhoResult(rho.T.copy(), sweeps, residual, converged, f.sum(axis=0))


def truncated_rho(model: SamplerModel, users) -> RhoResult:
    """Exact emission distribution of the walk as sampled (forced stop at ``l_max``)."""
    return exact_rho(model, users, steps=model.config.l_max)


def path_strength(model: SamplerModel, path: WalkPath) -> float:
    """Probability that a walk from ``path.nodes[0]`` takes ``path`` and emits its item."""
    g, cfg = model.graph, model.config
    cont, w = model.continue_prob, model.weights
    p = 1.0
    for v, e in zip(path.nodes[:-1], path.edges):
        p *= cont[v] * w[e]
    last = int(path.nodes[-1])
    at_user = last < g.n
    if path.terminal == Terminal.TRUNCATED:
        stop = 1.0
    else:
        stop = 1.0 - cont[last]
    return p * stop * (1.0 / g.m if at_user else 1.0)


class SparseGrad(NamedTuple):
    indices: np.ndarray
    values: np.ndarray

    def to_dense(self, size: int) -> np.ndarray:
        out = np.zeros(size)
        np.add.at(out, self.indices, self.values)
        return out


def log_path_grad(model: SamplerModel, path: WalkPath) -> SparseGrad:
    """Gradient of ``log path_strength`` w.r.t. the logits.

    Each transition out of node ``v`` along edge ``e`` adds ``1 - w_e`` to
    ``e`` and ``-w_s`` to every sibling ``s``. Stop factors do not depend on
    the logits.
    """
    g, w = model.graph, model.weights
    acc: dict[int, float] = {}
    for v, e in zip(path.nodes[:-1], path.edges):
        lo, hi = g.indptr[v], g.indptr[v + 1]
        for s in range(lo, hi):
            acc[s] = acc.get(s, 0.0) - w[s]
        acc[int(e)] = acc.get(int(e), 0.0) + 1.0
    idx = np.fromiter(sorted(acc), dtype=np.int64, count=len(acc))
    return SparseGrad(idx, np.array([acc[k] for k in idx.tolist()], dtype=np.float64))


def accumulate_path_grads(model: SamplerModel, walks: WalkArrays, coef: np.ndarray,
                          out: np.ndarray | None = None) -> np.ndarray:
    """``sum_k coef[k] * grad log path_strength(walk k)`` as a dense vector."""
    g = model.graph
    out = np.zeros(len(g.indices)) if out is None else out
    taken = walks.edges >= 0
    e = walks.edges[taken]
    c = np.broadcast_to(np.asarray(coef, dtype=np.float64)[:, None], walks.edges.shape)[taken]
    out += np.bincount(e, weights=c, minlength=len(out))
    node_coef = np.bincount(g.edge_src[e], weights=c, minlength=g.num_nodes)
    out -= node_coef[g.edge_src] * model.weights
    return out


def policy_gradient(model: SamplerModel, batch: SampleBatch, rewards: np.ndarray) -> np.ndarray:
    """Sampled estimate of the lower bound's gradient w.r.t. the logits.

    Per user, a positive item ``i`` hit by ``c`` walks that stopped at node
    ``i`` contributes those walks' log-gradients divided by
    ``N_u * p0 + c``; every walk additionally contributes its log-gradient
    scaled by the reward of its emitted item. Uniform emissions belong to the
    ``p0`` share, so they are neither counted nor used in the positive term.
    """
    g = model.graph
    walks = batch.walks
    if walks is None:
        raise ValueError("policy gradient needs walk paths")
    coef = np.asarray(rewards, dtype=np.float64).copy()
    hit = batch.positive & walks.graph_emitted(g.n)
    if hit.any():
        key = batch.owner[hit] * g.m + batch.items[hit]
        uniq, inv, cnt = np.unique(key, return_inverse=True, return_counts=True)
        denom = batch.counts[batch.owner[hit]] * model.p0 + cnt[inv]
        coef[hit] += 1.0 / denom
    return accumulate_path_grads(model, walks, coef)


def enumerate_paths(model: SamplerModel, u: int, max_len: int | None = None,
                    truncate: bool = True):
    """Yield every ``(path, strength)`` of walks from ``u`` up to ``max_len`` steps.

    User-terminal paths are yielded once with emitted item ``-1`` and the
    strength of stopping there (before the ``1/m`` emission factor).
    With ``truncate`` the walk is forced to stop at ``max_len`` like the
    sampler; otherwise walks still running at ``max_len`` are dropped.
    """
    g = model.graph
    cont, w = model.continue_prob, model.weights
    L = model.config.l_max if max_len is None else max_len

    stack = [([u], [], 1.0)]
    while stack:
        nodes, edges, p = stack.pop()
        v = nodes[-1]
        forced = len(edges) == L
        if forced and not truncate:
            continue
        stop = 1.0 if forced else 1.0 - cont[v]
        kind = Terminal.TRUNCATED if forced else (Terminal.USER if v < g.n else Terminal.ITEM)
        if stop > 0:
            item = -1 if v < g.n else v - g.n
            yield WalkPath(np.array(nodes), np.array(edges, dtype=np.int64), item, kind), p * stop
        if forced or cont[v] == 0:
            continue
        for e in range(g.indptr[v], g.indptr[v + 1]):
            stack.append((nodes + [int(g.indices[e])], edges + [e], p * cont[v] * w[e]))


def exact_policy_gradient(model: SamplerModel, users, positives, rewards: np.ndarray,
                          draw_counts) -> np.ndarray:
    """Expected value of the sampled gradient, by exhaustive path enumeration.

    Differentiates ``sum_u [sum_{i in X_u} log rho_ui + N_u sum_i rho_ui e_ui]``
    with ``rho`` the truncated walk distribution. ``rewards`` is ``(len(users), m)``.
    Only for tiny graphs: the path count grows like degree**l_max.
    """
    g = model.graph
    total = np.zeros(len(g.indices))
    for k, u in enumerate(np.asarray(users).tolist()):
        paths = list(enumerate_paths(model, u))
        rho = np.zeros(g.m)
        for path, s in paths:
            if path.emitted_item >= 0:
                rho[path.emitted_item] += s
            else:
                rho += s / g.m
        pos = np.zeros(g.m, dtype=bool)
        pos[np.asarray(positives[k], dtype=np.int64)] = True
        weight_item = pos / np.where(rho > 0, rho, 1.0) + draw_counts[k] * rewards[k]
        for path, s in paths:
            if path.length == 0:
                continue
            if path.emitted_item >= 0:
                coef = s * weight_item[path.emitted_item]
            else:
                coef = s * weight_item.sum() / g.m
            grad = log_path_grad(model, path)
            total[grad.indices] += coef * grad.values
    return total


def apply_gradient(model: SamplerModel, grad: np.ndarray, state: AdamState | None = None,
                   lr: float = 0.01) -> tuple[SamplerModel, AdamState]:
    """One Adam ascent step on the logits; returns a new model and state."""
    if state is None:
        state = AdamState.zeros_like({"logits": model.logits})
    params, state = adam_step({"logits": model.logits}, {"logits": grad}, state,
                              lr=lr, maximize=True)
    return SamplerModel(model.graph, model.config, params["logits"]), state
