"""Matrix-factorization recommender with a Bernoulli likelihood, plus Adam."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS = 1e-7


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


@dataclass
class RecommenderModel:
    user_emb: np.ndarray
    item_emb: np.ndarray
    eps: float = EPS
    reg: float = 1e-5

    @classmethod
    def init(cls, n: int, m: int, d: int = 32, seed: int = 0, std: float = 0.1,
             reg: float = 1e-5) -> "RecommenderModel":
        if d < 1:
            raise ValueError("embedding dimension must be >= 1")
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, std, (n, d)), rng.normal(0.0, std, (m, d)), reg=reg)

    @property
    def n(self) -> int:
        return self.user_emb.shape[0]

    @property
    def m(self) -> int:
        return self.item_emb.shape[0]

    @property
    def dim(self) -> int:
        return self.user_emb.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {"user_emb": self.user_emb, "item_emb": self.item_emb}

    def with_params(self, params: dict[str, np.ndarray]) -> "RecommenderModel":
        return RecommenderModel(params["user_emb"], params["item_emb"], self.eps, self.reg)

    def logits(self, u, i) -> np.ndarray:
        u, i = np.asarray(u), np.asarray(i)
        if u.size and (u.min() < 0 or u.max() >= self.n):
            raise IndexError("user id out of range")
        if i.size and (i.min() < 0 or i.max() >= self.m):
            raise IndexError("item id out of range")
        return np.einsum("...d,...d->...", self.user_emb[u], self.item_emb[i])

    def predict(self, u, i):
        """``f_r(u, i)``: clamped sigmoid of the embedding dot product."""
        return np.clip(sigmoid(self.logits(u, i)), self.eps, 1.0 - self.eps)

    def score_all(self, users) -> np.ndarray:
        """``f_r`` for every item, shape ``(len(users), m)``."""
        s = sigmoid(self.user_emb[np.asarray(users)] @ self.item_emb.T)
        return np.clip(s, self.eps, 1.0 - self.eps)


def predict_fr(model: RecommenderModel, u, i):
    return model.predict(u, i)


def reward(model: RecommenderModel, graph, u, i):
    """``(1 - x_ui) * log(1 - f_r(u, i))``; zero for train positives."""
    u, i = np.asarray(u), np.asarray(i)
    r = np.log1p(-model.predict(u, i))
    return np.where(graph.has_edge(u, i), 0.0, r)


def _batch_terms(graph, batch):
    users = batch.users
    pos_u = np.repeat(np.arange(len(users)), graph.degrees[users])
    pos_i = np.concatenate([graph.user_items(u) for u in users.tolist()]) if len(users) else \
        np.zeros(0, dtype=np.int64)
    neg = ~batch.positive
    return users[pos_u], pos_i, users[batch.owner[neg]], batch.items[neg]


def recommender_objective(model: RecommenderModel, graph, batch) -> float:
    """Sampled objective: log-likelihood of positives and of sampled negatives.

    Sampled train positives carry weight ``1 - x = 0``. The L2 penalty
    ``reg * ||row||^2`` is charged once per distinct touched embedding row.
    """
    pu, pi, nu, ni = _batch_terms(graph, batch)
    obj = np.log(model.predict(pu, pi)).sum() + np.log1p(-model.predict(nu, ni)).sum()
    if model.reg:
        tu = np.unique(np.concatenate([pu, nu]))
        ti = np.unique(np.concatenate([pi, ni]))
        obj -= model.reg * ((model.user_emb[tu] ** 2).sum() + (model.item_emb[ti] ** 2).sum())
    return float(obj)


def recommender_gradient(model: RecommenderModel, graph, batch) -> dict[str, np.ndarray]:
    """Exact gradient of :func:`recommender_objective` (zero where the clamp binds)."""
    pu, pi, nu, ni = _batch_terms(graph, batch)
    u = np.concatenate([pu, nu])
    i = np.concatenate([pi, ni])
    s = sigmoid(model.logits(u, i))
    target = np.concatenate([np.ones(len(pu)), np.zeros(len(nu))])
    coef = target - s
    coef[(s < model.eps) | (s > 1.0 - model.eps)] = 0.0

    g_user = np.zeros_like(model.user_emb)
    g_item = np.zeros_like(model.item_emb)
    np.add.at(g_user, u, coef[:, None] * model.item_emb[i])
    np.add.at(g_item, i, coef[:, None] * model.user_emb[u])
    if model.reg:
        tu, ti = np.unique(u), np.unique(i)
        g_user[tu] -= 2.0 * model.reg * model.user_emb[tu]
        g_item[ti] -= 2.0 * model.reg * model.item_emb[ti]
    return {"user_emb": g_user, "item_emb": g_item}


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray], **kw) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, **kw)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 0.01, maximize: bool = False):
    """Bias-corrected Adam. Pure: returns new parameter and state objects."""
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = -grads[k] if maximize else grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_params[k] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[k], new_v[k] = m, v
    return new_params, AdamState(new_m, new_v, t, b1, b2, state.eps)
