"""Translation-based user preference scoring (TUP), its knowledge-enhanced form
(KTUP) and the dot-product pretrainer (BPRMF).

All recommendation scores are *distances*: lower ranks higher. BPRMF's dot
product is negated so one BPR loss serves every model.

For a (user, item) pair the forward pass is::

    i_hat  = i + e            (KTUP, aligned items only)
    P_hat  = P + R,  W_hat = WP + WR     (KTUP; TUP uses P, WP)
    logits = (u + i_hat) . P_hat_k
    a      = softmax(logits)                       soft
           = onehot(argmax(logits + g))            hard, g ~ Gumbel
    p      = a @ P_hat
    w      = normalize(a @ W_hat)
    d      = u - i_hat
    score  = |d - (w.d) w + p|_1

In hard mode the backward pass routes through the Gumbel-softmax surrogate
``y = softmax((logits + g) / tau)`` in place of the one-hot ``a``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embeddings import EmbeddingSpace
from .kgc import l1, project

MODELS = ("bprmf", "tup", "ktup")


@dataclass(frozen=True)
class RecConfig:
    model: str = "tup"
    induction: str = "soft"
    tau: float = 1.0
    noise: str = "uniform"

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown recommendation model {self.model!r}")
        if self.induction not in ("hard", "soft"):
            raise ValueError(f"unknown induction strategy {self.induction!r}")
        if not self.tau > 0:
            raise ValueError("temperature must be positive")
        if self.noise not in ("uniform", "normal"):
            raise ValueError(f"unknown noise law {self.noise!r}")


@dataclass
class InducedPreference:
    weights: np.ndarray
    surrogate: np.ndarray
    p_vec: np.ndarray
    w_vec: np.ndarray
    selected: int | None = None


def softmax(z, axis: int = -1) -> np.ndarray:
    z = np.asarray(z)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis: int = -1) -> np.ndarray:
    z = np.asarray(z)
    m = z.max(axis=axis, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=axis, keepdims=True))


def softmax_backward(y: np.ndarray, upstream: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Vector-Jacobian product of ``y = softmax(z / tau)`` with respect to ``z``."""
    return y * (upstream - np.sum(y * upstream, axis=-1, keepdims=True)) / tau


def gumbel_noise(rng, shape, noise: str = "uniform", dtype=np.float64) -> np.ndarray:
    """``-log(-log(u))``; ``u`` uniform on (0, 1), or a clipped standard normal."""
    tiny = np.finfo(np.float64).tiny
    if noise == "uniform":
        u = rng.random(shape)
    elif noise == "normal":
        u = rng.standard_normal(shape)
    else:
        raise ValueError(f"unknown noise law {noise!r}")
    u = np.clip(u, tiny, 1.0 - np.finfo(np.float64).epsneg)
    return (-np.log(-np.log(u))).astype(dtype)


def preference_logits(u: int, i: int, space: EmbeddingSpace) -> np.ndarray:
    """Dot-product similarity of ``u + i`` with every preference translation."""
    return (space.U[u] + space.I[i]) @ space.P.T


def induce_hard(logits, tau: float, rng, P: np.ndarray, WP: np.ndarray,
                noise: str = "uniform") -> InducedPreference:
    """Straight-through Gumbel sample. ``rng=None`` disables the noise."""
    logits = np.asarray(logits, dtype=np.float64)
    g = np.zeros_like(logits) if rng is None else gumbel_noise(rng, logits.shape, noise)
    perturbed = log_softmax(logits) + g
    k = int(np.argmax(perturbed))
    z = np.zeros_like(logits)
    z[k] = 1.0
    y = softmax(perturbed / tau)
    return InducedPreference(z, y, P[k].copy(), WP[k].copy(), k)


def induce_soft(logits, P: np.ndarray, WP: np.ndarray) -> InducedPreference:
    """Attention over all preferences; the blended normal is renormalized."""
    a = softmax(np.asarray(logits, dtype=np.float64))
    w = a @ WP
    return InducedPreference(a, a, a @ P, w / np.linalg.norm(w))


def score_tup(u: int, i: int, pref: InducedPreference, space: EmbeddingSpace) -> float:
    w = pref.w_vec / np.linalg.norm(pref.w_vec)
    return float(l1(project(space.U[u], w) + pref.p_vec - project(space.I[i], w)))


def score_ktup(u: int, i: int, space: EmbeddingSpace, item_entity: np.ndarray,
               config: RecConfig = RecConfig("ktup"), rng=None) -> tuple[float, InducedPreference]:
    """Knowledge-enhanced score of one pair and the preference it induced."""
    fw = forward(space, np.array([u]), np.array([i]), config, item_entity, rng)
    pref = InducedPreference(fw.a[0], fw.y[0], fw.p[0], fw.w[0],
                             int(np.argmax(fw.a[0])) if config.induction == "hard" else None)
    return float(fw.score[0]), pref


@dataclass
class RecForward:
    users: np.ndarray
    items: np.ndarray
    ents: np.ndarray | None
    score: np.ndarray
    # translation-model intermediates; None for bprmf
    q: np.ndarray | None = None
    a: np.ndarray | None = None
    y: np.ndarray | None = None
    p: np.ndarray | None = None
    w: np.ndarray | None = None
    wnorm: np.ndarray | None = None
    d: np.ndarray | None = None
    x: np.ndarray | None = None
    P_hat: np.ndarray | None = None
    W_hat: np.ndarray | None = None
    tau: float = 1.0


def enhanced_blocks(space: EmbeddingSpace, config: RecConfig) -> tuple[np.ndarray, np.ndarray]:
    if config.model == "ktup":
        return space.P + space.R, space.WP + space.WR
    return space.P, space.WP


def enhanced_items(space: EmbeddingSpace, items: np.ndarray, config: RecConfig,
                   item_entity: np.ndarray | None) -> tuple[np.ndarray, np.ndarray | None]:
    ihat = space.I[items]
    if config.model != "ktup" or item_entity is None:
        return ihat, None
    ents = item_entity[items]
    m = ents >= 0
    if m.any():
        ihat[m] += space.E[ents[m]]
    return ihat, ents


def forward(space: EmbeddingSpace, users, items, config: RecConfig,
            item_entity: np.ndarray | None = None, rng=None,
            P_hat: np.ndarray | None = None, W_hat: np.ndarray | None = None) -> RecForward:
    """Batched distance for aligned (user, item) arrays.

    Hard induction draws Gumbel noise from ``rng``; ``rng=None`` gives the
    noise-free argmax used at evaluation time.
    """
    users = np.asarray(users)
    items = np.asarray(items)
    uvec = space.U[users]
    ihat, ents = enhanced_items(space, items, config, item_entity)
    if config.model == "bprmf":
        return RecForward(users, items, None, -np.sum(uvec * ihat, axis=-1), q=uvec, d=ihat)
    if P_hat is None:
        P_hat, W_hat = enhanced_blocks(space, config)
    q = uvec + ihat
    logits = q @ P_hat.T
    if config.induction == "soft":
        y = a = softmax(logits)
        tau = 1.0
    else:
        tau = config.tau
        if rng is not None:
            logits = logits + gumbel_noise(rng, logits.shape, config.noise, logits.dtype)
        a = np.zeros_like(logits)
        a[np.arange(len(a)), np.argmax(logits, axis=-1)] = 1.0
        y = softmax(logits / tau)
    p = a @ P_hat
    wraw = a @ W_hat
    wnorm = np.maximum(np.linalg.norm(wraw, axis=-1, keepdims=True), np.finfo(wraw.dtype).tiny)
    w = wraw / wnorm
    d = uvec - ihat
    x = d - np.sum(w * d, axis=-1, keepdims=True) * w + p
    return RecForward(users, items, ents, l1(x), q, a, y, p, w, wnorm, d, x, P_hat, W_hat, tau)


def backward(fw: RecForward, upstream: np.ndarray, config: RecConfig, grads) -> None:
    """Accumulate ``upstream * d score`` into ``grads``."""
    up = upstream[:, None]
    if config.model == "bprmf":
        grads.add("U", fw.users, -up * fw.d)
        _add_item(fw, -up * fw.q, grads)
        return
    gx = up * np.sign(fw.x)
    gw_dot = np.sum(fw.w * gx, axis=-1, keepdims=True)
    dw_dot = np.sum(fw.w * fw.d, axis=-1, keepdims=True)
    gd = gx - gw_dot * fw.w
    gw = -gw_dot * fw.d - dw_dot * gx
    gwraw = (gw - np.sum(gw * fw.w, axis=-1, keepdims=True) * fw.w) / fw.wnorm
    # straight-through: upstream wrt the selection weights is pushed through y
    ga = gx @ fw.P_hat.T + gwraw @ fw.W_hat.T
    glog = softmax_backward(fw.y, ga, fw.tau)
    gP = fw.a.T @ gx + glog.T @ fw.q
    gW = fw.a.T @ gwraw
    gq = glog @ fw.P_hat
    grads.add("U", fw.users, gd + gq)
    _add_item(fw, gq - gd, grads)
    k = np.arange(fw.P_hat.shape[0])
    grads.add("P", k, gP)
    grads.add("WP", k, gW)
    if config.model == "ktup":
        grads.add("R", k, gP)
        grads.add("WR", k, gW)


def _add_item(fw: RecForward, g: np.ndarray, grads) -> None:
    grads.add("I", fw.items, g)
    if fw.ents is not None:
        m = fw.ents >= 0
        if m.any():
            grads.add("E", fw.ents[m], g[m])


def log_sigmoid(z) -> np.ndarray:
    return -np.logaddexp(0.0, -z)


def sigmoid(z) -> np.ndarray:
    return np.exp(log_sigmoid(z))


def bpr_loss(space: EmbeddingSpace, users, pos, neg, config: RecConfig,
             item_entity: np.ndarray | None = None, rng=None, grads=None,
             scale: float = 1.0) -> float:
    """Mean ``-log sigmoid(g_neg - g_pos)`` over a batch.

    Positive and negative pairs induce their preferences independently.
    """
    P_hat = W_hat = None
    if config.model != "bprmf":
        P_hat, W_hat = enhanced_blocks(space, config)
    fp = forward(space, users, pos, config, item_entity, rng, P_hat, W_hat)
    fn = forward(space, users, neg, config, item_entity, rng, P_hat, W_hat)
    margin = fn.score - fp.score
    loss = float(-log_sigmoid(margin).sum() / len(fp.score))
    if grads is not None:
        # d/dg_pos of -log sigmoid(g_neg - g_pos) = sigmoid(g_pos - g_neg)
        coef = sigmoid(-margin) * (scale / len(fp.score))
        backward(fp, coef, config, grads)
        backward(fn, -coef, config, grads)
    return loss


class RecScorer:
    """Deterministic all-item distances for ranking; reads a fixed space."""

    def __init__(self, space: EmbeddingSpace, config: RecConfig,
                 item_entity: np.ndarray | None = None):
        self.space = space
        self.config = config
        self.item_entity = item_entity
        self.all_items = np.arange(space.I.shape[0])
        if config.model != "bprmf":
            self.P_hat, self.W_hat = enhanced_blocks(space, config)
        else:
            self.P_hat = self.W_hat = None

    def distances(self, user: int, items: np.ndarray | None = None) -> np.ndarray:
        items = self.all_items if items is None else np.asarray(items)
        users = np.full(len(items), user)
        return forward(self.space, users, items, self.config, self.item_entity, None,
                       self.P_hat, self.W_hat).score

    def attention(self, user: int, items) -> np.ndarray:
        """Soft preference weights for each (user, item) pair."""
        items = np.asarray(items)
        users = np.full(len(items), user)
        q = self.space.U[users] + enhanced_items(self.space, items, self.config,
                                                 self.item_entity)[0]
        return softmax(q @ self.P_hat.T)
