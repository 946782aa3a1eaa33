"""TransE / TransH scoring and the margin ranking loss with closed-form gradients.

Derivatives (L1 distance, subgradient of |.| at 0 taken as 0)::

    d = h - t,  x = d - (w.d) w + r,  s = sign(x)
    df/dr = s
    df/dh = s - (w.s) w = -df/dt
    df/dw = -(w.s) d - (w.d) s

TransE drops the projection: x = d + r, df/dh = s.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embeddings import EmbeddingSpace


@dataclass(frozen=True)
class KgcConfig:
    variant: str = "transH"
    margin: float = 1.0

    def __post_init__(self):
        if self.variant not in ("transE", "transH"):
            raise ValueError(f"unknown KG model variant {self.variant!r}")
        if not self.margin > 0:
            raise ValueError("margin must be positive")


def project(v, w):
    """Component of ``v`` orthogonal to the unit normal ``w`` (batched on leading axes)."""
    v = np.asarray(v)
    w = np.asarray(w)
    return v - np.sum(w * v, axis=-1, keepdims=True) * w


def l1(x) -> np.ndarray:
    return np.abs(x).sum(axis=-1)


def _residual(h, t, r, w):
    d = h - t
    if w is None:
        return d + r, d
    return d - np.sum(w * d, axis=-1, keepdims=True) * w + r, d


def score_triple(h: int, t: int, r: int, space: EmbeddingSpace, config: KgcConfig = KgcConfig()):
    """L1 energy of a single triple; lower means more plausible."""
    return score_triples(space, np.array([h]), np.array([t]), np.array([r]), config)[0]


def score_triples(space: EmbeddingSpace, h, t, r, config: KgcConfig = KgcConfig()) -> np.ndarray:
    w = space.WR[r] if config.variant == "transH" else None
    x, _ = _residual(space.E[h], space.E[t], space.R[r], w)
    return l1(x)


@dataclass
class _Forward:
    h: np.ndarray
    t: np.ndarray
    r: np.ndarray
    x: np.ndarray
    d: np.ndarray
    w: np.ndarray | None
    score: np.ndarray


def forward(space: EmbeddingSpace, triples: np.ndarray, config: KgcConfig) -> _Forward:
    h, t, r = triples[:, 0], triples[:, 1], triples[:, 2]
    w = space.WR[r] if config.variant == "transH" else None
    x, d = _residual(space.E[h], space.E[t], space.R[r], w)
    return _Forward(h, t, r, x, d, w, l1(x))


def backward(fw: _Forward, upstream: np.ndarray, grads) -> None:
    """Accumulate ``upstream * d score`` into the sparse gradient ``grads``."""
    gx = upstream[:, None] * np.sign(fw.x)
    grads.add("R", fw.r, gx)
    if fw.w is None:
        gd = gx
    else:
        ws = np.sum(fw.w * gx, axis=-1, keepdims=True)
        wd = np.sum(fw.w * fw.d, axis=-1, keepdims=True)
        gd = gx - ws * fw.w
        grads.add("WR", fw.r, -ws * fw.d - wd * gx)
    grads.add("E", fw.h, gd)
    grads.add("E", fw.t, -gd)


def kgc_loss(space: EmbeddingSpace, pos: np.ndarray, neg: np.ndarray, config: KgcConfig,
             grads=None, scale: float = 1.0) -> float:
    """Mean hinge ``[f(pos) + margin - f(neg)]_+`` over a batch.

    When ``grads`` is given, ``scale`` times the loss gradient is accumulated
    into it.
    """
    fp = forward(space, pos, config)
    fn = forward(space, neg, config)
    viol = fp.score + config.margin - fn.score
    active = viol > 0
    loss = float(np.where(active, viol, 0.0).sum() / len(pos))
    if grads is not None:
        up = active.astype(fp.score.dtype) * (scale / len(pos))
        backward(fp, up, grads)
        backward(fn, -up, grads)
    return loss
