"""Row-sparse gradients and SGD / Adagrad / Adam that only touch rows with gradient."""

from __future__ import annotations

from collections import defaultdict

import numpy as np

from .embeddings import FIELDS, EmbeddingSpace


class SparseGrad:
    """Gradient rows keyed by parameter block, summed on ``coalesce``."""

    def __init__(self):
        self._parts: dict[str, list] = defaultdict(list)

    def add(self, name: str, idx, rows) -> None:
        idx = np.asarray(idx, dtype=np.int64).reshape(-1)
        rows = np.asarray(rows)
        if len(idx):
            self._parts[name].append((idx, rows.reshape(len(idx), -1)))

    def coalesce(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        out = {}
        for name, parts in self._parts.items():
            idx = np.concatenate([p[0] for p in parts])
            rows = np.concatenate([p[1] for p in parts])
            uniq, inv = np.unique(idx, return_inverse=True)
            acc = np.zeros((len(uniq), rows.shape[1]), dtype=rows.dtype)
            np.add.at(acc, inv, rows)
            out[name] = (uniq, acc)
        return out

    def dense(self, space: EmbeddingSpace) -> dict[str, np.ndarray]:
        """Full-size gradient arrays, for tests and diagnostics."""
        out = {f: np.zeros_like(space[f], dtype=np.float64) for f in FIELDS}
        for name, (idx, g) in self.coalesce().items():
            out[name][idx] += g
        return out


class Optimizer:
    """Lazy per-row optimizer state over an ``EmbeddingSpace``.

    adagrad: acc += g^2; theta -= lr * g / sqrt(acc + eps)
    adam:    bias-corrected moments with one step counter per block.
    """

    def __init__(self, kind: str = "adam", lr: float = 0.001, *, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float | None = None):
        if kind not in ("sgd", "adagrad", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps if eps is not None else (1e-10 if kind == "adagrad" else 1e-8)
        self.state: dict[str, dict] = {}

    def _state(self, name: str, param: np.ndarray) -> dict:
        st = self.state.get(name)
        if st is None:
            st = {"t": 0}
            if self.kind == "adagrad":
                st["acc"] = np.zeros_like(param)
            elif self.kind == "adam":
                st["m"] = np.zeros_like(param)
                st["v"] = np.zeros_like(param)
            self.state[name] = st
        return st

    def step(self, space: EmbeddingSpace, grads: dict[str, tuple[np.ndarray, np.ndarray]]) -> None:
        for name, (idx, g) in grads.items():
            param = space[name]
            g = g.astype(param.dtype, copy=False)
            st = self._state(name, param)
            st["t"] += 1
            if self.kind == "sgd":
                param[idx] -= self.lr * g
            elif self.kind == "adagrad":
                st["acc"][idx] += g * g
                param[idx] -= self.lr * g / np.sqrt(st["acc"][idx] + self.eps)
            else:
                b1, b2, t = self.beta1, self.beta2, st["t"]
                m = st["m"][idx] = b1 * st["m"][idx] + (1 - b1) * g
                v = st["v"][idx] = b2 * st["v"][idx] + (1 - b2) * g * g
                mhat = m / (1 - b1 ** t)
                vhat = v / (1 - b2 ** t)
                param[idx] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
