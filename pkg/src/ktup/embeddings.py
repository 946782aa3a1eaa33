"""Trainable parameters, their initialization, norm constraints and persistence.

Binary layout (all little-endian)::

    magic   4 bytes  b"KTUP"
    version u32
    dim     u32
    7 x (rows u32, cols u32)     in FIELDS order
    matrices, float32, row-major, in FIELDS order
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

log = logging.getLogger(__name__)

FIELDS = ("U", "I", "E", "P", "WP", "R", "WR")
PROJECTIONS = ("WP", "WR")
BOUNDED = ("U", "I", "E")

MAGIC = b"KTUP"
VERSION = 1
_HEADER = struct.Struct("<4sII" + "II" * len(FIELDS))


@dataclass
class EmbeddingSpace:
    dim: int
    U: np.ndarray
    I: np.ndarray
    E: np.ndarray
    P: np.ndarray
    WP: np.ndarray
    R: np.ndarray
    WR: np.ndarray

    def __getitem__(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        setattr(self, name, value)

    @property
    def dtype(self):
        return self.U.dtype

    def rows(self) -> dict[str, int]:
        return {f: self[f].shape[0] for f in FIELDS}

    def copy(self) -> "EmbeddingSpace":
        return EmbeddingSpace(self.dim, *(self[f].copy() for f in FIELDS))

    def snapshot(self) -> "EmbeddingSpace":
        """Read-only copy, safe to hand to concurrent evaluators."""
        s = self.copy()
        for f in FIELDS:
            s[f].flags.writeable = False
        return s

    def astype(self, dtype) -> "EmbeddingSpace":
        return EmbeddingSpace(self.dim, *(np.array(self[f], dtype=dtype) for f in FIELDS))

    def assign(self, other: "EmbeddingSpace") -> None:
        for f in FIELDS:
            self[f][...] = other[f]

    def equal(self, other: "EmbeddingSpace") -> bool:
        return self.dim == other.dim and all(
            self[f].shape == other[f].shape and self[f].tobytes() == other[f].tobytes()
            for f in FIELDS)


def init_bound(dim: int) -> float:
    return 6.0 / np.sqrt(dim)


def init_space(rows: dict[str, int], dim: int = 100, seed: int = 0,
               dtype=np.float32) -> EmbeddingSpace:
    """Uniform init in [-6/sqrt(dim), 6/sqrt(dim)], projection rows normalized.

    ``rows`` maps field names to row counts; missing fields get zero rows.
    """
    if dim <= 0:
        raise ValueError("embedding dimension must be positive")
    bad = set(rows) - set(FIELDS)
    if bad:
        raise ValueError(f"unknown parameter blocks {sorted(bad)}")
    if any(n < 0 for n in rows.values()):
        raise ValueError("row counts must be non-negative")
    rng = np.random.default_rng(seed)
    b = init_bound(dim)
    mats = {}
    for f in FIELDS:
        # every block consumes its own fixed child stream so adding a block
        # does not shift the others
        sub = np.random.default_rng(rng.integers(2**63))
        mats[f] = sub.uniform(-b, b, size=(rows.get(f, 0), dim)).astype(dtype)
    space = EmbeddingSpace(dim, **mats)
    for f in PROJECTIONS:
        _normalize_rows(space[f], np.arange(space[f].shape[0]), rng)
    return space


def _normalize_rows(m: np.ndarray, idx: np.ndarray, rng) -> None:
    if len(idx) == 0:
        return
    norms = np.linalg.norm(m[idx].astype(np.float64), axis=1)
    zero = norms == 0
    if zero.any():
        log.warning("re-randomizing %d zero-norm projection rows", int(zero.sum()))
        rng = rng if rng is not None else np.random.default_rng()
        z = idx[zero]
        m[z] = rng.uniform(-1, 1, size=(len(z), m.shape[1]))
        norms[zero] = np.linalg.norm(m[z].astype(np.float64), axis=1)
    m[idx] = (m[idx] / norms[:, None]).astype(m.dtype)


def _clip_rows(m: np.ndarray, idx: np.ndarray) -> None:
    if len(idx) == 0:
        return
    norms = np.linalg.norm(m[idx].astype(np.float64), axis=1)
    big = norms > 1.0
    if big.any():
        j = idx[big]
        m[j] = (m[j] / norms[big][:, None]).astype(m.dtype)


def enforce_constraints(space: EmbeddingSpace, touched: dict[str, np.ndarray] | None = None,
                        bounded=BOUNDED, rng=None) -> EmbeddingSpace:
    """Unit-normalize projection rows and clip user/item/entity rows to norm <= 1.

    With ``touched`` only those rows are visited, so untouched rows stay
    bit-identical.
    """
    for f in PROJECTIONS + tuple(bounded):
        m = space[f]
        if touched is None:
            idx = np.arange(m.shape[0])
        elif f in touched:
            idx = np.asarray(touched[f])
        else:
            continue
        if f in PROJECTIONS:
            _normalize_rows(m, idx, rng)
        else:
            _clip_rows(m, idx)
    return space


def save_space(space: EmbeddingSpace, path) -> None:
    path = Path(path)
    shapes = []
    for f in FIELDS:
        shapes += [space[f].shape[0], space.dim]
    header = _HEADER.pack(MAGIC, VERSION, space.dim, *shapes)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        for f in FIELDS:
            fh.write(np.ascontiguousarray(space[f], dtype="<f4").tobytes())
    os.replace(tmp, path)


def read_header(path) -> tuple[int, dict[str, tuple[int, int]]]:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    return _parse_header(raw, path)


def _parse_header(raw: bytes, path) -> tuple[int, dict[str, tuple[int, int]]]:
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, dim, *shapes = _HEADER.unpack(raw[:_HEADER.size])
    if magic != MAGIC:
        raise FormatError(f"{path}: not a parameter file (bad magic)")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version} (expected {VERSION})")
    out = {f: (shapes[2 * k], shapes[2 * k + 1]) for k, f in enumerate(FIELDS)}
    if any(c != dim for _, c in out.values()):
        raise FormatError(f"{path}: column count disagrees with dim {dim}")
    return dim, out


def load_space(path, expected_rows: dict[str, int] | None = None) -> EmbeddingSpace:
    """Read a parameter file; ``expected_rows`` cross-checks non-empty blocks."""
    raw = Path(path).read_bytes()
    dim, shapes = _parse_header(raw, path)
    need = _HEADER.size + 4 * sum(r * c for r, c in shapes.values())
    if len(raw) != need:
        raise FormatError(f"{path}: expected {need} bytes, found {len(raw)} (truncated or padded)")
    if expected_rows is not None:
        for f, n in expected_rows.items():
            have = shapes[f][0]
            if have and have != n:
                raise FormatError(f"{path}: block {f} has {have} rows, corpus expects {n}")
    off = _HEADER.size
    mats = {}
    for f in FIELDS:
        r, c = shapes[f]
        mats[f] = np.frombuffer(raw, dtype="<f4", count=r * c, offset=off).reshape(r, c) \
            .astype(np.float32)
        off += 4 * r * c
    return EmbeddingSpace(dim, **mats)
