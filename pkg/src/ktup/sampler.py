"""Negative sampling by uniform corruption with rejection of known positives."""

from __future__ import annotations

import numpy as np

from .corpus import TripleSet, relation_categories
from .errors import DataError

MAX_RETRIES = 100


class TrainIndex:
    """Membership test for (user, item) train positives."""

    def __init__(self, users, items, num_users: int, num_items: int):
        self.num_items = num_items
        self.keys = np.unique(np.asarray(users, dtype=np.int64) * num_items
                              + np.asarray(items, dtype=np.int64))
        self.counts = np.bincount(np.asarray(users, dtype=np.int64), minlength=num_users)

    def contains(self, users, items) -> np.ndarray:
        k = np.asarray(users, dtype=np.int64) * self.num_items + np.asarray(items, dtype=np.int64)
        if len(self.keys) == 0:
            return np.zeros(k.shape, dtype=bool)
        pos = np.minimum(np.searchsorted(self.keys, k), len(self.keys) - 1)
        return self.keys[pos] == k


def sample_rec_negatives(users, index: TrainIndex, rng, max_retries: int = MAX_RETRIES) -> np.ndarray:
    """One uniformly drawn non-interacted item per user entry."""
    users = np.asarray(users, dtype=np.int64)
    full = index.counts[users] >= index.num_items
    if full.any():
        raise DataError(f"user {int(users[full][0])} has interacted with every item; "
                        "no negative exists")
    neg = rng.integers(index.num_items, size=len(users))
    bad = index.contains(users, neg)
    for _ in range(max_retries):
        if not bad.any():
            return neg
        j = np.flatnonzero(bad)
        neg[j] = rng.integers(index.num_items, size=len(j))
        bad[j] = index.contains(users[j], neg[j])
    if bad.any():
        raise DataError(f"no negative item found for user {int(users[bad][0])} "
                        f"after {max_retries} retries")
    return neg


def bernoulli_head_probs(ts: TripleSet) -> np.ndarray:
    """Per-relation probability of corrupting the head, tph / (tph + hpt)."""
    prof = relation_categories(ts)
    tph, hpt = prof.tails_per_head, prof.heads_per_tail
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(tph + hpt > 0, tph / (tph + hpt), 0.5)
    return p


def sample_kgc_negatives(triples: np.ndarray, known: TripleSet, rng,
                         head_prob: np.ndarray | float = 0.5,
                         max_retries: int = MAX_RETRIES) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt head or tail of each ``(h, t, r)`` row with a uniform entity.

    Returns the negative triples and a boolean array, True where the head was
    replaced. Corruptions that are known facts are redrawn.
    """
    n_ent = known.num_entities
    if n_ent < 2:
        raise DataError("negative sampling needs at least two entities")
    triples = np.asarray(triples, dtype=np.int64)
    p = np.broadcast_to(np.asarray(head_prob, dtype=np.float64), (known.num_relations,))
    head_side = rng.random(len(triples)) < p[triples[:, 2]]
    neg = triples.copy()

    def draw(j):
        e = rng.integers(n_ent, size=len(j))
        neg[j, 0] = np.where(head_side[j], e, triples[j, 0])
        neg[j, 1] = np.where(head_side[j], triples[j, 1], e)

    allj = np.arange(len(triples))
    draw(allj)
    bad = known.contains(neg[:, 0], neg[:, 1], neg[:, 2])
    for _ in range(max_retries):
        if not bad.any():
            return neg, head_side
        j = np.flatnonzero(bad)
        draw(j)
        bad[j] = known.contains(neg[j, 0], neg[j, 1], neg[j, 2])
    if bad.any():
        h, t, r = triples[bad][0]
        raise DataError(f"no corruption of triple ({h}, {t}, {r}) outside the KG "
                        f"after {max_retries} retries")
    return neg, head_side
