"""Loading, filtering, splitting and indexing of interactions, triples and alignments.

All raw ids are strings. Dense indices are assigned by sorting raw ids
lexicographically, so the mapping is reproducible without a seed.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DataError, DatasetExhausted, ParseError

log = logging.getLogger(__name__)

TRAIN, VALID, TEST = 0, 1, 2
ROLE_NAMES = ("train", "valid", "test")

CATEGORIES = ("1-1", "1-N", "N-1", "N-N")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


def read_tsv(path, min_fields: int, max_fields: int) -> Iterator[tuple[int, list[str]]]:
    """Yield ``(lineno, fields)`` for every data line; blank and ``#`` lines skipped."""
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if not min_fields <= len(fields) <= max_fields:
                raise ParseError(
                    path, lineno,
                    f"expected {min_fields}-{max_fields} tab-separated fields, got {len(fields)}")
            if any(not x.strip() for x in fields[:min_fields]):
                raise ParseError(path, lineno, "empty id field")
            yield lineno, [x.strip() for x in fields]


def _role_groups(owner: np.ndarray, value: np.ndarray, n: int) -> list[np.ndarray]:
    order = np.lexsort((value, owner))
    bounds = np.searchsorted(owner[order], np.arange(n + 1))
    vals = value[order]
    return [_frozen(vals[bounds[k]:bounds[k + 1]]) for k in range(n)]


@dataclass(frozen=True)
class InteractionSet:
    users: np.ndarray
    items: np.ndarray
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    roles: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "users", _frozen(np.asarray(self.users, dtype=np.int64)))
        object.__setattr__(self, "items", _frozen(np.asarray(self.items, dtype=np.int64)))
        if self.roles is not None:
            object.__setattr__(self, "roles", _frozen(np.asarray(self.roles, dtype=np.int8)))

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    def __len__(self) -> int:
        return len(self.users)

    @cached_property
    def user_index(self) -> dict[str, int]:
        return {raw: k for k, raw in enumerate(self.user_ids)}

    @cached_property
    def item_index(self) -> dict[str, int]:
        return {raw: k for k, raw in enumerate(self.item_ids)}

    def select(self, *roles: int) -> np.ndarray:
        """Boolean record mask for the given split roles."""
        if self.roles is None:
            raise DataError("interaction set has not been split")
        return np.isin(self.roles, roles)

    def items_by_user(self, *roles: int) -> list[np.ndarray]:
        """Sorted item arrays per user restricted to ``roles``."""
        m = self.select(*roles)
        return _role_groups(self.users[m], self.items[m], self.num_users)

    @cached_property
    def train_items(self) -> list[np.ndarray]:
        return self.items_by_user(TRAIN)

    def pairs(self, *roles: int) -> np.ndarray:
        m = self.select(*roles)
        return np.stack([self.users[m], self.items[m]], axis=1)


def filter_interactions(pairs: Sequence[tuple[str, str]], min_user_freq: int,
                        min_item_freq: int) -> list[tuple[str, str]]:
    """Drop users and items below the frequency thresholds until nothing changes."""
    kept = list(pairs)
    while True:
        ucount: dict[str, int] = {}
        icount: dict[str, int] = {}
        for u, i in kept:
            ucount[u] = ucount.get(u, 0) + 1
            icount[i] = icount.get(i, 0) + 1
        nxt = [(u, i) for u, i in kept
               if ucount[u] >= min_user_freq and icount[i] >= min_item_freq]
        if len(nxt) == len(kept):
            return kept
        kept = nxt


def index_interactions(pairs: Sequence[tuple[str, str]]) -> InteractionSet:
    user_ids = tuple(sorted({u for u, _ in pairs}))
    item_ids = tuple(sorted({i for _, i in pairs}))
    uix = {raw: k for k, raw in enumerate(user_ids)}
    iix = {raw: k for k, raw in enumerate(item_ids)}
    ui = np.array([(uix[u], iix[i]) for u, i in pairs], dtype=np.int64).reshape(-1, 2)
    order = np.lexsort((ui[:, 1], ui[:, 0]))
    ui = ui[order]
    return InteractionSet(ui[:, 0], ui[:, 1], user_ids, item_ids)


def load_interactions(path, min_user_freq: int = 0, min_item_freq: int = 0) -> InteractionSet:
    """Read ``user<TAB>item[<TAB>rating]`` lines as binary positive feedback.

    Rating values are discarded and repeated (user, item) pairs collapse to
    one record.
    """
    seen = set()
    pairs = []
    for _, f in read_tsv(path, 2, 3):
        key = (f[0], f[1])
        if key not in seen:
            seen.add(key)
            pairs.append(key)
    pairs = filter_interactions(pairs, min_user_freq, min_item_freq)
    if not pairs:
        raise DatasetExhausted(f"{path}: dataset exhausted after frequency filtering "
                               f"(min_user_freq={min_user_freq}, min_item_freq={min_item_freq})")
    s = index_interactions(pairs)
    log.info("loaded %d interactions, %d users, %d items", len(s), s.num_users, s.num_items)
    return s


def split_counts(n: int, ratios: Sequence[float] = (7, 1, 2)) -> tuple[int, int, int]:
    """Train/valid/test sizes for ``n`` records.

    Train and valid shares are floored; everything left goes to test, which
    therefore always holds at least one record.
    """
    a, b, c = (float(x) for x in ratios)
    if min(a, b, c) < 0 or a + b + c <= 0 or c <= 0:
        raise ValueError(f"bad split ratios {ratios!r}")
    total = a + b + c
    n_train = math.floor(n * a / total)
    n_valid = math.floor(n * b / total)
    return n_train, n_valid, n - n_train - n_valid


def split(s: InteractionSet, ratios: Sequence[float] = (7, 1, 2), seed: int = 0) -> InteractionSet:
    """Per-user random partition into train/valid/test."""
    rng = np.random.default_rng(seed)
    roles = np.empty(len(s), dtype=np.int8)
    bounds = np.searchsorted(s.users, np.arange(s.num_users + 1))
    for u in range(s.num_users):
        lo, hi = bounds[u], bounds[u + 1]
        n = hi - lo
        if n == 0:
            continue
        n_train, n_valid, _ = split_counts(n, ratios)
        perm = lo + rng.permutation(n)
        roles[perm[:n_train]] = TRAIN
        roles[perm[n_train:n_train + n_valid]] = VALID
        roles[perm[n_train + n_valid:]] = TEST
    return InteractionSet(s.users, s.items, s.user_ids, s.item_ids, roles)


@dataclass(frozen=True)
class TripleSet:
    heads: np.ndarray
    tails: np.ndarray
    relations: np.ndarray
    entity_ids: tuple[str, ...]
    relation_ids: tuple[str, ...]
    roles: np.ndarray | None = None

    def __post_init__(self):
        for name in ("heads", "tails", "relations"):
            object.__setattr__(self, name, _frozen(np.asarray(getattr(self, name), dtype=np.int64)))
        if self.roles is not None:
            object.__setattr__(self, "roles", _frozen(np.asarray(self.roles, dtype=np.int8)))

    @property
    def num_entities(self) -> int:
        return len(self.entity_ids)

    @property
    def num_relations(self) -> int:
        return len(self.relation_ids)

    def __len__(self) -> int:
        return len(self.heads)

    @cached_property
    def entity_index(self) -> dict[str, int]:
        return {raw: k for k, raw in enumerate(self.entity_ids)}

    @cached_property
    def relation_index(self) -> dict[str, int]:
        return {raw: k for k, raw in enumerate(self.relation_ids)}

    def array(self, *roles: int) -> np.ndarray:
        """``(n, 3)`` array of (head, tail, relation); all triples if no roles given."""
        t = np.stack([self.heads, self.tails, self.relations], axis=1)
        if not roles:
            return t
        if self.roles is None:
            raise DataError("triple set has not been split")
        return t[np.isin(self.roles, roles)]

    @cached_property
    def keys(self) -> np.ndarray:
        """Sorted int64 keys of every known triple, for membership tests."""
        return _frozen(np.unique(triple_keys(self.heads, self.tails, self.relations,
                                             self.num_entities, self.num_relations)))

    def contains(self, h, t, r) -> np.ndarray:
        k = triple_keys(h, t, r, self.num_entities, self.num_relations)
        pos = np.searchsorted(self.keys, k)
        pos = np.minimum(pos, len(self.keys) - 1)
        return self.keys[pos] == k


def triple_keys(h, t, r, num_entities: int, num_relations: int) -> np.ndarray:
    h = np.asarray(h, dtype=np.int64)
    t = np.asarray(t, dtype=np.int64)
    r = np.asarray(r, dtype=np.int64)
    return (h * num_entities + t) * num_relations + r


def load_triples(path) -> TripleSet:
    """Read ``head<TAB>tail<TAB>relation`` lines; duplicate facts are dropped."""
    seen = set()
    raw = []
    for _, f in read_tsv(path, 3, 3):
        key = (f[0], f[1], f[2])
        if key not in seen:
            seen.add(key)
            raw.append(key)
    if not raw:
        raise DatasetExhausted(f"{path}: no triples")
    entity_ids = tuple(sorted({h for h, _, _ in raw} | {t for _, t, _ in raw}))
    relation_ids = tuple(sorted({r for _, _, r in raw}))
    eix = {e: k for k, e in enumerate(entity_ids)}
    rix = {r: k for k, r in enumerate(relation_ids)}
    arr = np.array([(eix[h], eix[t], rix[r]) for h, t, r in raw], dtype=np.int64)
    order = np.lexsort((arr[:, 1], arr[:, 0], arr[:, 2]))
    arr = arr[order]
    ts = TripleSet(arr[:, 0], arr[:, 1], arr[:, 2], entity_ids, relation_ids)
    log.info("loaded %d triples, %d entities, %d relations",
             len(ts), ts.num_entities, ts.num_relations)
    return ts


def split_triples(ts: TripleSet, ratios: Sequence[float] = (7, 1, 2), seed: int = 0) -> TripleSet:
    """Global random train/valid/test partition of the facts."""
    rng = np.random.default_rng(seed)
    n_train, n_valid, _ = split_counts(len(ts), ratios)
    roles = np.full(len(ts), TEST, dtype=np.int8)
    perm = rng.permutation(len(ts))
    roles[perm[:n_train]] = TRAIN
    roles[perm[n_train:n_train + n_valid]] = VALID
    return TripleSet(ts.heads, ts.tails, ts.relations, ts.entity_ids, ts.relation_ids, roles)


@dataclass(frozen=True)
class AlignmentMap:
    items: np.ndarray
    entities: np.ndarray
    dropped: int = 0
    rejected: int = 0

    def __post_init__(self):
        object.__setattr__(self, "items", _frozen(np.asarray(self.items, dtype=np.int64)))
        object.__setattr__(self, "entities", _frozen(np.asarray(self.entities, dtype=np.int64)))
        if len(np.unique(self.items)) != len(self.items):
            raise DataError("alignment maps an item twice")
        if len(np.unique(self.entities)) != len(self.entities):
            raise DataError("alignment maps an entity twice")

    def __len__(self) -> int:
        return len(self.items)

    def item_entity(self, num_items: int) -> np.ndarray:
        """Entity index per item, ``-1`` where unaligned."""
        out = np.full(num_items, -1, dtype=np.int64)
        out[self.items] = self.entities
        return out

    def coverage(self, num_items: int) -> float:
        return len(self) / num_items if num_items else 0.0


def load_alignments(path, items: InteractionSet, entities: TripleSet) -> AlignmentMap:
    """Read ``item<TAB>entity`` lines into a one-to-one partial map.

    Lines whose item or entity did not survive loading are dropped; lines that
    would map an already-mapped item or entity are rejected. Both are counted.
    """
    item_seen: set[str] = set()
    ent_seen: set[str] = set()
    pairs = []
    dropped = rejected = 0
    for _, f in read_tsv(path, 2, 2):
        raw_item, raw_ent = f
        if raw_item in item_seen or raw_ent in ent_seen:
            rejected += 1
            continue
        item_seen.add(raw_item)
        ent_seen.add(raw_ent)
        i = items.item_index.get(raw_item)
        e = entities.entity_index.get(raw_ent)
        if i is None or e is None:
            dropped += 1
            continue
        pairs.append((i, e))
    if dropped:
        log.warning("%s: dropped %d alignments to filtered items/entities", path, dropped)
    if rejected:
        log.warning("%s: rejected %d duplicate alignment lines", path, rejected)
    pairs.sort()
    arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    return AlignmentMap(arr[:, 0], arr[:, 1], dropped, rejected)


@dataclass(frozen=True)
class RelationProfile:
    tails_per_head: np.ndarray
    heads_per_tail: np.ndarray
    categories: tuple[str, ...]
    cutoff: float = 1.5

    def category_of(self, relations) -> np.ndarray:
        cats = np.array(self.categories, dtype=object)
        return cats[np.asarray(relations)]


def categorize(tph: float, hpt: float, cutoff: float = 1.5) -> str:
    if tph < cutoff and hpt < cutoff:
        return "1-1"
    if hpt < cutoff:
        return "1-N"
    if tph < cutoff:
        return "N-1"
    return "N-N"


def relation_categories(ts: TripleSet, cutoff: float = 1.5) -> RelationProfile:
    """Mean tails per head and heads per tail for each relation, plus its category."""
    if len(ts) == 0:
        raise DataError("relation categories need a non-empty triple set")
    hrt = np.unique(ts.array(), axis=0)
    h, t, r = hrt[:, 0], hrt[:, 1], hrt[:, 2]
    tph = np.zeros(ts.num_relations)
    hpt = np.zeros(ts.num_relations)
    for rel in range(ts.num_relations):
        m = r == rel
        if not m.any():
            continue
        tph[rel] = m.sum() / len(np.unique(h[m]))
        hpt[rel] = m.sum() / len(np.unique(t[m]))
    cats = tuple(categorize(a, b, cutoff) if a > 0 else "N-N" for a, b in zip(tph, hpt))
    return RelationProfile(_frozen(tph), _frozen(hpt), cats, cutoff)


@dataclass(frozen=True)
class SparsityBuckets:
    groups: tuple[np.ndarray, ...]
    train_counts: np.ndarray

    @property
    def mean_ratings(self) -> list[float]:
        return [float(self.train_counts[g].mean()) for g in self.groups]

    @property
    def total_ratings(self) -> list[int]:
        return [int(self.train_counts[g].sum()) for g in self.groups]


def _pack(counts: np.ndarray, k: int, cap: int) -> list[int] | None:
    """Left-to-right packing under ``cap`` into exactly ``k`` non-empty groups."""
    starts = [0]
    acc = 0
    n = len(counts)
    for j, c in enumerate(counts):
        groups_left = k - len(starts)
        if j > starts[-1] and (acc + c > cap or n - j == groups_left):
            if groups_left == 0:
                return None
            starts.append(j)
            acc = 0
        acc += c
        if acc > cap:
            return None
    return starts if len(starts) == k else None


def balanced_partition(counts: Sequence[int], k: int) -> list[int]:
    """Start offsets of ``k`` contiguous groups minimizing the largest group sum."""
    counts = np.asarray(counts, dtype=np.int64)
    lo, hi = int(counts.max()), int(counts.sum())
    while lo < hi:
        mid = (lo + hi) // 2
        if _pack(counts, k, mid) is not None:
            hi = mid
        else:
            lo = mid + 1
    starts = _pack(counts, k, lo)
    assert starts is not None
    return starts


def sparsity_buckets(s: InteractionSet, num_buckets: int = 10) -> SparsityBuckets:
    """Group users, sorted by train-record count, into buckets of balanced rating totals.

    Group 0 holds the sparsest users.
    """
    counts = np.bincount(s.users[s.select(TRAIN)], minlength=s.num_users)
    order = np.argsort(counts, kind="stable")
    k = num_buckets
    if s.num_users < k:
        log.warning("only %d users for %d buckets", s.num_users, k)
        k = s.num_users
    starts = balanced_partition(counts[order], k) + [s.num_users]
    groups = tuple(_frozen(np.sort(order[starts[g]:starts[g + 1]])) for g in range(k))
    return SparsityBuckets(groups, _frozen(counts))


@dataclass(frozen=True)
class Corpus:
    """Everything the trainer and evaluator need, immutable after loading."""
    interactions: InteractionSet | None = None
    triples: TripleSet | None = None
    alignments: AlignmentMap | None = None
    meta: dict = field(default_factory=dict)

    @cached_property
    def item_entity(self) -> np.ndarray | None:
        if self.interactions is None:
            return None
        if self.alignments is None:
            return np.full(self.interactions.num_items, -1, dtype=np.int64)
        return _frozen(self.alignments.item_entity(self.interactions.num_items))

    @cached_property
    def profile(self) -> RelationProfile | None:
        if self.triples is None:
            return None
        return relation_categories(self.triples, self.meta.get("category_cutoff", 1.5))


def load_corpus(ratings=None, triples=None, alignments=None, *, min_user_freq: int = 0,
                min_item_freq: int = 0, ratios: Sequence[float] = (7, 1, 2), seed: int = 0,
                category_cutoff: float = 1.5) -> Corpus:
    inter = ts = amap = None
    if ratings is not None:
        inter = split(load_interactions(ratings, min_user_freq, min_item_freq), ratios, seed)
    if triples is not None:
        ts = split_triples(load_triples(triples), ratios, seed)
    if alignments is not None:
        if inter is None or ts is None:
            raise DataError("alignments need both interactions and triples")
        amap = load_alignments(alignments, inter, ts)
    return Corpus(inter, ts, amap, {"category_cutoff": category_cutoff})


def corpus_stats(c: Corpus) -> dict:
    out: dict = {}
    if c.interactions is not None:
        s = c.interactions
        out.update(users=s.num_users, items=s.num_items, ratings=len(s),
                   avg_ratings=len(s) / s.num_users,
                   sparsity=1.0 - len(s) / (s.num_users * s.num_items))
        if s.roles is not None:
            out.update({f"{n}_ratings": int((s.roles == k).sum()) for k, n in enumerate(ROLE_NAMES)})
    if c.triples is not None:
        out.update(entities=c.triples.num_entities, relations=c.triples.num_relations,
                   triples=len(c.triples))
    if c.alignments is not None:
        out.update(alignments=len(c.alignments),
                   coverage=c.alignments.coverage(c.interactions.num_items),
                   alignments_dropped=c.alignments.dropped,
                   alignments_rejected=c.alignments.rejected)
    return out


def write_preprocessed(c: Corpus, out_dir) -> Path:
    """Write split TSVs in dense ids plus ``index.json`` mapping raw to dense ids.

    Files: ``train.tsv``, ``valid.tsv``, ``test.tsv`` (user, item); when a KG is
    present also ``kg_train.tsv``, ``kg_valid.tsv``, ``kg_test.tsv`` (head, tail,
    relation) and ``alignments.tsv`` (item, entity).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index: dict = {"format": "ktup-preprocessed/1", "stats": corpus_stats(c)}
    if c.interactions is not None:
        s = c.interactions
        for k, name in enumerate(ROLE_NAMES):
            np.savetxt(out / f"{name}.tsv", s.pairs(k), fmt="%d", delimiter="\t")
        index["users"] = list(s.user_ids)
        index["items"] = list(s.item_ids)
    if c.triples is not None:
        ts = c.triples
        for k, name in enumerate(ROLE_NAMES):
            np.savetxt(out / f"kg_{name}.tsv", ts.array(k), fmt="%d", delimiter="\t")
        index["entities"] = list(ts.entity_ids)
        index["relations"] = list(ts.relation_ids)
        index["relation_categories"] = dict(zip(ts.relation_ids, c.profile.categories))
    if c.alignments is not None:
        np.savetxt(out / "alignments.tsv",
                   np.stack([c.alignments.items, c.alignments.entities], axis=1),
                   fmt="%d", delimiter="\t")
    (out / "index.json").write_text(json.dumps(index, indent=1, ensure_ascii=False) + "\n",
                                    encoding="utf-8")
    return out
