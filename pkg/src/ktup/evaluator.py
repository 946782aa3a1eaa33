"""Top-N recommendation metrics and raw/filtered entity ranking.

Ties in any ranking are broken by ascending item or entity index. Per-query
values are reduced with ``math.fsum`` so the result does not depend on the
order in which parallel workers finish.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .corpus import (CATEGORIES, TEST, TRAIN, VALID, Corpus, SparsityBuckets, TripleSet,
                     relation_categories)
from .embeddings import EmbeddingSpace
from .kgc import KgcConfig
from .rec import RecConfig, RecScorer

REC_METRICS = ("precision", "recall", "f1", "hit", "ndcg")


def topn_metrics(top, relevant, n: int) -> tuple[float, float, float, float, float]:
    """Precision, recall, F1, hit and binary-gain NDCG of one ranked list."""
    relevant = set(int(x) for x in relevant)
    gains = [1.0 if int(x) in relevant else 0.0 for x in top[:n]]
    hits = sum(gains)
    if hits == 0:
        return 0.0, 0.0, 0.0, 0.0, 0.0
    precision = hits / n
    recall = hits / len(relevant)
    f1 = 2 * precision * recall / (precision + recall)
    dcg = sum(g / math.log2(k + 2) for k, g in enumerate(gains))
    idcg = sum(1.0 / math.log2(k + 2) for k in range(min(len(relevant), n)))
    return precision, recall, f1, 1.0, dcg / idcg


def rank_candidates(dist: np.ndarray, exclude: np.ndarray) -> np.ndarray:
    """Candidate indices sorted by ascending distance, ties by index."""
    mask = np.ones(len(dist), dtype=bool)
    mask[exclude] = False
    cand = np.flatnonzero(mask)
    return cand[np.argsort(dist[cand], kind="stable")]


def _pmap(fn, chunks, threads: int):
    if threads <= 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(threads) as ex:
        return list(ex.map(fn, chunks))


def _chunks(seq, k):
    seq = list(seq)
    size = max(1, math.ceil(len(seq) / max(k, 1)))
    return [seq[j:j + size] for j in range(0, len(seq), size)]


@dataclass
class RecResult:
    n: int
    users: np.ndarray
    per_user: np.ndarray
    ranks: dict = field(default_factory=dict)

    def means(self) -> dict[str, float]:
        if len(self.users) == 0:
            return {f"{m}@{self.n}": 0.0 for m in REC_METRICS}
        return {f"{m}@{self.n}": math.fsum(self.per_user[:, k]) / len(self.users)
                for k, m in enumerate(REC_METRICS)}


def _known_roles(role: int) -> tuple[int, ...]:
    return (TRAIN,) if role == VALID else (TRAIN, VALID)


def eval_rec(space: EmbeddingSpace, corpus: Corpus, config: RecConfig, n: int = 10,
             role: int = TEST, users=None, threads: int = 1, keep_ranks: bool = False) -> RecResult:
    """Rank every non-positive item for each user holding ``role`` records.

    Candidates exclude the user's train positives, and also validation
    positives when scoring the test split.
    """
    s = corpus.interactions
    relevant = s.items_by_user(role)
    known = s.items_by_user(*_known_roles(role))
    if users is None:
        users = np.arange(s.num_users)
    users = np.array([u for u in users if len(relevant[u])], dtype=np.int64)
    scorer = RecScorer(space, config, corpus.item_entity)

    def work(chunk):
        out = []
        for u in chunk:
            order = rank_candidates(scorer.distances(u), known[u])
            vals = topn_metrics(order[:n], relevant[u], n)
            ranks = None
            if keep_ranks:
                pos = np.empty(len(space.I), dtype=np.int64)
                pos[order] = np.arange(1, len(order) + 1)
                ranks = {int(i): int(pos[i]) for i in relevant[u]}
            out.append((u, vals, ranks))
        return out

    rows = [r for part in _pmap(work, _chunks(users, threads), threads) for r in part]
    per_user = np.array([r[1] for r in rows], dtype=np.float64).reshape(-1, len(REC_METRICS))
    ranks = {int(r[0]): r[2] for r in rows} if keep_ranks else {}
    return RecResult(n, users, per_user, ranks)


def recommend(space: EmbeddingSpace, corpus: Corpus, config: RecConfig, user: int,
              n: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Top ``n`` items not among the user's train or validation positives."""
    s = corpus.interactions
    known = s.items_by_user(TRAIN, VALID)[user]
    dist = RecScorer(space, config, corpus.item_entity).distances(user)
    order = rank_candidates(dist, known)[:n]
    return order, dist[order]


def eval_by_sparsity(space: EmbeddingSpace, corpus: Corpus, config: RecConfig,
                     buckets: SparsityBuckets, n: int = 10, threads: int = 1) -> list[dict]:
    out = []
    for g, members in enumerate(buckets.groups):
        res = eval_rec(space, corpus, config, n, TEST, members, threads)
        row = {"group": g, "users": int(len(members)), "evaluated_users": int(len(res.users)),
               "mean_ratings": buckets.mean_ratings[g]}
        row.update(res.means())
        out.append(row)
    return out


def entity_scores(space: EmbeddingSpace, config: KgcConfig, r: int, anchor: np.ndarray,
                  predict_head: bool) -> np.ndarray:
    """Energies of every entity filling the missing slot, one row per anchor."""
    E = space.E
    if config.variant == "transH":
        w = space.WR[r]
        Ep = E - np.outer(E @ w, w)
        A = E[anchor]
        Ap = A - np.outer(A @ w, w)
    else:
        Ep = E
        Ap = E[anchor]
    rv = space.R[r]
    if predict_head:
        x = Ep[None, :, :] + (rv - Ap)[:, None, :]
    else:
        x = (Ap + rv)[:, None, :] - Ep[None, :, :]
    return np.abs(x).sum(axis=-1)


def _rank(scores: np.ndarray, gold: int, filt: np.ndarray) -> tuple[int, int]:
    sg = scores[gold]
    idx = np.arange(len(scores))
    before = (scores < sg) | ((scores == sg) & (idx < gold))
    raw = 1 + int(before.sum())
    filt = filt[filt != gold]
    return raw, raw - int(before[filt].sum())


@dataclass
class KgcResult:
    triples: np.ndarray
    # columns: head raw, head filtered, tail raw, tail filtered
    ranks: np.ndarray
    categories: np.ndarray

    def metrics(self, k: int = 10) -> dict:
        out = {}
        sides = (("head", 0), ("tail", 2))
        for name, off in sides:
            for kind, col in (("raw", off), ("filtered", off + 1)):
                r = self.ranks[:, col]
                out[f"{name}_{kind}_hit@{k}"] = _mean(r <= k)
                out[f"{name}_{kind}_mean_rank"] = _mean(r)
        for kind, cols in (("raw", [0, 2]), ("filtered", [1, 3])):
            r = self.ranks[:, cols]
            out[f"{kind}_hit@{k}"] = _mean((r <= k).ravel())
            out[f"{kind}_mean_rank"] = _mean(r.ravel())
        return out

    def by_category(self, k: int = 10, kind: str = "filtered") -> dict:
        off = 1 if kind == "filtered" else 0
        table = {}
        for cat in CATEGORIES:
            m = self.categories == cat
            row = {"count": int(m.sum())}
            for name, col in (("head", off), ("tail", 2 + off)):
                r = self.ranks[m, col]
                row[f"{name}_hit@{k}"] = _mean(r <= k) if m.any() else float("nan")
                row[f"{name}_mean_rank"] = _mean(r) if m.any() else float("nan")
            table[cat] = row
        return table


def _mean(a) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    return math.fsum(a) / len(a) if len(a) else float("nan")


def _truth_index(triples: np.ndarray):
    heads: dict[tuple[int, int], list[int]] = {}
    tails: dict[tuple[int, int], list[int]] = {}
    for h, t, r in triples.tolist():
        heads.setdefault((t, r), []).append(h)
        tails.setdefault((h, r), []).append(t)
    return ({k: np.array(v) for k, v in heads.items()},
            {k: np.array(v) for k, v in tails.items()})


def eval_kgc(space: EmbeddingSpace, triples: TripleSet, config: KgcConfig = KgcConfig(),
             role: int = TEST, sample: int | None = None, seed: int = 0, threads: int = 1,
             categories=None) -> KgcResult:
    """Rank all entities for the head and tail slot of every ``role`` triple.

    Filtered ranks ignore candidates that form any known triple in the set.
    ``sample`` evaluates a seeded subset of the split.
    """
    test = triples.array(role)
    if sample is not None and 0 < sample < len(test):
        pick = np.sort(np.random.default_rng(seed).choice(len(test), sample, replace=False))
        test = test[pick]
    true_heads, true_tails = _truth_index(triples.array())
    if categories is None:
        categories = relation_categories(triples).categories
    ranks = np.zeros((len(test), 4), dtype=np.int64)
    empty = np.zeros(0, dtype=np.int64)

    # bound the (chunk, entities, dim) intermediate to a few million floats
    chunk = max(1, 4_000_000 // max(1, space.E.size))

    def work(rels):
        for r in rels:
            rows = np.flatnonzero(test[:, 2] == r)
            for lo in range(0, len(rows), chunk):
                j = rows[lo:lo + chunk]
                h, t = test[j, 0], test[j, 1]
                sh = entity_scores(space, config, r, t, predict_head=True)
                st = entity_scores(space, config, r, h, predict_head=False)
                for k, row in enumerate(j):
                    ranks[row, 0:2] = _rank(sh[k], h[k], true_heads.get((t[k], r), empty))
                    ranks[row, 2:4] = _rank(st[k], t[k], true_tails.get((h[k], r), empty))

    rels = np.unique(test[:, 2]).tolist()
    _pmap(work, _chunks(rels, threads), threads)
    cats = np.array([categories[r] for r in test[:, 2]], dtype=object)
    return KgcResult(test, ranks, cats)


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


@dataclass
class RankingReport:
    n: int = 10
    kg_n: int = 10
    rec: dict | None = None
    kgc: dict | None = None
    kgc_categories: dict | None = None
    sparsity: list | None = None

    def records(self):
        if self.rec is not None:
            yield {"task": "rec", **self.rec}
        if self.kgc is not None:
            yield {"task": "kgc", **self.kgc}
        for cat, row in (self.kgc_categories or {}).items():
            yield {"task": "kgc_category", "category": cat, **row}
        for row in self.sparsity or []:
            yield {"task": "rec_sparsity", **row}

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records())

    def table(self) -> str:
        lines = []
        if self.rec is not None:
            lines.append("recommendation  " + "  ".join(f"{k}={_fmt(v)}" for k, v in self.rec.items()))
        if self.kgc is not None:
            lines.append("kg completion")
            for k, v in self.kgc.items():
                lines.append(f"  {k:<28} {_fmt(v)}")
        if self.kgc_categories:
            k = self.kg_n
            lines.append(f"  {'category':<8} {'n':>6} {'head_hit@' + str(k):>12} "
                         f"{'tail_hit@' + str(k):>12}")
            for cat, row in self.kgc_categories.items():
                lines.append(f"  {cat:<8} {row['count']:>6} {row[f'head_hit@{k}']:>12.4f} "
                             f"{row[f'tail_hit@{k}']:>12.4f}")
        if self.sparsity:
            lines.append(f"  {'group':>5} {'users':>6} {'mean_ratings':>12} {'f1@' + str(self.n):>8}")
            for row in self.sparsity:
                lines.append(f"  {row['group']:>5} {row['users']:>6} {row['mean_ratings']:>12.1f} "
                             f"{row[f'f1@{self.n}']:>8.4f}")
        return "\n".join(lines)
