"""Name induced preferences after KG relations and justify recommendations.

A user's preference profile is the unweighted mean of the soft attention
over their train items. With one preference per relation, weight ``k``
reads as "how much relation ``k`` drives this user". A recommended item is
supported by a history item when some entity is adjacent to both aligned
entities through one of the top relations, in either direction.
"""

from __future__ import annotations

import warnings
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import Corpus
from .embeddings import EmbeddingSpace
from .errors import ConfigError, DataError
from .evaluator import recommend
from .rec import RecConfig, RecScorer


@dataclass
class Rationale:
    user: str
    item: str
    distance: float
    preferences: list[tuple[str, float]]
    # (history item, its entity, shared neighbor, relation)
    support: list[tuple[str, str, str, str]] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["preferences"] = [{"relation": n, "weight": w} for n, w in self.preferences]
        d["support"] = [{"history_item": h, "entity": e, "neighbor": x, "relation": r}
                        for h, e, x, r in self.support]
        return d


def preference_names(space: EmbeddingSpace, corpus: Corpus) -> list[str]:
    """Relation names when preferences map onto relations, else ``pref_k``."""
    k = space.P.shape[0]
    ts = corpus.triples
    if ts is not None and ts.num_relations == k and space.R.shape[0] == k:
        return [str(r) for r in ts.relation_ids]
    warnings.warn("preferences are not tied to KG relations; using anonymous ids",
                  stacklevel=2)
    return [f"pref_{j}" for j in range(k)]


def preference_profile(space: EmbeddingSpace, corpus: Corpus, config: RecConfig,
                       user: int) -> np.ndarray:
    """Mean soft attention over the user's train items."""
    hist = corpus.interactions.train_items[user]
    if len(hist) == 0:
        raise DataError(f"no train interactions for user {corpus.interactions.user_ids[user]}")
    alpha = RecScorer(space, config, corpus.item_entity).attention(user, hist)
    return alpha.astype(np.float64).mean(axis=0)


def _neighbors(corpus: Corpus, relations) -> dict[int, dict[int, set[int]]]:
    wanted = set(int(r) for r in relations)
    adj: dict[int, dict[int, set[int]]] = {r: defaultdict(set) for r in wanted}
    for h, t, r in corpus.triples.array().tolist():
        if r in wanted:
            adj[r][h].add(t)
            adj[r][t].add(h)
    return adj


def explain_user(user: int, space: EmbeddingSpace, corpus: Corpus, config: RecConfig,
                 top_k_prefs: int = 3, top_n_items: int = 10,
                 max_support: int = 5) -> list[Rationale]:
    """Rationales for the user's top ``top_n_items`` recommendations.

    Items come out in the same order ``eval_rec`` ranks them.
    """
    if config.model == "bprmf":
        raise ConfigError("explain needs a preference model (tup or ktup)")
    s = corpus.interactions
    names = preference_names(space, corpus)
    profile = preference_profile(space, corpus, config, user)
    order = np.argsort(-profile, kind="stable")[:top_k_prefs]
    prefs = [(names[k], float(profile[k])) for k in order]

    items, dist = recommend(space, corpus, config, user, top_n_items)
    ie = corpus.item_entity
    named = ie is not None and not names[0].startswith("pref_")
    adj = _neighbors(corpus, order) if named else {}
    ent_ids = corpus.triples.entity_ids if named else None
    hist = s.train_items[user]

    out = []
    for i, d in zip(items.tolist(), dist.tolist()):
        support = []
        e_rec = ie[i] if ie is not None else -1
        for r in order.tolist() if e_rec >= 0 else []:
            near = adj[r].get(e_rec, set())
            for h in hist.tolist():
                e_h = ie[h]
                if e_h < 0 or len(support) >= max_support:
                    continue
                shared = sorted(near & adj[r].get(e_h, set()))
                if shared:
                    support.append((str(s.item_ids[h]), str(ent_ids[e_h]),
                                    str(ent_ids[shared[0]]), names[r]))
        out.append(Rationale(str(s.user_ids[user]), str(s.item_ids[i]), float(d), prefs, support))
    return out


def top_preference_rate(space: EmbeddingSpace, corpus: Corpus, config: RecConfig,
                        expected: dict[str, str]) -> float:
    """Fraction of users whose strongest preference is the expected relation name."""
    names = preference_names(space, corpus)
    s = corpus.interactions
    hits = [names[int(np.argmax(preference_profile(space, corpus, config, s.user_index[u])))] == rel
            for u, rel in expected.items() if u in s.user_index]
    return float(np.mean(hits)) if hits else float("nan")
