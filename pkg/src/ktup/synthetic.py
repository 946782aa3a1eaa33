"""Planted benchmark: user groups whose items share one neighbor through one relation.

Every item is aligned to an entity and has one attribute entity per relation,
linked attribute -> item (e.g. director -> directedBy -> movie) unless
``item_is_head``.
For relation ``g`` a pool of items shares attribute value 0 (the planted
neighbor); the other items draw values 1..k-1. Users of group ``g`` only
consume items from pool ``g``; every item outside the pools is consumed
once by a random user so the whole catalog survives loading.
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass
from pathlib import Path

import numpy as np

RELATION_NAMES = ("directedBy", "starring", "genre", "writtenBy", "producedBy", "basedOn")


@dataclass(frozen=True)
class Planted:
    ratings: Path
    triples: Path
    alignments: Path
    group_of_user: dict[str, int]
    relation_of_group: dict[int, str]


def write_planted(out_dir, *, num_groups: int = 3, users_per_group: int = 20,
                  num_items: int = 300, pool_size: int = 30, picks: int = 20,
                  values_per_relation: int = 10, item_is_head: bool = False,
                  all_relations: bool = False, seed: int = 0) -> Planted:
    if num_groups > len(RELATION_NAMES):
        raise ValueError("too many groups for the relation name table")
    if num_groups * pool_size > num_items or picks > pool_size:
        raise ValueError("pools do not fit in the catalog")
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rels = RELATION_NAMES[:num_groups]
    items = [f"i{k:04d}" for k in range(num_items)]
    perm = rng.permutation(num_items)
    pools = [perm[g * pool_size:(g + 1) * pool_size] for g in range(num_groups)]

    # one attribute relation per item unless all_relations
    own = rng.integers(num_groups, size=num_items)
    for g in range(num_groups):
        own[pools[g]] = g
    triples = []
    for g, rel in enumerate(rels):
        value = rng.integers(1, values_per_relation, size=num_items)
        value[pools[g]] = 0
        for k in range(num_items):
            if not all_relations and own[k] != g:
                continue
            pair = (f"{rel}:{value[k]}", f"item:{items[k]}")
            triples.append((*(pair[::-1] if item_is_head else pair), rel))

    ratings = []
    group_of_user = {}
    users = []
    for g in range(num_groups):
        for j in range(users_per_group):
            user = f"u{g}_{j:03d}"
            group_of_user[user] = g
            users.append(user)
            for k in rng.choice(pools[g], size=picks, replace=False):
                ratings.append((user, items[k]))
    for k in perm[num_groups * pool_size:]:
        ratings.append((users[rng.integers(len(users))], items[k]))

    paths = Planted(out / "ratings.tsv", out / "triples.tsv", out / "alignments.tsv",
                    group_of_user, dict(enumerate(rels)))
    paths.ratings.write_text("".join(f"{u}\t{i}\t5\n" for u, i in ratings), encoding="utf-8")
    paths.triples.write_text("".join(f"{h}\t{t}\t{r}\n" for h, t, r in triples), encoding="utf-8")
    paths.alignments.write_text("".join(f"{i}\titem:{i}\n" for i in items), encoding="utf-8")
    return paths


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description="write the planted synthetic dataset")
    ap.add_argument("out_dir")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    p = write_planted(args.out_dir, seed=args.seed)
    print(p.ratings, p.triples, p.alignments)


if __name__ == "__main__":
    main()
