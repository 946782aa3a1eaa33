"""``ktup`` command line: preprocess, train, eval, recommend, complete, explain.

Every option can also come from the environment as ``KTUP_<OPTION>``, e.g.
``KTUP_SEED=3`` or ``KTUP_THREADS=4``; command-line values win. Failures
print one JSON line on stderr and exit 2 (config), 3 (data) or 4 (numeric).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .corpus import TEST, TRAIN, VALID, corpus_stats, load_corpus, sparsity_buckets, write_preprocessed
from .embeddings import load_space, save_space
from .errors import ConfigError, DataError, KtupError
from .evaluator import RankingReport, entity_scores, eval_by_sparsity, eval_kgc, eval_rec, recommend
from .explain import explain_user
from .trainer import MODES, KG_MODES, REC_MODES, TrainConfig, Trainer, transfer, validation_metric

log = logging.getLogger("ktup")

MANIFEST = "run-manifest.json"
MODEL = "model.bin"
EPOCHS = "epochs.jsonl"
ENV_PREFIX = "KTUP_"
ROLES = {"train": TRAIN, "valid": VALID, "test": TEST}


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _ratios(text: str) -> tuple[float, ...]:
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad ratios {text!r}") from None
    if len(parts) != 3 or min(parts) < 0 or sum(parts) <= 0:
        raise argparse.ArgumentTypeError("ratios need three non-negative numbers, e.g. 7,1,2")
    return parts


def _data_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--ratings", help="user<TAB>item[<TAB>rating] file")
    g.add_argument("--triples", help="head<TAB>tail<TAB>relation file")
    g.add_argument("--alignments", help="item<TAB>entity file")
    g.add_argument("--min-user-freq", type=int, default=0)
    g.add_argument("--min-item-freq", type=int, default=0)
    g.add_argument("--ratios", type=_ratios, default=(7.0, 1.0, 2.0),
                   help="train,valid,test split ratios (default 7,1,2)")
    g.add_argument("--category-cutoff", type=float, default=1.5,
                   help="tph/hpt threshold separating 1 from N")
    g.add_argument("--seed", type=int, default=0)


def _train_args(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    g = p.add_argument_group("model")
    g.add_argument("--model", choices=MODES, default=d.mode)
    g.add_argument("--lam", type=float, help="weight of the recommendation loss")
    g.add_argument("--dim", type=int, default=d.dim)
    g.add_argument("--batch-size", type=int, default=d.batch_size)
    g.add_argument("--lr", type=float)
    g.add_argument("--l2", type=float)
    g.add_argument("--optimizer", choices=("sgd", "adagrad", "adam"))
    g.add_argument("--max-epochs", type=int, default=d.max_epochs)
    g.add_argument("--patience", type=int, default=d.patience)
    g.add_argument("--eval-every", type=int, default=d.eval_every)
    g.add_argument("--margin", type=float, default=d.margin)
    g.add_argument("--induction", choices=("soft", "hard"), default=d.induction)
    g.add_argument("--tau", type=float, default=d.tau)
    g.add_argument("--noise", choices=("uniform", "normal"), default=d.noise)
    g.add_argument("--num-prefs", type=int, help="preference count (tup only)")
    g.add_argument("--no-constraints", action="store_true",
                   help="skip norm clipping and projection renormalization")
    g.add_argument("--bern", action="store_true", help="Bernoulli head/tail corruption")
    g.add_argument("--topn", type=int, default=d.topn)
    g.add_argument("--val-kg-sample", type=int, default=d.val_kg_sample,
                   help="validation triples scored per check (0 = all)")
    p.add_argument("--init-from", action="append", default=[], metavar="MODEL",
                   help="copy matching blocks from a saved model (repeatable)")
    p.add_argument("--from-manifest", help="rerun with the data and config of a manifest")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--log", help="per-epoch JSON log (default RUN/epochs.jsonl)")


def _run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--run", required=True, help="run directory written by train")
    p.add_argument("--json", action="store_true", help="emit JSON lines")


def build_parser() -> Parser:
    ap = Parser(prog="ktup", description="Joint item recommendation and knowledge graph completion.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("preprocess", help="filter, index and split raw files")
    _data_args(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model and write a run directory")
    _data_args(p)
    _train_args(p)

    p = sub.add_parser("eval", help="score a run on held-out data")
    _run_args(p)
    p.add_argument("--role", choices=tuple(ROLES), default="test")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--kg-sample", type=int, default=0, help="score a subset of triples (0 = all)")
    p.add_argument("--buckets", type=int, default=0, help="sparsity groups to report (0 = none)")
    p.add_argument("--dump-ranks", help="write per-query ranks here as JSON lines")

    p = sub.add_parser("recommend", help="top items for one user")
    _run_args(p)
    p.add_argument("--user", required=True)
    p.add_argument("--n", type=int, default=10)

    p = sub.add_parser("complete", help="rank entities for a missing head or tail")
    _run_args(p)
    p.add_argument("--relation", required=True)
    side = p.add_mutually_exclusive_group(required=True)
    side.add_argument("--head", help="known head; predict tails")
    side.add_argument("--tail", help="known tail; predict heads")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--filtered", action="store_true", help="drop answers already in the KG")

    p = sub.add_parser("explain", help="preferences and KG evidence behind recommendations")
    _run_args(p)
    p.add_argument("--user", required=True)
    p.add_argument("--top-k", type=int, default=3, help="preferences to name")
    p.add_argument("--n", type=int, default=10, help="items to explain")
    return ap


def _apply_env(parser: argparse.ArgumentParser, env) -> None:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for child in action.choices.values():
                _apply_env(child, env)
            continue
        if not action.option_strings or action.dest in ("help", "version"):
            continue
        raw = env.get(ENV_PREFIX + action.dest.upper())
        if raw is None:
            continue
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            val = raw.strip().lower() in ("1", "true", "yes", "on")
            if isinstance(action, argparse._StoreFalseAction):
                val = not val
        elif isinstance(action, argparse._AppendAction):
            val = [x for x in raw.split(os.pathsep) if x]
        else:
            try:
                val = action.type(raw) if action.type else raw
            except (ValueError, argparse.ArgumentTypeError) as e:
                raise ConfigError(f"{ENV_PREFIX}{action.dest.upper()}: {e}") from None
            if action.choices is not None and val not in action.choices:
                raise ConfigError(f"{ENV_PREFIX}{action.dest.upper()}={raw!r} not in "
                                  f"{sorted(action.choices)}")
        action.default = val
        action.required = False


def _data_spec(args) -> dict:
    def path(p):
        return str(Path(p).resolve()) if p else None
    return {"ratings": path(args.ratings), "triples": path(args.triples),
            "alignments": path(args.alignments), "min_user_freq": args.min_user_freq,
            "min_item_freq": args.min_item_freq, "ratios": list(args.ratios),
            "seed": args.seed, "category_cutoff": args.category_cutoff}


def _load(spec: dict):
    for key in ("ratings", "triples", "alignments"):
        if spec[key] and not Path(spec[key]).is_file():
            raise DataError(f"{key} file not found: {spec[key]}")
    if not (spec["ratings"] or spec["triples"]):
        raise ConfigError("give --ratings and/or --triples")
    t0 = time.perf_counter()
    c = load_corpus(spec["ratings"], spec["triples"], spec["alignments"],
                    min_user_freq=spec["min_user_freq"], min_item_freq=spec["min_item_freq"],
                    ratios=tuple(spec["ratios"]), seed=spec["seed"],
                    category_cutoff=spec["category_cutoff"])
    log.info("loaded corpus in %.2fs: %s", time.perf_counter() - t0, corpus_stats(c))
    return c


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        mode=args.model, lam=args.lam, batch_size=args.batch_size, lr=args.lr, l2=args.l2,
        optimizer=args.optimizer, max_epochs=args.max_epochs, patience=args.patience,
        eval_every=args.eval_every, dim=args.dim, margin=args.margin,
        induction=args.induction, tau=args.tau, noise=args.noise, num_prefs=args.num_prefs,
        constraints=not args.no_constraints, bern=args.bern, topn=args.topn,
        val_kg_sample=args.val_kg_sample, seed=args.seed)


def _check_inputs(spec: dict, cfg: TrainConfig) -> None:
    """Flag combinations that cannot work, before any file is read."""
    if cfg.mode in REC_MODES and not spec["ratings"]:
        raise ConfigError(f"--model {cfg.mode} requires --ratings")
    if cfg.mode in KG_MODES and not spec["triples"]:
        raise ConfigError(f"--model {cfg.mode} requires --triples")
    if cfg.mode == "ktup" and not spec["alignments"]:
        raise ConfigError("--model ktup requires --alignments")
    if cfg.mode == "tup" and not cfg.num_prefs:
        raise ConfigError("--model tup requires --num-prefs")
    cfg.resolved().validate()


def cmd_preprocess(args) -> int:
    c = _load(_data_spec(args))
    out = write_preprocessed(c, args.out)
    print(json.dumps({"out": str(out), **corpus_stats(c)}))
    return 0


def cmd_train(args) -> int:
    if args.from_manifest:
        m = json.loads(Path(args.from_manifest).read_text(encoding="utf-8"))
        spec = m["data"]
        cfg = TrainConfig(**{f.name: m["config"][f.name] for f in fields(TrainConfig)
                             if f.name in m["config"]})
        init_from = m.get("init_from", [])
    else:
        spec = _data_spec(args)
        cfg = _train_config(args)
        init_from = [str(Path(p).resolve()) for p in args.init_from]
    _check_inputs(spec, cfg)
    for p in init_from:
        if not Path(p).is_file():
            raise DataError(f"pretrained model not found: {p}")
    corpus = _load(spec)
    trainer = Trainer(corpus, cfg)
    for p in init_from:
        copied = transfer(trainer.space, load_space(p).astype(trainer.space.dtype))
        log.info("initialized %s from %s", ",".join(copied) or "nothing", p)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else out / EPOCHS
    t0 = time.perf_counter()
    res = trainer.fit(log_path)
    save_space(trainer.space, out / MODEL)
    manifest = {
        "format": "ktup-run/1", "version": __version__, "data": spec,
        "config": trainer.config.to_dict(), "init_from": init_from,
        "rows": trainer.rows, "epochs_run": len(res.logs), "best_epoch": res.best_epoch,
        "best_metric": res.best_metric, "seconds": time.perf_counter() - t0,
        "stats": corpus_stats(corpus),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    print(json.dumps({"run": str(out), "best_epoch": res.best_epoch,
                      "best_metric": res.best_metric, "epochs": len(res.logs)}))
    return 0


class Run:
    """A trained run directory reopened with its corpus."""

    def __init__(self, run_dir):
        self.dir = Path(run_dir)
        mpath = self.dir / MANIFEST
        if not mpath.is_file():
            raise DataError(f"no {MANIFEST} in {self.dir}")
        self.manifest = json.loads(mpath.read_text(encoding="utf-8"))
        m = self.manifest
        self.config = TrainConfig(**{k: v for k, v in m["config"].items()
                                     if k in {f.name for f in fields(TrainConfig)}})
        self.corpus = _load(m["data"])
        self.space = load_space(self.dir / MODEL, {k: v for k, v in m["rows"].items()})
        self.rec_cfg = self.config.rec_config()
        self.kgc_cfg = self.config.kgc_config()

    def user(self, raw: str) -> int:
        s = self.corpus.interactions
        if s is None or self.config.mode not in REC_MODES:
            raise ConfigError(f"model {self.config.mode} does not recommend items")
        if raw not in s.user_index:
            raise DataError(f"unknown user {raw!r}")
        return s.user_index[raw]


def cmd_eval(args) -> int:
    run = Run(args.run)
    cfg, c = run.config, run.corpus
    role = ROLES[args.role]
    report = RankingReport(n=args.n)
    ranks_out = []
    if cfg.mode in REC_MODES:
        res = eval_rec(run.space, c, run.rec_cfg, args.n, role, threads=args.threads,
                       keep_ranks=bool(args.dump_ranks))
        report.rec = {"role": args.role, "users": int(len(res.users)), **res.means()}
        for u, ranks in res.ranks.items():
            for i, r in ranks.items():
                ranks_out.append({"task": "rec", "user": c.interactions.user_ids[u],
                                  "item": c.interactions.item_ids[i], "rank": r})
        if args.buckets:
            b = sparsity_buckets(c.interactions, args.buckets)
            report.sparsity = eval_by_sparsity(run.space, c, run.rec_cfg, b, args.n, args.threads)
    if cfg.mode in KG_MODES:
        kres = eval_kgc(run.space, c.triples, run.kgc_cfg, role, sample=args.kg_sample or None,
                        seed=cfg.seed, threads=args.threads, categories=c.profile.categories)
        report.kgc = {"role": args.role, "triples": int(len(kres.triples)), **kres.metrics(10)}
        report.kgc_categories = kres.by_category(10)
        ts = c.triples
        for (h, t, r), rk in zip(kres.triples.tolist(), kres.ranks.tolist()):
            ranks_out.append({"task": "kgc", "head": ts.entity_ids[h], "tail": ts.entity_ids[t],
                              "relation": ts.relation_ids[r], "head_raw": rk[0],
                              "head_filtered": rk[1], "tail_raw": rk[2], "tail_filtered": rk[3]})
    val = validation_metric(run.space, c, cfg)
    if args.dump_ranks:
        Path(args.dump_ranks).write_text("".join(json.dumps(r) + "\n" for r in ranks_out),
                                         encoding="utf-8")
    if args.json:
        sys.stdout.write(report.to_jsonl())
        print(json.dumps({"task": "validation", "metric": val}))
    else:
        print(report.table())
        print(f"validation metric  {val:.6f}")
    return 0


def cmd_recommend(args) -> int:
    run = Run(args.run)
    u = run.user(args.user)
    items, dist = recommend(run.space, run.corpus, run.rec_cfg, u, args.n)
    ids = run.corpus.interactions.item_ids
    for rank, (i, d) in enumerate(zip(items.tolist(), dist.tolist()), 1):
        if args.json:
            print(json.dumps({"user": args.user, "rank": rank, "item": ids[i], "distance": d}))
        else:
            print(f"{rank}\t{ids[i]}\t{d:.6f}")
    return 0


def cmd_complete(args) -> int:
    run = Run(args.run)
    ts = run.corpus.triples
    if ts is None or run.config.mode not in KG_MODES:
        raise ConfigError(f"model {run.config.mode} does not score triples")
    if args.relation not in ts.relation_index:
        raise DataError(f"unknown relation {args.relation!r}")
    known = args.head if args.head is not None else args.tail
    if known not in ts.entity_index:
        raise DataError(f"unknown entity {known!r}")
    r, e = ts.relation_index[args.relation], ts.entity_index[known]
    predict_head = args.head is None
    scores = entity_scores(run.space, run.kgc_cfg, r, np.array([e]), predict_head)[0]
    cand = np.arange(ts.num_entities)
    h = cand if predict_head else np.full_like(cand, e)
    t = np.full_like(cand, e) if predict_head else cand
    in_kg = ts.contains(h, t, np.full_like(cand, r))
    order = np.argsort(scores, kind="stable")
    if args.filtered:
        order = order[~in_kg[order]]
    slot = "head" if predict_head else "tail"
    for rank, x in enumerate(order[:args.n].tolist(), 1):
        if args.json:
            print(json.dumps({"rank": rank, slot: ts.entity_ids[x], "energy": float(scores[x]),
                              "known": bool(in_kg[x])}))
        else:
            mark = "\tknown" if in_kg[x] else ""
            print(f"{rank}\t{ts.entity_ids[x]}\t{scores[x]:.6f}{mark}")
    return 0


def cmd_explain(args) -> int:
    run = Run(args.run)
    u = run.user(args.user)
    rats = explain_user(u, run.space, run.corpus, run.rec_cfg, args.top_k, args.n)
    if args.json:
        for r in rats:
            print(json.dumps(r.to_dict()))
        return 0
    if rats:
        prefs = ", ".join(f"{n} ({w:.3f})" for n, w in rats[0].preferences)
        print(f"user {args.user} cares about: {prefs}")
    for k, r in enumerate(rats, 1):
        print(f"{k}. {r.item}  distance {r.distance:.4f}")
        for hist, ent, nb, rel in r.support:
            print(f"     via {rel}: {nb} also links {hist} ({ent})")
    return 0


COMMANDS = {"preprocess": cmd_preprocess, "train": cmd_train, "eval": cmd_eval,
            "recommend": cmd_recommend, "complete": cmd_complete, "explain": cmd_explain}


def _fail(err: Exception, code: int) -> int:
    msg = {"error": type(err).__name__, "exit": code, "message": str(err)}
    sys.stderr.write(json.dumps(msg) + "\n")
    return code


def run(argv=None, env=None) -> int:
    """Parse ``argv`` and execute; returns the process exit code."""
    env = os.environ if env is None else env
    try:
        parser = build_parser()
        _apply_env(parser, env)
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(levelname)s %(message)s",
                            stream=sys.stderr)
        return COMMANDS[args.command](args)
    except KtupError as e:
        return _fail(e, e.exit_code)
    except FileNotFoundError as e:
        return _fail(DataError(str(e)), DataError.exit_code)
    except json.JSONDecodeError as e:
        return _fail(DataError(f"bad manifest: {e}"), DataError.exit_code)


def main(argv=None) -> None:
    sys.exit(run(argv))
