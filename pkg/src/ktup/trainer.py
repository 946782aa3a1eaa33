"""Joint objective, optimizer steps and the epoch loop with early stopping."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .corpus import TRAIN, VALID, Corpus
from .embeddings import FIELDS, EmbeddingSpace, enforce_constraints, init_space
from .errors import ConfigError, NumericError
from .evaluator import eval_kgc, eval_rec
from .kgc import KgcConfig, kgc_loss
from .optim import Optimizer, SparseGrad
from .rec import RecConfig, bpr_loss
from .sampler import TrainIndex, bernoulli_head_probs, sample_kgc_negatives, sample_rec_negatives

log = logging.getLogger(__name__)

MODES = ("bprmf", "transe", "transh", "tup", "ktup")
REC_MODES = ("bprmf", "tup", "ktup")
KG_MODES = ("transe", "transh", "ktup")

# (lr, optimizer, l2) found best per task; joint models use the KG set
REC_DEFAULTS = (0.005, "adagrad", 1e-5)
KG_DEFAULTS = (0.001, "adam", 0.0)


@dataclass
class TrainConfig:
    mode: str = "ktup"
    lam: float | None = None
    batch_size: int = 256
    lr: float | None = None
    l2: float | None = None
    optimizer: str | None = None
    max_epochs: int = 500
    patience: int = 5
    eval_every: int = 5
    dim: int = 100
    margin: float = 1.0
    induction: str = "soft"
    tau: float = 1.0
    noise: str = "uniform"
    num_prefs: int | None = None
    constraints: bool = True
    bern: bool = False
    topn: int = 10
    val_kg_sample: int = 2000
    seed: int = 0

    def resolved(self, corpus: Corpus | None = None) -> "TrainConfig":
        """Fill mode- and data-dependent defaults and validate."""
        if self.mode not in MODES:
            raise ConfigError(f"unknown model {self.mode!r}; choose from {', '.join(MODES)}")
        lr, opt, l2 = REC_DEFAULTS if self.mode in ("bprmf", "tup") else KG_DEFAULTS
        lam = self.lam
        if lam is None:
            lam = {"bprmf": 1.0, "tup": 1.0, "transe": 0.0, "transh": 0.0}.get(self.mode)
            if lam is None:
                lam = 0.5
                s = corpus.interactions if corpus is not None else None
                if s is not None and len(s) / (s.num_users * s.num_items) < 0.01:
                    lam = 0.7
        cfg = replace(self, lam=lam, lr=self.lr if self.lr is not None else lr,
                      optimizer=self.optimizer or opt, l2=self.l2 if self.l2 is not None else l2)
        if corpus is not None and self.mode == "ktup":
            if corpus.triples is None:
                raise ConfigError("ktup needs a knowledge graph")
            nrel = corpus.triples.num_relations
            if cfg.num_prefs not in (None, nrel):
                raise ConfigError(f"ktup ties one preference to each relation: "
                                  f"num_prefs must be {nrel}, got {cfg.num_prefs}")
            cfg = replace(cfg, num_prefs=nrel)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not 0.0 <= (self.lam if self.lam is not None else 0.5) <= 1.0:
            raise ConfigError("lambda must lie in [0, 1]")
        if self.batch_size <= 0 or self.dim <= 0:
            raise ConfigError("batch size and dimension must be positive")
        if self.optimizer not in (None, "sgd", "adagrad", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.patience < 0 or self.eval_every <= 0 or self.max_epochs < 0:
            raise ConfigError("patience >= 0, eval_every > 0 and max_epochs >= 0 required")
        if self.induction not in ("hard", "soft"):
            raise ConfigError(f"unknown induction {self.induction!r}")
        if not self.tau > 0 or not self.margin > 0:
            raise ConfigError("temperature and margin must be positive")
        if self.mode == "tup" and not self.num_prefs:
            raise ConfigError("tup needs an explicit number of preferences")

    def rec_config(self) -> RecConfig:
        return RecConfig(self.mode if self.mode in REC_MODES else "tup",
                         self.induction, self.tau, self.noise)

    def kgc_config(self) -> KgcConfig:
        return KgcConfig("transE" if self.mode == "transe" else "transH", self.margin)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochLog:
    epoch: int
    loss_rec: float
    loss_kg: float
    loss: float
    val_metric: float | None
    seconds: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class FitResult:
    space: EmbeddingSpace
    logs: list[EpochLog] = field(default_factory=list)
    best_epoch: int = 0
    best_metric: float | None = None


def space_rows(mode: str, corpus: Corpus, num_prefs: int | None = None) -> dict[str, int]:
    """Parameter blocks a model owns; blocks it never reads get zero rows."""
    rows: dict[str, int] = {}
    if mode in REC_MODES:
        rows.update(U=corpus.interactions.num_users, I=corpus.interactions.num_items)
    if mode in ("tup", "ktup"):
        rows.update(P=num_prefs, WP=num_prefs)
    if mode in KG_MODES:
        rows.update(E=corpus.triples.num_entities, R=corpus.triples.num_relations)
    if mode in ("transh", "ktup"):
        rows.update(WR=corpus.triples.num_relations)
    return rows


def transfer(space: EmbeddingSpace, source: EmbeddingSpace) -> list[str]:
    """Copy every non-empty block of ``source`` whose shape matches ``space``."""
    if source.dim != space.dim:
        raise ConfigError(f"pretrained dim {source.dim} != {space.dim}")
    done = []
    for f in FIELDS:
        if source[f].shape[0] and source[f].shape == space[f].shape:
            space[f][...] = source[f]
            done.append(f)
    return done


class Trainer:
    def __init__(self, corpus: Corpus, config: TrainConfig, space: EmbeddingSpace | None = None):
        self.corpus = corpus
        self.config = cfg = config.resolved(corpus)
        if cfg.mode == "ktup" and corpus.alignments is None:
            raise ConfigError("ktup needs item-entity alignments")
        if cfg.mode in REC_MODES and corpus.interactions is None:
            raise ConfigError(f"{cfg.mode} needs interactions")
        if cfg.mode in KG_MODES and corpus.triples is None:
            raise ConfigError(f"{cfg.mode} needs triples")
        self.rows = space_rows(cfg.mode, corpus, cfg.num_prefs)
        if space is None:
            space = init_space(self.rows, cfg.dim, cfg.seed)
        self.space = space
        self.rec_cfg = cfg.rec_config()
        self.kgc_cfg = cfg.kgc_config()
        self.uses_rec = cfg.mode in REC_MODES and cfg.lam > 0
        self.uses_kg = cfg.mode in KG_MODES and cfg.lam < 1
        self.bounded = () if cfg.mode == "bprmf" else ("U", "I", "E")
        self.optimizer = Optimizer(cfg.optimizer, cfg.lr)
        ss = np.random.SeedSequence(cfg.seed)
        self.shuffle_rng, self.neg_rng, self.gumbel_rng, self._fix_rng = (
            np.random.default_rng(s) for s in ss.spawn(4))
        self.item_entity = corpus.item_entity if cfg.mode == "ktup" else None
        if self.uses_rec:
            s = corpus.interactions
            pairs = s.pairs(TRAIN)
            self.rec_train = pairs
            self.train_index = TrainIndex(pairs[:, 0], pairs[:, 1], s.num_users, s.num_items)
        if self.uses_kg:
            self.kg_train = corpus.triples.array(TRAIN)
            self.head_prob = bernoulli_head_probs(corpus.triples) if cfg.bern else 0.5

    def objective(self, rec_batch=None, kgc_batch=None, rng=None):
        """Joint loss and its row-sparse gradient.

        ``rec_batch`` holds (user, pos, neg) rows, ``kgc_batch`` is a (pos, neg)
        pair of triple arrays. Returns ``(total, rec_loss, kg_loss, grads)``.
        """
        cfg = self.config
        grads = SparseGrad()
        lp = lk = 0.0
        if rec_batch is not None and len(rec_batch):
            rb = np.asarray(rec_batch)
            lp = bpr_loss(self.space, rb[:, 0], rb[:, 1], rb[:, 2], self.rec_cfg,
                          self.item_entity, rng, grads, cfg.lam)
        if kgc_batch is not None and len(kgc_batch[0]):
            lk = kgc_loss(self.space, kgc_batch[0], kgc_batch[1], self.kgc_cfg, grads,
                          1.0 - cfg.lam)
        g = grads.coalesce()
        total = cfg.lam * lp + (1.0 - cfg.lam) * lk
        if cfg.l2:
            for name, (idx, rows) in g.items():
                theta = self.space[name][idx]
                total += cfg.l2 * float(np.sum(theta.astype(np.float64) ** 2))
                rows += (2.0 * cfg.l2) * theta
        return total, lp, lk, g

    def joint_step(self, rec_batch=None, kgc_batch=None) -> tuple[float, float, float]:
        total, lp, lk, g = self.objective(rec_batch, kgc_batch, self.gumbel_rng)
        if not math.isfinite(total) or any(not np.isfinite(r).all() for _, r in g.values()):
            ids = {}
            if rec_batch is not None:
                ids["rec"] = np.asarray(rec_batch)[:8].tolist()
            if kgc_batch is not None:
                ids["kg"] = np.asarray(kgc_batch[0])[:8].tolist()
            raise NumericError(f"non-finite loss or gradient (loss={total}); batch ids {ids}")
        self.optimizer.step(self.space, g)
        if self.config.constraints:
            enforce_constraints(self.space, {k: v[0] for k, v in g.items()}, self.bounded,
                                self._fix_rng)
        return total, lp, lk

    def _rec_batch(self, idx):
        pairs = self.rec_train[idx]
        neg = sample_rec_negatives(pairs[:, 0], self.train_index, self.neg_rng)
        return np.column_stack([pairs, neg])

    def _kgc_batch(self, idx):
        pos = self.kg_train[idx]
        neg, _ = sample_kgc_negatives(pos, self.corpus.triples, self.neg_rng, self.head_prob)
        return pos, neg

    def run_epoch(self) -> tuple[float, float]:
        B = self.config.batch_size
        rec_order = kg_order = None
        n_rec = n_kg = 0
        if self.uses_rec:
            rec_order = self.shuffle_rng.permutation(len(self.rec_train))
            n_rec = math.ceil(len(rec_order) / B)
        if self.uses_kg:
            kg_order = self.shuffle_rng.permutation(len(self.kg_train))
            n_kg = math.ceil(len(kg_order) / B)
        schedule = self.shuffle_rng.permutation(np.r_[np.zeros(n_rec, int), np.ones(n_kg, int)])
        lp_sum = lk_sum = 0.0
        jr = jk = 0
        for kind in schedule:
            if kind == 0:
                _, lp, _ = self.joint_step(self._rec_batch(rec_order[jr * B:(jr + 1) * B]), None)
                lp_sum += lp
                jr += 1
            else:
                _, _, lk = self.joint_step(None, self._kgc_batch(kg_order[jk * B:(jk + 1) * B]))
                lk_sum += lk
                jk += 1
        return lp_sum / max(n_rec, 1), lk_sum / max(n_kg, 1)

    def validate(self, space: EmbeddingSpace | None = None) -> float:
        return validation_metric(space or self.space, self.corpus, self.config)

    def fit(self, log_path=None) -> FitResult:
        cfg = self.config
        if cfg.constraints:
            enforce_constraints(self.space, None, self.bounded, self._fix_rng)
        result = FitResult(self.space)
        best = None
        stale = 0
        fh = open(log_path, "w", encoding="utf-8") if log_path else None
        try:
            for epoch in range(1, cfg.max_epochs + 1):
                t0 = time.perf_counter()
                lp, lk = self.run_epoch()
                metric = None
                if epoch % cfg.eval_every == 0:
                    metric = self.validate()
                    if best is None or metric > best:
                        best = metric
                        result.best_epoch = epoch
                        result.best_metric = metric
                        best_space = self.space.copy()
                        stale = 0
                    else:
                        stale += 1
                entry = EpochLog(epoch, lp, lk, cfg.lam * lp + (1 - cfg.lam) * lk, metric,
                                 time.perf_counter() - t0)
                result.logs.append(entry)
                log.info("epoch %d loss_rec=%.5f loss_kg=%.5f val=%s", epoch, lp, lk, metric)
                if fh:
                    fh.write(entry.to_json() + "\n")
                    fh.flush()
                if metric is not None and stale >= cfg.patience:
                    break
        finally:
            if fh:
                fh.close()
        if best is not None:
            self.space.assign(best_space)
        return result


def validation_metric(space: EmbeddingSpace, corpus: Corpus, cfg: TrainConfig) -> float:
    """F1@N on validation users, filtered KG hit@10 on validation facts, or their
    lambda-weighted sum for the joint model."""
    rec = kg = 0.0
    if cfg.mode in REC_MODES:
        res = eval_rec(space, corpus, cfg.rec_config(), cfg.topn, VALID)
        rec = res.means()[f"f1@{cfg.topn}"]
    if cfg.mode in KG_MODES:
        res = eval_kgc(space, corpus.triples, cfg.kgc_config(), VALID,
                       sample=cfg.val_kg_sample or None, seed=cfg.seed,
                       categories=corpus.profile.categories)
        kg = res.metrics()["filtered_hit@10"] if len(res.triples) else 0.0
    if cfg.mode == "ktup":
        return cfg.lam * rec + (1 - cfg.lam) * kg
    return rec if cfg.mode in REC_MODES else kg


def fit(corpus: Corpus, config: TrainConfig, space: EmbeddingSpace | None = None,
        log_path=None) -> FitResult:
    return Trainer(corpus, config, space).fit(log_path)
