"""Base training, distillation-regularized incremental training, experiment protocol."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .data import Interval, IntervalSplit
from .errors import EmptyResultError, ProtocolError, ValidationError
from .evaluation import EvalSet, build_eval_set, recall_at_k
from .graph import BipartiteGraph, build_graph
from .model import (
    NO_FINGERPRINT,
    EmbeddingModel,
    expand_for_interval,
    forward,
    init_model,
    save_snapshot,
)
from .objective import KdBatch, backward, bpr_loss, kd_loss, l2_term, total_loss
from .optim import AdamState, adam_step
from .sampling import sample_negatives

logger = logging.getLogger(__name__)

REPORT_FORMAT = 1


@dataclass(eq=False)
class TeacherScoreCache:
    """Frozen previous-model scores on previously observed pairs."""

    users: np.ndarray
    items: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        for a in (self.users, self.items, self.scores):
            a.setflags(write=False)

    def __len__(self) -> int:
        return len(self.users)

    def sample(self, rng: np.random.Generator, size: int) -> KdBatch:
        idx = rng.integers(0, len(self), size=size)
        return KdBatch(self.users[idx], self.items[idx], self.scores[idx])


def precompute_teacher_scores(
    teacher: EmbeddingModel, teacher_graph: BipartiteGraph, pairs
) -> TeacherScoreCache:
    users = np.asarray(pairs.users, dtype=np.int64)
    items = np.asarray(pairs.items, dtype=np.int64)
    if len(users) == 0:
        raise ValidationError("no previous-interval pairs to distill")
    if users.max() >= teacher.n_users or items.max() >= teacher.n_items:
        raise ProtocolError(
            "distillation pair outside the teacher's index space; split and model disagree"
        )
    final = forward(teacher, teacher_graph)
    scores = np.einsum("nd,nd->n", final.user_final[users], final.item_final[items])
    return TeacherScoreCache(users.copy(), items.copy(), scores)


class EarlyStopping:
    """Patience counter over validation recall.

    The untrained model is epoch 0 and a valid best. Training stops once
    the current epoch is more than ``patience`` epochs past the best one,
    i.e. ``patience`` non-improving epochs are tolerated.
    """

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = -1

    def update(self, epoch: int, value: float) -> bool:
        """Record ``value``; return True when training should stop."""
        if value > self.best:
            self.best, self.best_epoch = value, epoch
        return epoch - self.best_epoch > self.patience


@dataclass(eq=False)
class TrainedInterval:
    t: int
    model: EmbeddingModel
    graph: BipartiteGraph
    best_recall: float
    best_epoch: int
    epochs_run: int
    seconds_to_best: float
    total_seconds: float
    losses: list[float] = field(default_factory=list)
    val_recalls: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    skipped_positives: int = 0


def interval_seed(seed: int, t: int) -> int:
    return int(np.random.SeedSequence([seed, t]).generate_state(1)[0])


def _fit(
    config: TrainConfig,
    t: int,
    model: EmbeddingModel,
    graph: BipartiteGraph,
    positives: Interval,
    observed: Interval,
    validation: EvalSet,
    lr: float,
    cache: TeacherScoreCache | None,
) -> TrainedInterval:
    """Shared optimization loop; ``cache=None`` means no distillation code runs."""
    lambda1 = config.lambda1 if cache is not None else 0.0
    state = AdamState.for_model(model)
    stopper = EarlyStopping(config.patience)
    seed = interval_seed(config.seed, t)

    recall0 = recall_at_k(forward(model, graph), validation, config.k)
    stopper.update(0, recall0)
    best_model = model.copy()
    val_recalls, losses, epoch_seconds = [recall0], [], []
    train_seconds = best_seconds = 0.0
    skipped = 0
    epochs_run = 0

    for epoch in range(1, config.max_epochs + 1):
        tick = time.perf_counter()
        ep = sample_negatives(
            positives.users,
            positives.items,
            model.n_items,
            seed,
            epoch,
            config.negatives_per_positive,
            observed=(observed.users, observed.items),
        )
        skipped = ep.skipped
        kd_rng = np.random.default_rng([seed, epoch, 1])
        batch_losses = []
        for batch in ep.batches(config.batch_size):
            final = forward(model, graph)
            bpr = bpr_loss(batch, final)
            l2 = l2_term(batch, model)
            if cache is not None:
                kdb = cache.sample(kd_rng, len(batch))
                kd = kd_loss(kdb, final)
            else:
                kdb, kd = None, 0.0
            batch_losses.append(total_loss(bpr, kd, l2, lambda1, config.lambda2))
            grads = backward(model, graph, final, batch, kdb, lambda1, config.lambda2)
            adam_step(model, grads, state, lr)
        elapsed = time.perf_counter() - tick
        train_seconds += elapsed
        epoch_seconds.append(elapsed)
        losses.append(float(np.mean(batch_losses)) if batch_losses else float("nan"))
        epochs_run = epoch

        recall = recall_at_k(forward(model, graph), validation, config.k)
        val_recalls.append(recall)
        improved = recall > stopper.best
        stop = stopper.update(epoch, recall)
        if improved:
            best_model = model.copy()
            best_seconds = train_seconds
        if stop:
            break

    return TrainedInterval(
        t=t,
        model=best_model,
        graph=graph,
        best_recall=float(stopper.best),
        best_epoch=stopper.best_epoch,
        epochs_run=epochs_run,
        seconds_to_best=best_seconds,
        total_seconds=train_seconds,
        losses=losses,
        val_recalls=val_recalls,
        epoch_seconds=epoch_seconds,
        skipped_positives=skipped,
    )


def train_base(
    config: TrainConfig,
    base: Interval,
    validation: EvalSet,
    n_users: int | None = None,
    n_items: int | None = None,
    fingerprint: bytes = NO_FINGERPRINT,
) -> TrainedInterval:
    """Train the interval-0 model with BPR + L2 from a fresh initialization."""
    if len(base) == 0:
        raise ValidationError("base interval is empty")
    if len(validation) == 0:
        raise EmptyResultError("validation set is empty")
    n_users = base.n_users if n_users is None else n_users
    n_items = base.n_items if n_items is None else n_items
    model = init_model(n_users, n_items, config.dim, config.n_layers, config.seed, fingerprint=fingerprint)
    graph = build_graph(base, n_users, n_items)
    return _fit(config, 0, model, graph, base, base, validation, config.lr_base, None)


def train_incremental(
    config: TrainConfig,
    prev: TrainedInterval,
    split: IntervalSplit,
    t: int,
    validation: EvalSet,
    distill: bool | None = None,
) -> TrainedInterval:
    """Train interval ``t`` starting from, and distilling, the interval ``t-1`` model.

    ``prev.model`` serves as both initialization and frozen teacher and is
    never modified. ``distill`` defaults to ``config.lambda1 > 0``; with
    ``distill=False`` no teacher scores are computed (plain fine-tuning).
    """
    if prev is None or prev.model is None:
        raise ValidationError("incremental training needs the previous interval's model")
    if t < 1 or t >= len(split):
        raise ValidationError(f"interval {t} outside 1..{len(split) - 1}")
    current = split.intervals[t]
    if len(current) == 0:
        raise ValidationError(f"interval {t} is empty")
    if len(validation) == 0:
        raise EmptyResultError("validation set is empty")
    if distill is None:
        distill = config.lambda1 > 0

    teacher = prev.model
    nu_prev, ni_prev = split.n_users_cumulative[t - 1], split.n_items_cumulative[t - 1]
    if (teacher.n_users, teacher.n_items) != (nu_prev, ni_prev):
        raise ProtocolError(
            f"teacher covers ({teacher.n_users}, {teacher.n_items}) entities but interval "
            f"{t - 1} has ({nu_prev}, {ni_prev})"
        )
    nu, ni = split.n_users_cumulative[t], split.n_items_cumulative[t]
    student = expand_for_interval(teacher.copy(), nu, ni, seed=config.seed)
    scope = split.scope(t, config.cumulative_graph)
    graph = build_graph(scope, nu, ni)

    cache = None
    if distill:
        teacher_graph = prev.graph
        if teacher_graph is None or (teacher_graph.n_users, teacher_graph.n_items) != (nu_prev, ni_prev):
            teacher_graph = build_graph(split.scope(t - 1, config.cumulative_graph), nu_prev, ni_prev)
        pairs = split.scope(t - 1, cumulative=config.kd_scope == "cumulative")
        cache = precompute_teacher_scores(teacher, teacher_graph, pairs)

    return _fit(config, t, student, graph, current, scope, validation, config.lr_incremental, cache)


# --- experiment protocol -------------------------------------------------


@dataclass
class IntervalResult:
    t: int
    test_recall: float
    val_recall: float
    best_epoch: int
    epochs_run: int
    seconds_to_best: float
    total_seconds: float
    losses: list[float]
    val_recalls: list[float]
    epoch_seconds: list[float]
    eval_users: int
    skipped_cold_users: int


@dataclass
class ExperimentReport:
    lambda1: float
    rows: list[IntervalResult]
    avg_recall: float
    finetune_avg_recall: float
    improvement_pct: float | None
    avg_seconds_to_best: float
    config: dict
    manifest_hash: str = ""
    k: int = 20

    def to_dict(self) -> dict:
        d = {
            "format": REPORT_FORMAT,
            "lambda1": self.lambda1,
            "k": self.k,
            "avg_recall": self.avg_recall,
            "finetune_avg_recall": self.finetune_avg_recall,
            "improvement_pct": self.improvement_pct,
            "avg_seconds_to_best": self.avg_seconds_to_best,
            "config": self.config,
            "manifest_hash": self.manifest_hash,
            "intervals": [dict(r.__dict__) for r in self.rows],
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        try:
            rows = [IntervalResult(**r) for r in d["intervals"]]
            return cls(
                lambda1=d["lambda1"],
                rows=rows,
                avg_recall=d["avg_recall"],
                finetune_avg_recall=d["finetune_avg_recall"],
                improvement_pct=d["improvement_pct"],
                avg_seconds_to_best=d["avg_seconds_to_best"],
                config=d["config"],
                manifest_hash=d.get("manifest_hash", ""),
                k=d.get("k", 20),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed report: {exc}") from exc

    def averaged_rows(self) -> list[IntervalResult]:
        """Rows entering the averages: incremental intervals, or the base row alone."""
        inc = [r for r in self.rows if r.t >= 1]
        return inc or self.rows


def eval_split(split: IntervalSplit, t: int, seed: int) -> tuple[EvalSet, EvalSet]:
    """Validation and test sets for the model trained at ``t``, drawn from interval ``t+1``.

    Each interaction of interval ``t+1`` goes to validation or test by a
    seeded fair coin. Everything up to ``t`` is masked at ranking time.
    """
    nxt = split.intervals[t + 1]
    coin = np.random.default_rng([seed, t, 0x7E57]).random(len(nxt)) < 0.5
    history = split.scope(t, cumulative=True)
    nu, ni = split.n_users_cumulative[t], split.n_items_cumulative[t]
    return (
        build_eval_set(nxt.subset(coin), history, nu, ni),
        build_eval_set(nxt.subset(~coin), history, nu, ni),
    )


def _averages(rows: list[IntervalResult]) -> tuple[float, float]:
    inc = [r for r in rows if r.t >= 1] or rows
    return (
        float(np.mean([r.test_recall for r in inc])),
        float(np.mean([r.seconds_to_best for r in inc])),
    )


def run_chain(
    config: TrainConfig,
    split: IntervalSplit,
    base: TrainedInterval | None = None,
    workdir=None,
    tag: str = "",
) -> tuple[list[IntervalResult], TrainedInterval]:
    """Train intervals 0..T-1 and score each on its held-out next interval."""
    if len(split) < 2:
        raise ValidationError("experiment needs a base interval and at least one more")
    fp = split.fingerprint()
    rows = []
    prev = None
    for t in range(len(split) - 1):
        val, test = eval_split(split, t, config.seed)
        if t == 0:
            prev = base or train_base(
                config,
                split.intervals[0],
                val,
                split.n_users_cumulative[0],
                split.n_items_cumulative[0],
                fingerprint=fp,
            )
        else:
            prev = train_incremental(config, prev, split, t, val)
        test_recall = recall_at_k(forward(prev.model, prev.graph), test, config.k)
        logger.info("%sinterval %d: val R@%d %.4f test %.4f", tag, t, config.k, prev.best_recall, test_recall)
        rows.append(
            IntervalResult(
                t=t,
                test_recall=test_recall,
                val_recall=prev.best_recall,
                best_epoch=prev.best_epoch,
                epochs_run=prev.epochs_run,
                seconds_to_best=prev.seconds_to_best,
                total_seconds=prev.total_seconds,
                losses=prev.losses,
                val_recalls=prev.val_recalls,
                epoch_seconds=prev.epoch_seconds,
                eval_users=len(test),
                skipped_cold_users=test.skipped_users,
            )
        )
        if workdir is not None:
            Path(workdir).mkdir(parents=True, exist_ok=True)
            save_snapshot(prev.model, Path(workdir) / f"mod_t{t}.snap")
        if t == 0:
            base = prev
    return rows, base


def run_experiment(
    config: TrainConfig,
    split: IntervalSplit,
    base: TrainedInterval | None = None,
    finetune: ExperimentReport | None = None,
    workdir=None,
    manifest_hash: str = "",
) -> ExperimentReport:
    """Full protocol for one configuration, with its fine-tune comparison.

    The fine-tune reference (same config, ``lambda1 = 0``) is run here
    unless supplied; a ``lambda1 = 0`` config is its own reference.
    """
    rows, base = run_chain(config, split, base, workdir)
    avg, avg_sec = _averages(rows)
    if config.lambda1 == 0:
        ft_avg = avg
    else:
        if finetune is None:
            finetune = run_experiment(config.replace(lambda1=0.0), split, base=base)
        ft_avg = finetune.avg_recall
    improvement = 100.0 * (avg - ft_avg) / ft_avg if ft_avg > 0 else None
    if config.lambda1 == 0:
        improvement = 0.0
    return ExperimentReport(
        lambda1=config.lambda1,
        rows=rows,
        avg_recall=avg,
        finetune_avg_recall=ft_avg,
        improvement_pct=improvement,
        avg_seconds_to_best=avg_sec,
        config=config.as_dict(),
        manifest_hash=manifest_hash,
        k=config.k,
    )


def worker_threads() -> int:
    raw = os.environ.get("INCR_GCF_THREADS")
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValidationError(f"INCR_GCF_THREADS must be an integer, got {raw!r}") from None


def run_grid(
    config: TrainConfig,
    split: IntervalSplit,
    lambdas,
    workdir=None,
    manifest_hash: str = "",
) -> list[ExperimentReport]:
    """One report per lambda1; fine-tune (0) always runs first and is shared.

    The base model is trained once and reused by every grid point. With
    ``INCR_GCF_THREADS`` > 1, grid points run on worker threads.
    """
    grid = [0.0] + sorted({float(x) for x in lambdas if float(x) != 0.0})

    def sub(lam):
        return None if workdir is None else Path(workdir) / f"lambda1_{lam:g}"

    ft_cfg = config.replace(lambda1=0.0)
    ft_rows, base = run_chain(ft_cfg, split, None, sub(0.0))
    avg, avg_sec = _averages(ft_rows)
    ft = ExperimentReport(0.0, ft_rows, avg, avg, 0.0, avg_sec, ft_cfg.as_dict(), manifest_hash, config.k)

    def one(lam):
        return run_experiment(config.replace(lambda1=lam), split, base, ft, sub(lam), manifest_hash)

    n = worker_threads()
    if n > 1 and len(grid) > 2:
        with ThreadPoolExecutor(max_workers=n) as pool:
            rest = list(pool.map(one, grid[1:]))
    else:
        rest = [one(lam) for lam in grid[1:]]
    return [ft] + rest


def manifest_hash_of(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()
