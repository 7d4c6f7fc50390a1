"""Paired source/target training with SGD momentum and a step learning-rate schedule."""

from __future__ import annotations

import csv
import dataclasses
import enum
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .data import LabeledDataset, UnlabeledDataset
from .losses import LossReport, LossWeights
from .model import (
    ForwardCaches,
    ModelParams,
    Upstream,
    backward,
    classify,
    extract_features,
    predict_logits,
    project,
)

log = logging.getLogger(__name__)


class Variant(str, enum.Enum):
    SOURCE_ONLY = "source_only"
    CORAL_ONLY = "coral_only"
    BFAL_ONLY = "bfal_only"
    FULL = "full"

    @property
    def uses_coral(self) -> bool:
        return self in (Variant.CORAL_ONLY, Variant.FULL)

    @property
    def uses_bfal(self) -> bool:
        return self in (Variant.BFAL_ONLY, Variant.FULL)

    @property
    def uses_target(self) -> bool:
        return self is not Variant.SOURCE_ONLY


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr0: float = 0.001
    momentum: float = 0.9
    lr_decay: float = 0.33
    decay_every_epochs: int = 20
    epochs: int = 60
    lam: float = losses.DEFAULT_LAMBDA
    mu: float = losses.DEFAULT_MU
    seed: int = 0
    variant: Variant = Variant.FULL

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be at least 2, got {self.batch_size}")
        if not 0 < self.lr_decay <= 1:
            raise ValueError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if self.decay_every_epochs < 1:
            raise ValueError("decay_every_epochs must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.lr0 <= 0 or self.momentum < 0:
            raise ValueError("lr0 must be positive and momentum non-negative")
        LossWeights(self.lam, self.mu)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lam, self.mu)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return cfg.lr0 * cfg.lr_decay ** (epoch // cfg.decay_every_epochs)


# -- batching ----------------------------------------------------------------


class _Cycler:
    """Yields shuffled row indices forever, reshuffling on each wrap."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while k:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            step = min(k, self.n - self.pos)
            out.append(self.order[self.pos:self.pos + step])
            self.pos += step
            k -= step
        return np.concatenate(out)


def epoch_length(n_s: int, n_t: int, batch_size: int) -> int:
    return max(n_s, n_t) // batch_size


def paired_batch_indices(n_s: int, n_t: int, batch_size: int, source_rng, target_rng):
    """Index pairs for one epoch; the shorter domain cycles and reshuffles on wrap."""
    if n_s < 1 or n_t < 1:
        raise ValueError(f"both domains must be non-empty (n_s={n_s}, n_t={n_t})")
    steps = epoch_length(n_s, n_t, batch_size)
    src, tgt = _Cycler(n_s, source_rng), _Cycler(n_t, target_rng)
    return [(src.take(batch_size), tgt.take(batch_size)) for _ in range(steps)]


def paired_batches(source: LabeledDataset, target: UnlabeledDataset, batch_size: int, source_rng, target_rng):
    """``(x_s, y_s, x_t)`` batches for one epoch."""
    for i_s, i_t in paired_batch_indices(len(source), len(target), batch_size, source_rng, target_rng):
        yield source.x[i_s], source.y[i_s], target.x[i_t]


# -- optimiser ---------------------------------------------------------------


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.arrays.items()})


def sgd_momentum_step(params: ModelParams, grads: dict, state: OptimizerState, lr: float, momentum: float):
    """Heavy-ball update in place: ``v = momentum * v + g``; ``theta -= lr * v``."""
    if grads.keys() != params.arrays.keys():
        raise ValueError("gradient names do not match parameter names")
    for k, theta in params.arrays.items():
        g = grads[k]
        v = state.velocity[k]
        if g.shape != theta.shape or v.shape != theta.shape:
            raise ValueError(f"{k}: param {theta.shape}, grad {g.shape}, velocity {v.shape}")
        v *= momentum
        v += g.astype(v.dtype, copy=False)
        theta -= theta.dtype.type(lr) * v
    params.bump()
    return params, state


# -- one step ----------------------------------------------------------------


def step_objective(params: ModelParams, x_s, y_s, x_t, weights: LossWeights, variant=Variant.FULL):
    """Forward + backward of the combined loss on one batch pair.

    Returns ``(report, grads, caches)``.  Disabled loss terms are reported as 0.
    """
    variant = Variant(variant)
    dtype = params.dtype
    x_s = np.asarray(x_s, dtype=dtype)
    f_s, c_fs = extract_features(params, x_s)
    logits, c_logits = classify(params, f_s)
    ce, ce_cache = losses.cross_entropy_forward(logits, y_s)
    caches = ForwardCaches(features_s=c_fs, logits=c_logits)
    up = Upstream(grad_logits=losses.cross_entropy_backward(ce_cache))
    coral = bfal = 0.0
    if variant.uses_target:
        x_t = np.asarray(x_t, dtype=dtype)
        f_t, caches.features_t = extract_features(params, x_t)
        lam = weights.lam
        if variant.uses_coral:
            coral, coral_cache = losses.coral_forward(f_s, f_t)
            g_fs, g_ft = losses.coral_backward(coral_cache)
            up.grad_fs, up.grad_ft = lam * g_fs, lam * g_ft
        if variant.uses_bfal:
            p_s, caches.proj_s = project(params, f_s)
            p_t, caches.proj_t = project(params, f_t)
            bfal, bfal_cache = losses.bfal_forward(p_s, p_t, weights.mu)
            g_ps, g_pt = losses.bfal_backward(bfal_cache)
            up.grad_ps, up.grad_pt = lam * g_ps, lam * g_pt
    for name, v in (("ce", ce), ("coral", coral), ("bfal", bfal)):
        if not math.isfinite(v):
            raise NonFiniteLossError(f"non-finite {name} loss ({v})")
    report = losses.combined_loss(ce, coral, bfal, weights)
    grads = backward(params, caches, up)
    return report, grads, caches


# -- training loop -----------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    ce: float
    coral: float
    bfal: float
    total: float
    src_val_macro: float = float("nan")
    src_val_micro: float = float("nan")
    extra: dict = field(default_factory=dict)


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    steps: list[LossReport] = field(default_factory=list)
    best_epoch: int = -1

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.epochs]

    def to_csv(self) -> str:
        extra_keys = sorted({k for r in self.epochs for k in r.extra})
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        base = ["epoch", "lr", "ce", "coral", "bfal", "total", "src_val_macro", "src_val_micro"]
        w.writerow(base + extra_keys + ["selected"])
        for r in self.epochs:
            vals = [r.epoch] + [repr(float(getattr(r, k))) for k in base[1:]]
            vals += [repr(float(r.extra.get(k, float("nan")))) for k in extra_keys]
            w.writerow(vals + [int(r.epoch == self.best_epoch)])
        return buf.getvalue()


def _accuracies(truth, pred, num_classes):
    from .metrics import macro_accuracy, micro_accuracy

    return macro_accuracy(truth, pred, num_classes), micro_accuracy(truth, pred)


def train(cfg: TrainConfig, source: LabeledDataset, target: UnlabeledDataset, params: ModelParams,
          source_val: LabeledDataset | None = None, epoch_callback=None):
    """Train ``params`` in place and return ``(best_params, history)``.

    ``target`` must be the unlabeled view; a labeled dataset is rejected so
    target labels cannot reach the optimiser or checkpoint selection.  The
    returned parameters are the epoch with the best source-validation macro
    accuracy (earliest on ties), or the final epoch without ``source_val``.
    ``epoch_callback(epoch, params)`` may return a dict of extra numbers that
    is logged in the history and nothing else.
    """
    if isinstance(target, LabeledDataset) or not isinstance(target, UnlabeledDataset):
        raise TypeError("target must be an UnlabeledDataset; call .unlabeled() on labeled target data")
    if not isinstance(source, LabeledDataset):
        raise TypeError("source must be a LabeledDataset")
    if len(source) < 1 or len(target) < 1:
        raise ValueError("source and target must be non-empty")
    arch = params.arch
    if source.dim != arch.in_dim or target.dim != arch.in_dim:
        raise ValueError(f"model expects {arch.in_dim} features; source has {source.dim}, target {target.dim}")
    if source.num_classes != arch.num_classes:
        raise ValueError(f"model has {arch.num_classes} outputs but source has {source.num_classes} classes")
    if epoch_length(len(source), len(target), cfg.batch_size) < 1:
        raise ValueError(f"batch size {cfg.batch_size} exceeds both domain sizes")

    weights = cfg.weights
    _, src_seq, tgt_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    src_rng, tgt_rng = np.random.default_rng(src_seq), np.random.default_rng(tgt_seq)
    opt = OptimizerState.zeros_like(params)
    history = TrainHistory()
    best = None
    best_score = -1.0

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        sums = np.zeros(4)
        steps = 0
        for i_s, i_t in paired_batch_indices(len(source), len(target), cfg.batch_size, src_rng, tgt_rng):
            x_t = target.x[i_t] if cfg.variant.uses_target else None
            try:
                report, grads, caches = step_objective(params, source.x[i_s], source.y[i_s], x_t, weights,
                                                       cfg.variant)
            except NonFiniteLossError as exc:
                raise NonFiniteLossError(f"epoch {epoch} step {steps}: {exc}") from None
            params.update_running_stats(caches.features_s, caches.features_t, caches.proj_s, caches.proj_t)
            sgd_momentum_step(params, grads, opt, lr, cfg.momentum)
            history.steps.append(report)
            sums += (report.ce, report.coral, report.bfal, report.total)
            steps += 1
        ce, coral, bfal, total = sums / steps
        rec = EpochRecord(epoch, lr, ce, coral, bfal, total)
        if source_val is not None:
            pred = np.argmax(predict_logits(params, source_val.x), axis=1)
            rec.src_val_macro, rec.src_val_micro = _accuracies(source_val.y, pred, source_val.num_classes)
            if rec.src_val_macro > best_score:
                best_score, best = rec.src_val_macro, (epoch, params.copy())
        if epoch_callback is not None:
            rec.extra = dict(epoch_callback(epoch, params) or {})
        history.epochs.append(rec)
        log.debug("epoch %d lr=%.3g total=%.5f ce=%.5f coral=%.5g bfal=%.5g val_macro=%.4f",
                  epoch, lr, total, ce, coral, bfal, rec.src_val_macro)

    if best is None:
        history.best_epoch = cfg.epochs - 1
        return params.copy(), history
    history.best_epoch = best[0]
    return best[1], history
