"""Outer distillation loop: initialize a distilled set, iterate meta-gradient
steps through the chosen estimator, clip against an EMA of the gradient norm,
update with Adam, checkpoint, and keep a JSON-lines-ready history.

Per-block learning-rate scales live on the dataset itself (the boosting stage
machinery sets them); scaling happens on the gradient before the outer Adam,
so a scale of zero freezes a block bit-for-bit as long as its moments started
at zero.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import hardness as hardness_mod
from .data import DatasetSplit, one_hot, random_flip
from .errors import (ConfigError, ContractError, DivergenceError, DomainError,
                     FormatError, ShapeError)
from .estimators import MetaGradient, UnrollConfig, sample_window, meta_gradient
from .evaluation import EvalConfig, evaluate_distilled
from .models import ArchitectureSpec
from .optim import ArrayAdam
from .seeding import derive_rng, derive_seed

CHECKPOINT_MAGIC = b"DDC1"
CHECKPOINT_VERSION = 1


@dataclass
class DistilledDataset:
    inputs: np.ndarray
    soft_labels: np.ndarray
    labels_learnable: bool = False
    block_boundaries: tuple = ()
    per_block_lr_scale: tuple = ()

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.soft_labels = np.asarray(self.soft_labels, dtype=np.float64)
        n = self.inputs.shape[0]
        if self.soft_labels.ndim != 2 or self.soft_labels.shape[0] != n:
            raise ShapeError(
                f"soft labels {self.soft_labels.shape} for {n} inputs")
        if not self.block_boundaries:
            self.block_boundaries = (n,)
        self.block_boundaries = tuple(int(b) for b in self.block_boundaries)
        if not self.per_block_lr_scale:
            self.per_block_lr_scale = (1.0,) * len(self.block_boundaries)
        self.per_block_lr_scale = tuple(float(s) for s in self.per_block_lr_scale)
        bounds = self.block_boundaries
        if (bounds[-1] != n or any(b <= 0 for b in bounds)
                or any(a >= b for a, b in zip(bounds, bounds[1:]))):
            raise ContractError(
                f"block boundaries {bounds} do not partition [0, {n})")
        if len(self.per_block_lr_scale) != len(bounds):
            raise ContractError("one lr scale per block required")
        if any(not 0.0 <= s <= 1.0 for s in self.per_block_lr_scale):
            raise ContractError("per-block lr scales must lie in [0, 1]")
        if self.labels_learnable and np.any(self.soft_labels < 0):
            raise DomainError("learnable soft labels must be >= 0")

    @property
    def n_points(self) -> int:
        return self.inputs.shape[0]

    @property
    def classes(self) -> int:
        return self.soft_labels.shape[1]

    @property
    def n_blocks(self) -> int:
        return len(self.block_boundaries)

    def block_slices(self):
        starts = (0,) + self.block_boundaries[:-1]
        return [slice(a, b) for a, b in zip(starts, self.block_boundaries)]

    def copy(self) -> "DistilledDataset":
        return DistilledDataset(self.inputs.copy(), self.soft_labels.copy(),
                                self.labels_learnable, self.block_boundaries,
                                self.per_block_lr_scale)


def init_distilled(input_shape, classes: int, ipc: int, labels_learnable: bool,
                   seed: int) -> DistilledDataset:
    """ipc points per class, class-major; each input normalized to unit L2."""
    if ipc < 1 or classes < 2:
        raise ConfigError("init_distilled: need ipc >= 1 and classes >= 2")
    input_shape = tuple(int(d) for d in input_shape)
    rng = derive_rng(seed, "distilled-init")
    n = ipc * classes
    flat = rng.standard_normal((n, int(np.prod(input_shape))))
    flat /= np.linalg.norm(flat, axis=1, keepdims=True)
    labels = np.repeat(np.arange(classes), ipc)
    return DistilledDataset(flat.reshape(n, *input_shape),
                            one_hot(labels, classes), labels_learnable)


# ---------------------------------------------------------------------------
# EMA gradient clipping

@dataclass(frozen=True)
class EmaClipState:
    ema_norm: float = 0.0
    initialized: bool = False


def ema_clip(g: MetaGradient, state: EmaClipState, clip_factor: float,
             decay: float) -> tuple[MetaGradient, EmaClipState]:
    """Rescale g to clip_factor * EMA(norm) when it spikes above that.

    The first nonzero norm seeds the EMA and passes through unclipped; spikes
    enter the EMA at their clipped value so one explosion cannot drag the
    reference upward.
    """
    if clip_factor <= 0 or not 0.0 < decay < 1.0:
        raise ConfigError("need clip_factor > 0 and 0 < decay < 1")
    norm = g.norm
    if not state.initialized:
        if norm == 0.0:
            return g, state
        return g, EmaClipState(norm, True)
    limit = clip_factor * state.ema_norm
    if norm > limit:
        f = limit / norm
        g = replace(g, grad_inputs=g.grad_inputs * f,
                    grad_labels=None if g.grad_labels is None else g.grad_labels * f,
                    norm=limit)
    new_ema = decay * state.ema_norm + (1.0 - decay) * min(norm, limit)
    return g, EmaClipState(new_ema, True)


# ---------------------------------------------------------------------------
# configuration and metrics

@dataclass(frozen=True)
class HardnessSamplerConfig:
    """Weighted target sampling switched on mid-run (disagreement scores)."""

    thr: float = 1.0
    n_nets: int = 8
    activation_step: int = 0
    refresh_every: int = 50
    train: EvalConfig = field(default_factory=lambda: EvalConfig(steps=100))
    center: str | float = "literal"

    def __post_init__(self):
        if self.thr <= 0:
            raise ConfigError("hardness thr must be > 0")
        if self.n_nets < 2:
            raise ConfigError("hardness n_nets must be >= 2")
        if self.activation_step < 0 or self.refresh_every < 1:
            raise ConfigError("hardness schedule must be nonnegative/positive")


@dataclass(frozen=True)
class DistillationConfig:
    arch: ArchitectureSpec
    unroll: UnrollConfig
    ipc: int = 1
    outer_lr: float = 0.001
    outer_steps: int = 100
    target_batch: int = 512
    eval_every: int = 50
    seed: int = 0
    labels_learnable: bool = False
    clip_factor: float = 2.0
    ema_decay: float = 0.9
    eval_cfg: EvalConfig = field(default_factory=EvalConfig)
    eval_seeds: int = 3
    augment_flip: bool = False
    hardness: HardnessSamplerConfig | None = None

    def __post_init__(self):
        if self.ipc < 1:
            raise ConfigError("ipc must be >= 1")
        if self.outer_lr <= 0:
            raise ConfigError("outer lr must be > 0")
        if self.outer_steps < 0:
            raise ConfigError("outer_steps must be >= 0")
        if self.target_batch < 1:
            raise ConfigError("target_batch must be >= 1")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.eval_seeds < 1:
            raise ConfigError("eval_seeds must be >= 1")
        if self.clip_factor <= 0:
            raise ConfigError("clip_factor must be > 0")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in (0, 1)")


@dataclass
class StepMetrics:
    step: int
    outer_loss: float
    grad_norm: float          # raw estimator norm, before clipping
    n_steps: int              # the window draw's N
    eval_acc: float | None = None

    def to_json(self) -> dict:
        row = {"step": self.step, "outer_loss": self.outer_loss,
               "grad_norm": self.grad_norm, "N": self.n_steps}
        if self.eval_acc is not None:
            row["eval_acc"] = self.eval_acc
        return row


@dataclass
class History:
    entries: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def append(self, metrics: StepMetrics) -> None:
        self.entries.append(metrics)

    def __len__(self) -> int:
        return len(self.entries)

    def eval_entries(self):
        return [m for m in self.entries if m.eval_acc is not None]

    def jsonl(self) -> str:
        return "".join(json.dumps(m.to_json()) + "\n" for m in self.entries)

    def save(self, path) -> None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(self.jsonl())


@dataclass
class OuterOptState:
    inputs_adam: ArrayAdam
    labels_adam: ArrayAdam | None


def init_outer_state(u: DistilledDataset, cfg: DistillationConfig) -> OuterOptState:
    inputs_adam = ArrayAdam([u.inputs.shape], lr=cfg.outer_lr)
    labels_adam = ArrayAdam([u.soft_labels.shape], lr=cfg.outer_lr) \
        if u.labels_learnable else None
    return OuterOptState(inputs_adam, labels_adam)


# ---------------------------------------------------------------------------
# the outer step

def _target_batch(cfg: DistillationConfig, train: DatasetSplit, step: int,
                  weights):
    k = min(train.n, cfg.target_batch)
    rng = derive_rng(cfg.seed, "target", step)
    if weights is None:
        idx = np.sort(rng.choice(train.n, size=k, replace=False))
    else:
        idx = hardness_mod.weighted_batch(weights, k, rng)
    tx = train.inputs[idx]
    if cfg.augment_flip:
        tx = random_flip(tx, derive_rng(cfg.seed, "flip", step))
    return tx, one_hot(train.labels[idx], train.classes)


def distill_step(u: DistilledDataset, clip_state: EmaClipState,
                 opt_state: OuterOptState, cfg: DistillationConfig,
                 train: DatasetSplit, step: int, window=None,
                 target_weights=None):
    """One outer update; returns (u', clip_state', opt_state', StepMetrics).

    The optimizer state is updated in place and returned for threading; the
    dataset is never mutated, a fresh one comes back.
    """
    tx, ty = _target_batch(cfg, train, step, target_weights)
    mg = meta_gradient(cfg.unroll.estimator, u, tx, ty, cfg.arch, cfg.unroll,
                       seed=derive_seed(cfg.seed, "outer-step", step),
                       window=window)
    raw_norm = mg.norm
    mg, clip_state = ema_clip(mg, clip_state, cfg.clip_factor, cfg.ema_decay)

    grad_inputs = mg.grad_inputs.copy()
    grad_labels = None if mg.grad_labels is None else mg.grad_labels.copy()
    for sl, scale in zip(u.block_slices(), u.per_block_lr_scale):
        grad_inputs[sl] *= scale
        if grad_labels is not None:
            grad_labels[sl] *= scale

    new_inputs = u.inputs.copy()
    opt_state.inputs_adam.step([new_inputs], [grad_inputs])
    new_labels = u.soft_labels.copy()
    if grad_labels is not None:
        opt_state.labels_adam.step([new_labels], [grad_labels])
        np.maximum(new_labels, 0.0, out=new_labels)  # keep the label simplex side

    new_u = DistilledDataset(new_inputs, new_labels, u.labels_learnable,
                             u.block_boundaries, u.per_block_lr_scale)
    return new_u, clip_state, opt_state, StepMetrics(
        step, mg.outer_loss, raw_norm, mg.n_steps)


def run_distillation(cfg: DistillationConfig, train: DatasetSplit,
                     test: DatasetSplit | None = None,
                     u0: DistilledDataset | None = None,
                     clip_state0: EmaClipState | None = None,
                     opt_state0: OuterOptState | None = None):
    """Full outer loop; returns (final DistilledDataset, History).

    Evaluation runs every eval_every steps and always on the final step, on
    `test` when given, else on the training split.  On divergence the partial
    history is attached to the raised error as `.history`.  Warm-start state
    (clip_state0/opt_state0) continues an earlier run instead of resetting.
    """
    if train.input_shape != cfg.arch.input_shape:
        raise ShapeError(f"train inputs {train.input_shape} vs "
                         f"architecture {cfg.arch.input_shape}")
    u = u0.copy() if u0 is not None else init_distilled(
        cfg.arch.input_shape, cfg.arch.classes, cfg.ipc, cfg.labels_learnable,
        cfg.seed)
    clip_state = clip_state0 if clip_state0 is not None else EmaClipState()
    opt_state = opt_state0 if opt_state0 is not None else init_outer_state(u, cfg)
    if opt_state.inputs_adam.m[0].shape != u.inputs.shape:
        raise ShapeError("warm-start optimizer state does not match the data")
    history = History()
    eval_split = test if test is not None else train
    eval_seeds = [derive_seed(cfg.seed, "eval-net", s)
                  for s in range(cfg.eval_seeds)]
    resample_every = cfg.unroll.resample_every
    weights = None
    window = None

    for step in range(cfg.outer_steps):
        if cfg.unroll.resample == "per_outer_epoch" and step % resample_every == 0:
            window = sample_window(cfg.unroll,
                                   derive_rng(cfg.seed, "window-epoch",
                                              step // resample_every))
        if cfg.hardness is not None and step >= cfg.hardness.activation_step \
                and (step - cfg.hardness.activation_step) % cfg.hardness.refresh_every == 0:
            table = hardness_mod.adaptive_hardness(
                u, train, cfg.arch, cfg.hardness.train, cfg.hardness.n_nets,
                seed=derive_seed(cfg.seed, "hardness", step))
            weights = hardness_mod.sampler_weights(
                table, cfg.hardness.thr, cfg.hardness.center).weights
            history.meta.setdefault("hardness_refresh_steps", []).append(step)
        try:
            u, clip_state, opt_state, metrics = distill_step(
                u, clip_state, opt_state, cfg, train, step, window, weights)
        except DivergenceError as exc:
            exc.history = history
            raise
        if (step + 1) % cfg.eval_every == 0 or step == cfg.outer_steps - 1:
            report = evaluate_distilled(u, eval_split, cfg.arch, cfg.eval_cfg,
                                        eval_seeds)
            metrics.eval_acc = report.mean
        history.append(metrics)
    history.meta["ema_norm"] = clip_state.ema_norm
    history.meta["ema_initialized"] = clip_state.initialized
    return u, history


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(u: DistilledDataset, path) -> None:
    rank = u.inputs.ndim - 1
    nb = u.n_blocks
    blob = (CHECKPOINT_MAGIC
            + struct.pack("<I", CHECKPOINT_VERSION)
            + struct.pack("<III", u.n_points, u.classes, rank)
            + struct.pack(f"<{rank}I", *u.inputs.shape[1:])
            + struct.pack("<B", int(u.labels_learnable))
            + struct.pack("<I", nb)
            + struct.pack(f"<{nb}I", *u.block_boundaries)
            + struct.pack(f"<{nb}d", *u.per_block_lr_scale)
            + u.inputs.astype("<f8").tobytes()
            + u.soft_labels.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(blob)


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.path = path
        self.off = 0

    def take(self, count, what):
        if self.off + count > len(self.blob):
            raise FormatError(
                f"{self.path}: truncated at byte {self.off}: "
                f"{what} needs {count} bytes, {len(self.blob) - self.off} left")
        out = self.blob[self.off:self.off + count]
        self.off += count
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path) -> DistilledDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, str(path))
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0")
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    n, classes, rank = (r.u32("n_points"), r.u32("classes"), r.u32("input rank"))
    dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "input dims"))
    flag_off = r.off
    flag = r.take(1, "labels_learnable flag")[0]
    if flag not in (0, 1):
        raise FormatError(f"{path}: labels_learnable byte {flag} at byte {flag_off}")
    nb = r.u32("block count")
    bounds = struct.unpack(f"<{nb}I", r.take(4 * nb, "block boundaries"))
    scales = struct.unpack(f"<{nb}d", r.take(8 * nb, "lr scales"))
    n_input = n * int(np.prod(dims, dtype=np.int64)) if rank else n
    inputs = np.frombuffer(r.take(8 * n_input, "inputs"), dtype="<f8")
    labels = np.frombuffer(r.take(8 * n * classes, "labels"), dtype="<f8")
    if r.off != len(blob):
        raise FormatError(
            f"{path}: {len(blob) - r.off} unexpected trailing bytes at byte {r.off}")
    return DistilledDataset(inputs.reshape(n, *dims).copy(),
                            labels.reshape(n, classes).copy(),
                            bool(flag), bounds, scales)
