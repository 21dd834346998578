"""Stagewise distillation: grow the distilled set one class-balanced block at
a time, re-running the driver with the earlier blocks' outer learning rate
scaled by a staleness factor beta.  beta = 0 freezes finished blocks exactly,
so every k-block prefix of the result is itself a complete distilled set.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .driver import (DistillationConfig, DistilledDataset, EmaClipState,
                     OuterOptState, init_distilled, init_outer_state,
                     run_distillation)
from .errors import ConfigError, DdistError
from .seeding import derive_seed


@dataclass(frozen=True)
class BoostConfig:
    base: DistillationConfig
    block_size: int
    n_blocks: int = 1
    beta: float = 0.0
    stage_steps: int = 100
    reset_between_stages: bool = True

    def __post_init__(self):
        classes = self.base.arch.classes
        if self.block_size < classes or self.block_size % classes != 0:
            raise ConfigError(
                f"block_size must be a positive multiple of {classes} classes")
        if self.n_blocks < 1:
            raise ConfigError("n_blocks must be >= 1")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta must lie in [0, 1]")
        if self.stage_steps < 0:
            raise ConfigError("stage_steps must be >= 0")


def stage_lr_scales(stage: int, n_blocks: int, beta: float) -> list:
    """Scales for stage `stage` (1-based): stale beta on finished blocks, 1 on
    the newest."""
    if not 1 <= stage <= n_blocks:
        raise ConfigError(f"stage {stage} outside 1..{n_blocks}")
    return [beta] * (stage - 1) + [1.0]


@dataclass
class BoostResult:
    dataset: DistilledDataset
    histories: list = field(default_factory=list)
    stage_datasets: list = field(default_factory=list)

    @property
    def total_outer_steps(self) -> int:
        return sum(len(h) for h in self.histories)


def prefix_blocks(u: DistilledDataset, k: int) -> DistilledDataset:
    """First k blocks as a standalone dataset (lr scales reset to 1)."""
    if not 1 <= k <= u.n_blocks:
        raise ConfigError(f"prefix of {k} blocks from {u.n_blocks}")
    end = u.block_boundaries[k - 1]
    return DistilledDataset(u.inputs[:end].copy(), u.soft_labels[:end].copy(),
                            u.labels_learnable, u.block_boundaries[:k],
                            (1.0,) * k)


def _pad_rows(arrays, extra):
    return [np.concatenate([a, np.zeros((extra,) + a.shape[1:])]) for a in arrays]


def _grown_state(opt: OuterOptState, u: DistilledDataset,
                 cfg: DistillationConfig) -> OuterOptState:
    grown = init_outer_state(u, cfg)
    extra = u.n_points - opt.inputs_adam.m[0].shape[0]
    grown.inputs_adam.m = _pad_rows(opt.inputs_adam.m, extra)
    grown.inputs_adam.v = _pad_rows(opt.inputs_adam.v, extra)
    grown.inputs_adam.t = opt.inputs_adam.t
    if opt.labels_adam is not None:
        grown.labels_adam.m = _pad_rows(opt.labels_adam.m, extra)
        grown.labels_adam.v = _pad_rows(opt.labels_adam.v, extra)
        grown.labels_adam.t = opt.labels_adam.t
    return grown


def boost_distill(cfg: BoostConfig, train, test=None) -> BoostResult:
    """Run n_blocks sequential stages, each appending one fresh block.

    Stage 1 is stream-identical to a plain run_distillation on block_size
    points.  Later stages seed their fresh block and driver run from
    derived streams, so the whole schedule is reproducible from base.seed.
    """
    base = cfg.base
    ipc = cfg.block_size // base.arch.classes
    result = BoostResult(dataset=None)
    u = None
    clip_state = None
    opt_state = None
    for stage in range(1, cfg.n_blocks + 1):
        scales = stage_lr_scales(stage, cfg.n_blocks, cfg.beta)
        if stage == 1:
            stage_cfg = replace(base, ipc=ipc, outer_steps=cfg.stage_steps)
            u0 = None
            if not cfg.reset_between_stages:
                u0 = init_distilled(base.arch.input_shape, base.arch.classes,
                                    ipc, base.labels_learnable, stage_cfg.seed)
        else:
            stage_cfg = replace(base, ipc=ipc, outer_steps=cfg.stage_steps,
                                seed=derive_seed(base.seed, "boost-stage", stage))
            fresh = init_distilled(base.arch.input_shape, base.arch.classes,
                                   ipc, base.labels_learnable,
                                   derive_seed(base.seed, "boost-block", stage))
            u0 = DistilledDataset(
                np.concatenate([u.inputs, fresh.inputs]),
                np.concatenate([u.soft_labels, fresh.soft_labels]),
                base.labels_learnable,
                u.block_boundaries + (u.n_points + fresh.n_points,),
                tuple(scales))
        if cfg.reset_between_stages:
            opt_state = None
        elif stage == 1:
            opt_state = init_outer_state(u0, stage_cfg)
        else:
            opt_state = _grown_state(opt_state, u0, stage_cfg)
        try:
            # ArrayAdam steps in place, so opt_state carries the stage's final
            # moments when continuation is on; the clip EMA comes back via meta
            u, history = run_distillation(stage_cfg, train, test, u0=u0,
                                          clip_state0=clip_state,
                                          opt_state0=opt_state)
        except DdistError as exc:
            exc.stage = stage
            exc.args = (f"stage {stage}: {exc.args[0]}",) + exc.args[1:] \
                if exc.args else (f"stage {stage}",)
            raise
        if not cfg.reset_between_stages:
            clip_state = EmaClipState(history.meta["ema_norm"],
                                      history.meta["ema_initialized"])
        result.histories.append(history)
        result.stage_datasets.append(u.copy())
    result.dataset = u
    return result
