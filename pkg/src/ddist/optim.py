"""Optimizer steps expressed as graph operations.

sgd_step and adam_step build the update arithmetic out of autodiff ops, so an
unrolled trajectory theta_0..theta_T is a single differentiable graph.  The
plain-array Adam at the bottom serves the loops that never need gradients of
gradients (outer updates, evaluation training).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError
from .models import ParamVector

# added under the square root so a coordinate whose gradient history is all
# zeros keeps a finite derivative through the update (0 * 1/sqrt(tiny) = 0
# instead of 0 * inf = nan); shifts the denominator by <= 1e-12
_SQRT_GUARD = 1e-24


@dataclass(frozen=True)
class InnerOptConfig:
    kind: str = "adam"
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    reset_state_in_window: bool = False

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown inner optimizer {self.kind!r}")
        if self.lr <= 0:
            raise ConfigError("inner lr must be > 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ConfigError("adam eps must be > 0")


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0


def init_adam_state(params: ParamVector) -> AdamState:
    zeros = [ad.constant(np.zeros_like(p.data)) for p in params]
    return AdamState(m=list(zeros),
                     v=[ad.constant(np.zeros_like(p.data)) for p in params],
                     t=0)


def _check_shapes(op, params, grads):
    if len(grads) != len(params.values):
        raise ShapeError(f"{op}: {len(grads)} grads for {len(params.values)} params")
    for p, g in zip(params.values, grads):
        if p.data.shape != g.data.shape:
            raise ShapeError(f"{op}: grad shape {g.data.shape} != param {p.data.shape}")


def sgd_step(params: ParamVector, grads, cfg: InnerOptConfig) -> ParamVector:
    """theta' = theta - lr * g, as graph ops."""
    grads = [ad.as_value(g) for g in grads]
    _check_shapes("sgd_step", params, grads)
    updated = [ad.sub(p, ad.scale(g, cfg.lr)) for p, g in zip(params.values, grads)]
    return ParamVector(params.names, updated)


def adam_step(params: ParamVector, grads, state: AdamState, cfg: InnerOptConfig):
    """One Adam update with bias correction; returns (params', state')."""
    grads = [ad.as_value(g) for g in grads]
    _check_shapes("adam_step", params, grads)
    t = state.t + 1
    corr1 = 1.0 - cfg.beta1 ** t
    corr2 = 1.0 - cfg.beta2 ** t
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params.values, grads, state.m, state.v):
        m1 = ad.add(ad.scale(m, cfg.beta1), ad.scale(g, 1.0 - cfg.beta1))
        v1 = ad.add(ad.scale(v, cfg.beta2), ad.scale(ad.mul(g, g), 1.0 - cfg.beta2))
        m_hat = ad.scale(m1, 1.0 / corr1)
        v_hat = ad.scale(v1, 1.0 / corr2)
        denom = ad.add(ad.sqrt(ad.add(v_hat, _SQRT_GUARD)), cfg.eps)
        new_p.append(ad.sub(p, ad.scale(ad.div(m_hat, denom), cfg.lr)))
        new_m.append(m1)
        new_v.append(v1)
    return ParamVector(params.names, new_p), AdamState(new_m, new_v, t)


def detach(x):
    """Same values, no graph history. Accepts GraphValue, ParamVector, AdamState."""
    if isinstance(x, ad.GraphValue):
        return ad.detach(x)
    if isinstance(x, ParamVector):
        return ParamVector(x.names, [ad.detach(v) for v in x.values])
    if isinstance(x, AdamState):
        return AdamState([ad.detach(m) for m in x.m],
                         [ad.detach(v) for v in x.v], x.t)
    raise TypeError(f"detach: unsupported type {type(x).__name__}")


class ArrayAdam:
    """Adam on plain numpy arrays, for loops that never differentiate through it."""

    def __init__(self, shapes, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        """Update `params` in place from `grads` (lists of arrays)."""
        self.t += 1
        corr1 = 1.0 - self.beta1 ** self.t
        corr2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)
