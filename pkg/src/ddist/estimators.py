"""Meta-gradient estimators over an unrolled inner training run.

Four variants of the same computation: train a network on the distilled set
for N steps, measure its loss on a batch of real data, and differentiate that
loss back to the distilled points through the last M updates.

    bptt     N = T, window [0, T)        (backprop through everything)
    tbptt    N = T, window [T-M, T)      (truncated to the last M steps)
    rbptt    N ~ U{1..T}, window [0, N)  (full backprop, random unroll length)
    ratbptt  N ~ U{M..T}, window [N-M, N)

Steps before the window run without cross-step graph tracking; parameters and
optimizer state are detached at the window entry, so graph memory scales with
M rather than N.  Arithmetic is identical in both phases (same graph ops), so
theta_N is bit-equal whether or not a step was tracked.
"""

from __future__ import annotations

from contextlib import nullcontext
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import models, optim
from .errors import ConfigError, ContractError, DivergenceError
from .models import ArchitectureSpec, ParamVector
from .optim import AdamState, InnerOptConfig
from .seeding import derive_rng, derive_seed

ESTIMATORS = ("bptt", "tbptt", "rbptt", "ratbptt")

PARAM_ABS_LIMIT = 1e6

# inner mini-batches default to all of the distilled set when it is small
FULL_BATCH_THRESHOLD = 500


@dataclass(frozen=True)
class UnrollConfig:
    total_steps: int = 30          # T
    window_size: int = 10          # M
    estimator: str = "ratbptt"
    inner: InnerOptConfig = field(default_factory=InnerOptConfig)
    loss: str = "soft_ce"
    inner_batch: int | None = None
    resample: str = "per_outer_step"
    resample_every: int = 25

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {self.estimator!r}")
        if self.window_size < 1:
            raise ConfigError("window size M must be >= 1")
        if self.window_size > self.total_steps:
            raise ConfigError(
                f"M ≤ T violated: M={self.window_size}, T={self.total_steps}")
        if self.estimator in ("bptt", "rbptt") and self.window_size != self.total_steps:
            raise ConfigError(f"{self.estimator} requires M=T (window covers all tracked steps)")
        if self.loss not in models.LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.resample not in ("per_outer_step", "per_outer_epoch"):
            raise ConfigError(f"unknown resample policy {self.resample!r}")
        if self.resample == "per_outer_epoch" and self.resample_every < 1:
            raise ConfigError("resample_every must be >= 1")
        if self.inner_batch is not None and self.inner_batch < 1:
            raise ConfigError("inner_batch must be >= 1 or null")


@dataclass(frozen=True)
class WindowSample:
    """Sampled unroll length N and the first tracked step."""

    n_steps: int
    start: int

    def __post_init__(self):
        if not (0 <= self.start < self.n_steps):
            raise ContractError(f"window [{self.start}, {self.n_steps}) is empty")

    @property
    def length(self) -> int:
        return self.n_steps - self.start

    def check(self, cfg: UnrollConfig) -> None:
        t, m = cfg.total_steps, cfg.window_size
        if self.n_steps > t:
            raise ContractError(f"window N={self.n_steps} exceeds T={t}")
        if cfg.estimator == "bptt" and (self.n_steps, self.start) != (t, 0):
            raise ContractError("bptt window must be [0, T)")
        if cfg.estimator == "tbptt" and (self.n_steps, self.start) != (t, t - m):
            raise ContractError("tbptt window must be [T-M, T)")
        if cfg.estimator == "ratbptt" and (self.start != self.n_steps - m
                                           or self.n_steps < m):
            raise ContractError("ratbptt window must be [N-M, N) with N >= M")
        if cfg.estimator == "rbptt" and self.start != 0:
            raise ContractError("rbptt window must be [0, N)")


@dataclass
class MetaGradient:
    grad_inputs: np.ndarray
    grad_labels: np.ndarray | None
    norm: float
    outer_loss: float
    n_steps: int


@dataclass
class InnerState:
    """Plain-array snapshot of an inner run (params + optimizer state)."""

    names: tuple
    params: list
    m: list | None
    v: list | None
    t: int
    step: int


@dataclass
class UnrollResult:
    params: ParamVector            # theta_N, tracked through the window
    inputs_leaf: ad.GraphValue
    labels_leaf: ad.GraphValue
    window: WindowSample
    node_count: int


def sample_window(cfg: UnrollConfig, rng: np.random.Generator) -> WindowSample:
    """Draw this step's unroll length and window position."""
    t, m = cfg.total_steps, cfg.window_size
    if cfg.estimator == "bptt":
        return WindowSample(t, 0)
    if cfg.estimator == "tbptt":
        return WindowSample(t, t - m)
    if cfg.estimator == "ratbptt":
        n = int(rng.integers(m, t + 1))
        return WindowSample(n, n - m)
    n = int(rng.integers(1, t + 1))  # rbptt
    return WindowSample(n, 0)


def _check_divergence(params: ParamVector, step: int) -> None:
    for v in params.values:
        peak = np.max(np.abs(v.data)) if v.data.size else 0.0
        if not np.isfinite(peak) or peak > PARAM_ABS_LIMIT:
            raise DivergenceError(step, f"|theta| peak {float(peak):g}")


def _batch_indices(cfg: UnrollConfig, n_points: int, inner_seed: int, step: int):
    k = cfg.inner_batch
    if k is None:
        if n_points <= FULL_BATCH_THRESHOLD:
            return None
        k = FULL_BATCH_THRESHOLD
    if k >= n_points:
        return None
    rng = derive_rng(inner_seed, "inner-batch", step)
    return np.sort(rng.choice(n_points, size=k, replace=False))


def _one_step(arch, cfg, params, astate, inputs_src, labels_src, step,
              n_points, inner_seed, tracked):
    """Advance theta one inner update; returns (params', astate')."""
    idx = _batch_indices(cfg, n_points, inner_seed, step)
    if idx is None:
        x, y = inputs_src, labels_src
    else:
        x = ad.take_rows(inputs_src, idx)
        y = ad.take_rows(labels_src, idx)
    loss = models.LOSSES[cfg.loss](models.forward(arch, params, x), y)
    grads = ad.gradient(loss, params.values, create_graph=tracked, stop_at_wrt=True)
    ctx = nullcontext() if tracked else ad.no_grad()
    with ctx:
        if not tracked:
            grads = [ad.constant(g) for g in grads]
        if cfg.inner.kind == "sgd":
            new_params = optim.sgd_step(params, grads, cfg.inner)
            new_state = astate
        else:
            new_params, new_state = optim.adam_step(params, grads, astate, cfg.inner)
    if not tracked:
        for v in new_params.values:
            v.requires_grad = True
    _check_divergence(new_params, step)
    return new_params, new_state


def _fresh_inner_state(theta0: ParamVector, cfg: UnrollConfig) -> InnerState:
    arrays = [np.asarray(v.data, dtype=np.float64) for v in theta0.values]
    if cfg.inner.kind == "adam":
        m = [np.zeros_like(a) for a in arrays]
        v = [np.zeros_like(a) for a in arrays]
    else:
        m = v = None
    return InnerState(theta0.names, arrays, m, v, t=0, step=0)


def _state_to_graph(state: InnerState, requires_grad: bool):
    params = ParamVector(state.names,
                         [ad.leaf(a, requires_grad=requires_grad) for a in state.params])
    if state.m is None:
        return params, None
    astate = AdamState([ad.constant(a) for a in state.m],
                       [ad.constant(a) for a in state.v], state.t)
    return params, astate


def _graph_to_state(names, params: ParamVector, astate, step: int) -> InnerState:
    return InnerState(names,
                      [v.data for v in params.values],
                      None if astate is None else [m.data for m in astate.m],
                      None if astate is None else [v.data for v in astate.v],
                      0 if astate is None else astate.t,
                      step)


def prefix_state(arch: ArchitectureSpec, theta0: ParamVector, u, cfg: UnrollConfig,
                 n_steps: int, inner_seed: int) -> InnerState:
    """Run the untracked prefix [0, n_steps) and snapshot the inner state."""
    state = _fresh_inner_state(theta0, cfg)
    inputs_src = ad.constant(u.inputs)
    labels_src = ad.constant(u.soft_labels)
    n_points = u.inputs.shape[0]
    for n in range(n_steps):
        params, astate = _state_to_graph(state, requires_grad=True)
        params, astate = _one_step(arch, cfg, params, astate, inputs_src, labels_src,
                                   n, n_points, inner_seed, tracked=False)
        state = _graph_to_state(state.names, params, astate, n + 1)
    return state


def _run_window(arch, cfg, state: InnerState, inputs_src, labels_src, window,
                inner_seed, tracked):
    """Advance from the window entry to theta_N; shared by both routes."""
    if cfg.inner.reset_state_in_window and state.m is not None:
        state = replace(state, m=[np.zeros_like(a) for a in state.m],
                        v=[np.zeros_like(a) for a in state.v], t=0)
    params, astate = _state_to_graph(state, requires_grad=True)
    n_points = inputs_src.data.shape[0]
    for n in range(window.start, window.n_steps):
        params, astate = _one_step(arch, cfg, params, astate, inputs_src, labels_src,
                                   n, n_points, inner_seed, tracked=tracked)
    return params, astate


def unroll_inner(arch: ArchitectureSpec, theta0: ParamVector, u, cfg: UnrollConfig,
                 window: WindowSample, inner_seed: int) -> UnrollResult:
    """Unroll N inner steps, tracking only the window; theta_N depends
    differentiably on the distilled data through the window alone."""
    window.check(cfg)
    state = prefix_state(arch, theta0, u, cfg, window.start, inner_seed)
    inputs_leaf = ad.leaf(u.inputs, requires_grad=True)
    labels_leaf = ad.leaf(u.soft_labels, requires_grad=bool(u.labels_learnable))
    params, _ = _run_window(arch, cfg, state, inputs_leaf, labels_leaf, window,
                            inner_seed, tracked=True)
    return UnrollResult(params, inputs_leaf, labels_leaf, window,
                        ad.count_nodes(params.values))


def window_objective(arch: ArchitectureSpec, state: InnerState, u_inputs, u_labels,
                     cfg: UnrollConfig, window: WindowSample, target_x, target_y,
                     inner_seed: int) -> float:
    """Outer loss as a plain function of the distilled arrays, holding the
    pre-window state fixed.  This is the objective whose exact gradient the
    truncated estimators compute; finite differences of it are the oracle."""
    inputs_src = ad.constant(np.asarray(u_inputs, dtype=np.float64))
    labels_src = ad.constant(np.asarray(u_labels, dtype=np.float64))
    params, _ = _run_window(arch, cfg, state, inputs_src, labels_src, window,
                            inner_seed, tracked=False)
    with ad.no_grad():
        loss = models.LOSSES[cfg.loss](models.forward(arch, params, ad.constant(target_x)),
                                       ad.constant(target_y))
    return float(loss.data)


def meta_gradient(estimator: str, u, target_x, target_y, arch: ArchitectureSpec,
                  cfg: UnrollConfig, seed: int, window: WindowSample | None = None
                  ) -> MetaGradient:
    """One estimate of the outer gradient w.r.t. the distilled dataset.

    Deterministic given `seed`: the window draw, theta_0 init, and inner batch
    indices each come from independent derived streams, so two estimators fed
    the same seed share everything except the window itself.  Passing `window`
    overrides the draw (used to condition on N in equivalence checks).
    """
    if estimator not in ESTIMATORS:
        raise ConfigError(f"unknown estimator {estimator!r}")
    if np.asarray(target_x).shape[0] == 0:
        raise ContractError("meta_gradient: empty target batch")
    if estimator != cfg.estimator:
        cfg = replace(cfg, estimator=estimator)
    if window is None:
        window = sample_window(cfg, derive_rng(seed, "window"))
    window.check(cfg)

    theta0 = models.init_params(arch, derive_seed(seed, "init"))
    inner_seed = derive_seed(seed, "inner")
    result = unroll_inner(arch, theta0, u, cfg, window, inner_seed)

    loss = models.LOSSES[cfg.loss](
        models.forward(arch, result.params, ad.constant(target_x)),
        ad.constant(np.asarray(target_y, dtype=np.float64)))
    outer_loss = float(loss.data)
    wrt = [result.inputs_leaf]
    if u.labels_learnable:
        wrt.append(result.labels_leaf)
    grads = ad.gradient(loss, wrt)
    grad_inputs = grads[0]
    grad_labels = grads[1] if u.labels_learnable else None
    sq = float(np.sum(grad_inputs ** 2))
    if grad_labels is not None:
        sq += float(np.sum(grad_labels ** 2))
    return MetaGradient(grad_inputs, grad_labels, float(np.sqrt(sq)),
                        outer_loss, window.n_steps)


@dataclass
class GradNormStats:
    mean: float
    std: float
    max: float
    series: tuple


def grad_norm_stats(norms) -> GradNormStats:
    """Summary of a gradient-norm stream; std is the population convention."""
    series = tuple(float(x) for x in norms)
    if not series:
        raise ContractError("grad_norm_stats: empty stream")
    arr = np.asarray(series)
    return GradNormStats(float(arr.mean()), float(arr.std()), float(arr.max()), series)
