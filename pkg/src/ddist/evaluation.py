"""Evaluation protocol: train fresh networks on a distilled set, report
mean and standard deviation over seeds, plus subsample-degradation curves
and hardness-stratified accuracy.

`train_network` is the shared training loop; the hardness module reuses it
for its per-epoch correctness traces.  Any object exposing `.inputs` and
`.soft_labels` can be evaluated (the driver's dataset type, or a plain
namespace in tests).
"""

from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from . import autodiff as ad
from . import models
from .data import DatasetSplit, one_hot
from .errors import ConfigError, ContractError, DivergenceError, ShapeError
from .estimators import PARAM_ABS_LIMIT
from .models import ArchitectureSpec
from .optim import ArrayAdam
from .seeding import derive_rng


@dataclass(frozen=True)
class EvalConfig:
    steps: int = 300
    lr: float = 0.001
    batch: int | None = None     # None trains full-batch
    loss: str = "soft_ce"

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("eval steps must be >= 1")
        if self.lr <= 0:
            raise ConfigError("eval lr must be > 0")
        if self.batch is not None and self.batch < 1:
            raise ConfigError("eval batch must be >= 1 or null")
        if self.loss not in models.LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}")


@dataclass
class EvalReport:
    mean: float
    std: float
    per_seed: tuple
    seeds: tuple
    diverged: tuple
    steps: int
    lr: float

    @property
    def n_seeds(self) -> int:
        return len(self.per_seed)

    def to_json(self) -> dict:
        return {"mean": self.mean, "std": self.std,
                "per_seed": list(self.per_seed), "seeds": list(self.seeds),
                "diverged": list(self.diverged), "steps": self.steps,
                "lr": self.lr}


def _guard(arrays, step):
    for a in arrays:
        peak = np.max(np.abs(a)) if a.size else 0.0
        if not np.isfinite(peak) or peak > PARAM_ABS_LIMIT:
            raise DivergenceError(step, f"|theta| peak {peak!r}")


def train_network(inputs, soft_labels, spec: ArchitectureSpec, cfg: EvalConfig,
                  seed: int, record_on=None):
    """Train one fresh network; returns (ParamVector, correctness trace).

    The trace (None unless `record_on` is given) holds one boolean row per
    epoch: whether each of record_on's examples is classified correctly at
    that epoch's end.  An epoch is one pass over the training set, so with
    full-batch training every step closes an epoch.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    soft_labels = np.asarray(soft_labels, dtype=np.float64)
    n = inputs.shape[0]
    init = models.init_params(spec, seed)
    names = init.names
    params = [v.data.copy() for v in init.values]
    adam = ArrayAdam([p.shape for p in params], lr=cfg.lr)
    batch = n if cfg.batch is None else min(cfg.batch, n)
    steps_per_epoch = -(-n // batch)
    rng = derive_rng(seed, "eval-batch")
    loss_fn = models.LOSSES[cfg.loss]
    trace = [] if record_on is not None else None

    for step in range(cfg.steps):
        if batch == n:
            x, y = inputs, soft_labels
        else:
            idx = rng.choice(n, size=batch, replace=False)
            x, y = inputs[idx], soft_labels[idx]
        leaves = [ad.leaf(p, requires_grad=True) for p in params]
        pv = models.ParamVector(names, leaves)
        loss = loss_fn(models.forward(spec, pv, ad.constant(x)), ad.constant(y))
        grads = ad.gradient(loss, leaves)
        adam.step(params, grads)
        _guard(params, step)
        if trace is not None and (step + 1) % steps_per_epoch == 0:
            trace.append(_correctness(spec, names, params, *record_on))
    return models.ParamVector(names, [ad.constant(p) for p in params]), \
        (np.asarray(trace, dtype=bool) if trace is not None else None)


def _predict(spec, names, param_arrays, x):
    with ad.no_grad():
        pv = models.ParamVector(names, [ad.constant(p) for p in param_arrays])
        return models.forward(spec, pv, ad.constant(x)).data


def _correctness(spec, names, param_arrays, x, labels):
    pred = _predict(spec, names, param_arrays, x).argmax(axis=1)
    return pred == np.asarray(labels)


def network_accuracy(spec, params: models.ParamVector, split: DatasetSplit) -> float:
    with ad.no_grad():
        logits = models.forward(spec, params, ad.constant(split.inputs)).data
    return models.accuracy(logits, split.labels)


def evaluate_distilled(u, test_split: DatasetSplit, spec: ArchitectureSpec,
                       cfg: EvalConfig, seeds) -> EvalReport:
    """Mean/std test accuracy of fresh networks trained on `u`.

    Seeds whose training diverges are excluded from the aggregate and listed
    in the report; if every seed diverges there is nothing to aggregate and
    that is an error, not an empty report.
    """
    seeds = tuple(int(s) for s in seeds)
    if not seeds:
        raise ContractError("evaluate_distilled: empty seed list")
    accs, kept, diverged = [], [], []
    for seed in seeds:
        try:
            params, _ = train_network(u.inputs, u.soft_labels, spec, cfg, seed)
        except DivergenceError:
            diverged.append(seed)
            continue
        kept.append(seed)
        accs.append(network_accuracy(spec, params, test_split))
    if not accs:
        raise ContractError(f"every evaluation seed diverged: {diverged}")
    arr = np.asarray(accs)
    return EvalReport(float(arr.mean()), float(arr.std()), tuple(accs),
                      tuple(kept), tuple(diverged), cfg.steps, cfg.lr)


# ---------------------------------------------------------------------------
# subsample-degradation curves

def _balanced_subset(classes_of, per_class: int, rng: np.random.Generator):
    picked = []
    for c in np.unique(classes_of):
        pool = np.flatnonzero(classes_of == c)
        if per_class > pool.size:
            raise ContractError(
                f"subsample size {per_class} exceeds {pool.size} points of class {c}")
        picked.append(rng.choice(pool, size=per_class, replace=False))
    return np.sort(np.concatenate(picked))


def subsample_eval(u, sizes, rng: np.random.Generator, test_split: DatasetSplit,
                   spec: ArchitectureSpec, cfg: EvalConfig, seeds,
                   real_split: DatasetSplit | None = None,
                   direct_sets: dict | None = None):
    """Accuracy of random class-balanced subsets of `u`, one row per size.

    Each row also carries a real-data baseline of equal size (when
    `real_split` is given) and a directly distilled set of that size (when
    provided in `direct_sets`).  At the full size the subset is the whole set
    in original order, so its report matches evaluate_distilled exactly.
    """
    u_classes = np.asarray(u.soft_labels).argmax(axis=1)
    rows = []
    for size in sizes:
        idx = _balanced_subset(u_classes, size, rng)
        sub = SimpleNamespace(inputs=u.inputs[idx], soft_labels=u.soft_labels[idx])
        row = {"size": int(size),
               "distilled": evaluate_distilled(sub, test_split, spec, cfg, seeds),
               "real": None, "direct": None}
        if real_split is not None:
            ridx = _balanced_subset(real_split.labels, size, rng)
            real_u = SimpleNamespace(
                inputs=real_split.inputs[ridx],
                soft_labels=one_hot(real_split.labels[ridx], real_split.classes))
            row["real"] = evaluate_distilled(real_u, test_split, spec, cfg, seeds)
        if direct_sets and size in direct_sets:
            row["direct"] = evaluate_distilled(direct_sets[size], test_split,
                                               spec, cfg, seeds)
        rows.append(row)
    return rows


def subsample_curve_csv(rows) -> str:
    out = ["size,distilled_sub_mean,distilled_sub_std,real_mean,real_std,"
           "direct_mean,direct_std"]
    for row in rows:
        cells = [str(row["size"]),
                 f"{row['distilled'].mean:.6f}", f"{row['distilled'].std:.6f}"]
        for key in ("real", "direct"):
            rep = row[key]
            cells += ["", ""] if rep is None else [f"{rep.mean:.6f}", f"{rep.std:.6f}"]
        out.append(",".join(cells))
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# hardness-stratified accuracy

def stratified_accuracy(correct, scores):
    """Per-score accuracy and score histogram; empty strata are omitted.

    `scores` may be an integer array or anything with a `.scores` attribute.
    """
    scores = np.asarray(getattr(scores, "scores", scores))
    correct = np.asarray(correct, dtype=bool)
    if correct.shape != scores.shape:
        raise ShapeError(
            f"stratified_accuracy: {correct.shape} correctness vs {scores.shape} scores")
    accuracy, histogram = {}, {}
    for score in np.unique(scores):
        mask = scores == score
        histogram[int(score)] = int(mask.sum())
        accuracy[int(score)] = float(correct[mask].mean())
    return accuracy, histogram
