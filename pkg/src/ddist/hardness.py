"""Example-hardness toolkit: forgetting counts over training trajectories,
disagreement across networks trained on a distilled set, and the weighted
target sampler built on either score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import models
from .data import DatasetSplit, one_hot
from .errors import ConfigError, ContractError, ShapeError
from .evaluation import EvalConfig, train_network
from .models import ArchitectureSpec
from .seeding import derive_seed


@dataclass
class HardnessTable:
    scores: np.ndarray          # integer scores, one per example
    raw: np.ndarray             # pre-rounding means (floats)
    kind: str                   # "forgetting" | "disagreement"
    n_runs: int

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.int64)
        self.raw = np.asarray(self.raw, dtype=np.float64)
        if self.scores.shape != self.raw.shape:
            raise ShapeError("HardnessTable: scores and raw shapes differ")
        if self.kind not in ("forgetting", "disagreement"):
            raise ConfigError(f"unknown hardness kind {self.kind!r}")
        if self.scores.size and self.scores.min() < 0:
            raise ContractError("hardness scores must be >= 0")
        if self.kind == "disagreement" and self.scores.size \
                and self.scores.max() > self.n_runs:
            raise ContractError("disagreement scores bounded by the network count")


@dataclass
class SamplerWeights:
    weights: np.ndarray
    thr: float
    center: float


def forgetting_events(row) -> int:
    """Count of correct-then-wrong transitions along one correctness row."""
    row = np.asarray(row, dtype=bool)
    if row.size == 0:
        raise ContractError("forgetting_events: empty trace")
    return int(np.sum(row[:-1] & ~row[1:]))


def forgetting_scores(split: DatasetSplit, spec: ArchitectureSpec,
                      cfg: EvalConfig, n_seeds: int = 10,
                      seed: int = 0) -> HardnessTable:
    """Mean forgetting count per training example over fresh initializations.

    The rounded scores (half rounds up) are what stratified reports use; the
    raw means ride along.
    """
    if n_seeds < 1:
        raise ConfigError("forgetting_scores: n_seeds must be >= 1")
    labels = one_hot(split.labels, split.classes)
    counts = np.zeros((n_seeds, split.n))
    for i in range(n_seeds):
        _, trace = train_network(split.inputs, labels, spec, cfg,
                                 derive_seed(seed, "forget-run", i),
                                 record_on=(split.inputs, split.labels))
        counts[i] = np.sum(trace[:-1] & ~trace[1:], axis=0)
    raw = counts.mean(axis=0)
    return HardnessTable(np.floor(raw + 0.5), raw, "forgetting", n_seeds)


def adaptive_hardness(u, target_split: DatasetSplit, spec: ArchitectureSpec,
                      cfg: EvalConfig, n_nets: int = 8,
                      seed: int = 0) -> HardnessTable:
    """Per-example misclassification count across n_nets networks trained
    on the distilled set `u`."""
    if n_nets < 2:
        raise ConfigError("adaptive_hardness: n_nets must be >= 2")
    wrong = np.zeros(target_split.n, dtype=np.int64)
    for i in range(n_nets):
        params, _ = train_network(u.inputs, u.soft_labels, spec, cfg,
                                  derive_seed(seed, "hardness-net", i))
        with ad.no_grad():
            logits = models.forward(spec, params,
                                    ad.constant(target_split.inputs)).data
        wrong += logits.argmax(axis=1) != target_split.labels
    return HardnessTable(wrong, wrong.astype(np.float64), "disagreement", n_nets)


def sampler_weights(table, thr: float, center="literal") -> SamplerWeights:
    """w = thr + |score - center|; the literal center stays 4 regardless of
    the network count unless the half-count variant is asked for."""
    if thr <= 0:
        raise ContractError("sampler_weights: thr must be > 0")
    scores = np.asarray(getattr(table, "scores", table), dtype=np.float64)
    if center == "literal":
        c = 4.0
    elif center == "half":
        if not hasattr(table, "n_runs"):
            raise ConfigError("center='half' needs a HardnessTable")
        c = table.n_runs / 2.0
    else:
        c = float(center)
    return SamplerWeights(thr + np.abs(scores - c), float(thr), c)


def weighted_batch(weights, batch_size: int, rng: np.random.Generator):
    """Indices sampled without replacement with probability proportional to
    the weights; zero-weight entries never appear."""
    w = np.asarray(getattr(weights, "weights", weights), dtype=np.float64)
    if w.ndim != 1 or np.any(w < 0):
        raise ContractError("weighted_batch: weights must be a nonnegative vector")
    total = w.sum()
    if total <= 0:
        raise ContractError("weighted_batch: weights sum to zero")
    support = int(np.count_nonzero(w))
    if batch_size > w.size or batch_size > support:
        raise ContractError(
            f"weighted_batch: batch {batch_size} exceeds {support} sampleable points")
    return np.sort(rng.choice(w.size, size=batch_size, replace=False, p=w / total))


def hardness_csv(table: HardnessTable) -> str:
    lines = ["example_index,score,raw_mean"]
    for i, (score, raw) in enumerate(zip(table.scores, table.raw)):
        lines.append(f"{i},{score},{raw:.6f}")
    return "\n".join(lines) + "\n"
