"""Command-line entry point.

A run is described by a JSON config; every key has a documented default and
unknown keys are rejected by their JSON path, so the resolved config written
next to the artifacts is a complete, replayable record.  All artifacts
(checkpoints, JSON-lines history, CSV curves, PPM grids) are byte-deterministic
for a fixed resolved config; wall-clock information goes to run.log only.

Exit codes: 0 success, 2 configuration error, 3 runtime error (divergence,
contract violations), 4 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .boosting import BoostConfig, boost_distill, prefix_blocks
from .data import (DatasetSplit, load_csv, load_idx, make_synthetic,
                   write_ppm_grid, zca_apply, zca_fit, zca_invert)
from .driver import (DistillationConfig, HardnessSamplerConfig,
                     load_checkpoint, run_distillation, save_checkpoint)
from .errors import ConfigError, DdistError, DivergenceError, FormatError
from .estimators import ESTIMATORS, UnrollConfig
from .evaluation import (EvalConfig, evaluate_distilled, subsample_curve_csv,
                         subsample_eval)
from .hardness import adaptive_hardness, forgetting_scores, hardness_csv
from .models import ArchitectureSpec
from .optim import InnerOptConfig
from .seeding import derive_rng, derive_seed

OUTPUT_ROOT_ENV = "DDIST_OUT"

DEFAULTS = {
    "run_id": "run",
    "output_dir": None,
    "seed": 0,
    "jobs": 1,
    "data": {
        "source": "synthetic",
        "kind": "gaussian_blobs",
        "classes": 3,
        "train_per_class": 100,
        "test_per_class": 100,
        "noise": 0.5,
        "radius": 2.0,
        "seed": 0,
        "train_images": None,
        "train_labels": None,
        "test_images": None,
        "test_labels": None,
        "train_csv": None,
        "test_csv": None,
        "zca": False,
        "zca_lambda": 0.1,
    },
    "arch": {
        "kind": "mlp",
        "hidden": [32],
        "input_shape": [2],
        "classes": 3,
        "normalization": "none",
        "activation": "relu",
        "width_multiplier": 1,
    },
    "unroll": {
        "T": 30,
        "M": 10,
        "estimator": "ratbptt",
        "loss": "soft_ce",
        "inner_batch": None,
        "resample": "per_outer_step",
        "resample_every": 25,
        "inner": {
            "kind": "adam",
            "lr": 0.001,
            "beta1": 0.9,
            "beta2": 0.999,
            "eps": 1e-8,
            "reset_state_in_window": False,
        },
    },
    "distill": {
        "ipc": 1,
        "outer_lr": 0.001,
        "outer_steps": 100,
        "target_batch": 512,
        "eval_every": 50,
        "labels_learnable": False,
        "clip_factor": 2.0,
        "ema_decay": 0.9,
        "eval_seeds": 3,
        "augment_flip": False,
    },
    "eval": {
        "steps": 300,
        "lr": 0.001,
        "batch": None,
        "loss": "soft_ce",
    },
    "boost": {
        "block_size": None,
        "n_blocks": 1,
        "beta": 0.0,
        "stage_steps": 100,
        "reset_between_stages": True,
    },
    "hardness": {
        "n_seeds": 10,
        "n_nets": 8,
        "steps": 100,
        "lr": 0.001,
    },
    "hardness_sampler": None,
}

# sections whose default is null but that accept an object with these keys
NULLABLE_SECTIONS = {
    "hardness_sampler": {
        "thr": 1.0,
        "n_nets": 8,
        "activation_step": 0,
        "refresh_every": 50,
        "center": "literal",
        "steps": 100,
        "lr": 0.001,
    },
}


def _check_scalar(path, default, value):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected boolean, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected number, got {value!r}")
        if isinstance(value, float):
            if not value.is_integer():
                raise ConfigError(f"{path}: expected integer, got {value!r}")
            value = int(value)
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected string, got {value!r}")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected list, got {value!r}")
    return value


def _merge(defaults, user, prefix=""):
    out = copy.deepcopy(defaults)
    if not isinstance(user, dict):
        raise ConfigError(f"{prefix or 'config'}: expected object, got {user!r}")
    for key, value in user.items():
        path = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown config key {path!r}")
        if key in NULLABLE_SECTIONS and prefix == "":
            out[key] = None if value is None else _merge(
                NULLABLE_SECTIONS[key], value, path + ".")
        elif isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], value, path + ".")
        else:
            out[key] = _check_scalar(path, defaults[key], value)
    return out


def _apply_override(user: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"--set needs KEY=VALUE, got {item!r}")
    key, _, raw = item.partition("=")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # unquoted strings are taken literally
    node = user
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {key}: {part} is not an object")
    node[parts[-1]] = value


@dataclass
class RunConfig:
    tree: dict
    out_root: Path

    @property
    def run_id(self) -> str:
        return self.tree["run_id"]

    @property
    def run_dir(self) -> Path:
        return self.out_root / self.run_id

    @property
    def seed(self) -> int:
        return self.tree["seed"]

    def arch(self) -> ArchitectureSpec:
        a = self.tree["arch"]
        try:
            return ArchitectureSpec(
                kind=a["kind"], hidden=tuple(a["hidden"]),
                input_shape=tuple(a["input_shape"]), classes=a["classes"],
                normalization=a["normalization"], activation=a["activation"],
                width_multiplier=a["width_multiplier"])
        except ConfigError as exc:
            raise ConfigError(f"arch: {exc}") from None

    def unroll(self) -> UnrollConfig:
        t = self.tree["unroll"]
        inner = t["inner"]
        try:
            return UnrollConfig(
                total_steps=t["T"], window_size=t["M"],
                estimator=t["estimator"],
                inner=InnerOptConfig(
                    kind=inner["kind"], lr=inner["lr"], beta1=inner["beta1"],
                    beta2=inner["beta2"], eps=inner["eps"],
                    reset_state_in_window=inner["reset_state_in_window"]),
                loss=t["loss"], inner_batch=t["inner_batch"],
                resample=t["resample"], resample_every=t["resample_every"])
        except ConfigError as exc:
            raise ConfigError(f"unroll: {exc}") from None

    def eval_config(self) -> EvalConfig:
        e = self.tree["eval"]
        try:
            return EvalConfig(steps=e["steps"], lr=e["lr"], batch=e["batch"],
                              loss=e["loss"])
        except ConfigError as exc:
            raise ConfigError(f"eval: {exc}") from None

    def hardness_sampler(self) -> HardnessSamplerConfig | None:
        h = self.tree["hardness_sampler"]
        if h is None:
            return None
        try:
            return HardnessSamplerConfig(
                thr=h["thr"], n_nets=h["n_nets"],
                activation_step=h["activation_step"],
                refresh_every=h["refresh_every"],
                train=EvalConfig(steps=h["steps"], lr=h["lr"]),
                center=h["center"])
        except ConfigError as exc:
            raise ConfigError(f"hardness_sampler: {exc}") from None

    def distillation(self) -> DistillationConfig:
        d = self.tree["distill"]
        try:
            return DistillationConfig(
                arch=self.arch(), unroll=self.unroll(), ipc=d["ipc"],
                outer_lr=d["outer_lr"], outer_steps=d["outer_steps"],
                target_batch=d["target_batch"], eval_every=d["eval_every"],
                seed=self.seed, labels_learnable=d["labels_learnable"],
                clip_factor=d["clip_factor"], ema_decay=d["ema_decay"],
                eval_cfg=self.eval_config(), eval_seeds=d["eval_seeds"],
                augment_flip=d["augment_flip"],
                hardness=self.hardness_sampler())
        except ConfigError as exc:
            msg = str(exc)
            raise ConfigError(msg if ":" in msg else f"distill: {msg}") from None

    def boost(self) -> BoostConfig:
        b = self.tree["boost"]
        block = b["block_size"]
        if block is None:
            block = self.tree["arch"]["classes"]
        try:
            return BoostConfig(base=self.distillation(), block_size=block,
                               n_blocks=b["n_blocks"], beta=b["beta"],
                               stage_steps=b["stage_steps"],
                               reset_between_stages=b["reset_between_stages"])
        except ConfigError as exc:
            msg = str(exc)
            raise ConfigError(msg if ":" in msg else f"boost: {msg}") from None

    def load_data(self):
        """Returns (train, test, zca transform or None)."""
        d = self.tree["data"]
        if d["source"] == "synthetic":
            if d["classes"] != self.tree["arch"]["classes"]:
                raise ConfigError(
                    f"arch.classes ({self.tree['arch']['classes']}) != "
                    f"data.classes ({d['classes']})")
            train, test = make_synthetic(
                d["kind"], classes=d["classes"],
                train_per_class=d["train_per_class"],
                test_per_class=d["test_per_class"], noise=d["noise"],
                radius=d["radius"], seed=d["seed"])
        elif d["source"] == "idx":
            for key in ("train_images", "train_labels", "test_images",
                        "test_labels"):
                if d[key] is None:
                    raise ConfigError(f"data.{key} required for idx source")
            train = load_idx(d["train_images"], d["train_labels"],
                             d["classes"], "train")
            test = load_idx(d["test_images"], d["test_labels"],
                            d["classes"], "test")
        elif d["source"] == "csv":
            if d["train_csv"] is None or d["test_csv"] is None:
                raise ConfigError("data.train_csv and data.test_csv required")
            train = load_csv(d["train_csv"], d["classes"], "train")
            test = load_csv(d["test_csv"], d["classes"], "test")
        else:
            raise ConfigError(f"data.source: unknown source {d['source']!r}")
        zca = None
        if d["zca"]:
            zca = zca_fit(train.inputs, d["zca_lambda"])
            train = DatasetSplit(zca_apply(zca, train.inputs), train.labels,
                                 train.classes, "train")
            test = DatasetSplit(zca_apply(zca, test.inputs), test.labels,
                                test.classes, "test")
        return train, test, zca


def parse_config(path=None, overrides=(), out_override=None) -> RunConfig:
    """Load, override, and resolve a config; empty/missing file means defaults."""
    user = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}") from None
    for item in overrides:
        _apply_override(user, item)
    tree = _merge(DEFAULTS, user)
    root = out_override or tree["output_dir"] \
        or os.environ.get(OUTPUT_ROOT_ENV) or "runs"
    rc = RunConfig(tree, Path(root))
    rc.boost()  # eager constraint validation (covers arch/unroll/eval/distill)
    return rc


def resolved_json(tree: dict) -> str:
    return json.dumps(tree, indent=2, sort_keys=True) + "\n"


def _prepare_run_dir(rc: RunConfig, argv) -> Path:
    run_dir = rc.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(resolved_json(rc.tree),
                                         encoding="ascii")
    with open(run_dir / "run.log", "a", encoding="ascii") as fh:
        fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {' '.join(argv)}\n")
    return run_dir


def _eval_seeds(rc: RunConfig):
    n = rc.tree["distill"]["eval_seeds"]
    return [derive_seed(rc.seed, "eval-net", s) for s in range(n)]


# ---------------------------------------------------------------------------
# commands

def cmd_distill(args) -> int:
    rc = parse_config(args.config, args.set, args.out)
    cfg = rc.distillation()
    train, test, _ = rc.load_data()
    run_dir = _prepare_run_dir(rc, sys.argv[1:])
    try:
        u, history = run_distillation(cfg, train, test)
    except DivergenceError as exc:
        exc.history.save(run_dir / "history_partial.jsonl")
        raise
    save_checkpoint(u, run_dir / "checkpoint.ddc")
    history.save(run_dir / "history.jsonl")
    evals = history.eval_entries()
    final = f", final eval {evals[-1].eval_acc:.4f}" if evals else ""
    print(f"distill: {len(history)} outer steps{final}; "
          f"artifacts in {run_dir}")
    return 0


def cmd_boost(args) -> int:
    rc = parse_config(args.config, args.set, args.out)
    cfg = rc.boost()
    train, test, _ = rc.load_data()
    run_dir = _prepare_run_dir(rc, sys.argv[1:])
    result = boost_distill(cfg, train, test)
    for j, (stage_u, history) in enumerate(
            zip(result.stage_datasets, result.histories), start=1):
        save_checkpoint(stage_u, run_dir / f"stage_{j}.ddc")
        history.save(run_dir / f"stage_{j}_history.jsonl")
    save_checkpoint(result.dataset, run_dir / "checkpoint.ddc")
    print(f"boost: {cfg.n_blocks} blocks of {cfg.block_size}, "
          f"{result.total_outer_steps} total outer steps; "
          f"artifacts in {run_dir}")
    return 0


def cmd_evaluate(args) -> int:
    rc = parse_config(args.config, args.set, args.out)
    u = load_checkpoint(args.checkpoint)
    if args.prefix_blocks is not None:
        u = prefix_blocks(u, args.prefix_blocks)
    train, test, _ = rc.load_data()
    spec, ecfg, seeds = rc.arch(), rc.eval_config(), _eval_seeds(rc)
    run_dir = _prepare_run_dir(rc, sys.argv[1:])
    report = evaluate_distilled(u, test, spec, ecfg, seeds)
    (run_dir / "eval.json").write_text(
        json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n",
        encoding="ascii")
    print(f"evaluate: {u.n_points} points, accuracy "
          f"{report.mean:.4f} +- {report.std:.4f} over {report.n_seeds} seeds")
    if args.subsample_sizes:
        sizes = [int(s) for s in args.subsample_sizes.split(",")]
        rows = subsample_eval(u, sizes, derive_rng(rc.seed, "subsample"),
                              test, spec, ecfg, seeds, real_split=train)
        (run_dir / "subsample.csv").write_text(subsample_curve_csv(rows),
                                               encoding="ascii")
        print(f"evaluate: subsample curve for sizes {sizes} written")
    return 0


def cmd_hardness(args) -> int:
    rc = parse_config(args.config, args.set, args.out)
    h = rc.tree["hardness"]
    train, _, _ = rc.load_data()
    spec = rc.arch()
    cfg = EvalConfig(steps=h["steps"], lr=h["lr"])
    run_dir = _prepare_run_dir(rc, sys.argv[1:])
    if args.mode == "forgetting":
        table = forgetting_scores(train, spec, cfg, n_seeds=h["n_seeds"],
                                  seed=rc.seed)
    else:
        if args.checkpoint is None:
            raise ConfigError("adaptive mode needs --checkpoint")
        u = load_checkpoint(args.checkpoint)
        table = adaptive_hardness(u, train, spec, cfg, n_nets=h["n_nets"],
                                  seed=rc.seed)
    (run_dir / "hardness.csv").write_text(hardness_csv(table),
                                          encoding="ascii")
    print(f"hardness: {args.mode} scores for {len(table.scores)} examples, "
          f"max {int(table.scores.max())}")
    return 0


def cmd_compare_estimators(args) -> int:
    rc = parse_config(args.config, args.set, args.out)
    names = [e.strip() for e in args.estimators.split(",") if e.strip()]
    for name in names:
        if name not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {name!r}; "
                              f"choose from {', '.join(ESTIMATORS)}")
    base = rc.distillation()
    train, test, _ = rc.load_data()
    run_dir = _prepare_run_dir(rc, sys.argv[1:])
    for name in names:
        unroll = base.unroll
        if name in ("bptt", "rbptt"):
            # full-window estimators: the window is the whole unroll
            unroll = replace(unroll, window_size=unroll.total_steps)
        cfg = replace(base, unroll=replace(unroll, estimator=name))
        u, history = run_distillation(cfg, train, test)
        lines = ["step,outer_loss,grad_norm,eval_acc"]
        for m in history.entries:
            acc = "" if m.eval_acc is None else repr(m.eval_acc)
            lines.append(f"{m.step},{m.outer_loss!r},{m.grad_norm!r},{acc}")
        (run_dir / f"{name}.csv").write_text("\n".join(lines) + "\n",
                                             encoding="ascii")
        save_checkpoint(u, run_dir / f"{name}.ddc")
        print(f"compare-estimators: {name} done ({len(history)} steps)")
    return 0


def cmd_visualize(args) -> int:
    rc = parse_config(args.config, args.set, None)
    u = load_checkpoint(args.checkpoint)
    images = u.inputs
    if rc.tree["data"]["zca"]:
        train, _, zca = rc.load_data()
        images = zca_invert(zca, images)
    write_ppm_grid(args.out, images, cols=args.cols)
    print(f"visualize: {images.shape[0]} images -> {args.out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ddist",
        description="Dataset distillation via unrolled meta-gradients.")
    parser.add_argument("--jobs", type=int, default=1,
                        help="upper bound on worker parallelism (default 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp, out_help="output root (overrides config/env)"):
        sp.add_argument("--config", help="JSON config file (defaults if omitted)")
        sp.add_argument("--set", action="append", default=[],
                        metavar="KEY=VALUE",
                        help="override a config key by dotted path")
        sp.add_argument("--out", default=None, help=out_help)

    sp = sub.add_parser("distill", help="run the distillation driver")
    common(sp)
    sp.set_defaults(func=cmd_distill)

    sp = sub.add_parser("boost", help="stagewise boosted distillation")
    common(sp)
    sp.set_defaults(func=cmd_boost)

    sp = sub.add_parser("evaluate", help="evaluate a distilled checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--prefix-blocks", type=int, default=None,
                    help="evaluate only the first K blocks")
    sp.add_argument("--subsample-sizes", default=None,
                    help="comma-separated per-class sizes for the curve")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("hardness", help="hardness score tables")
    common(sp)
    sp.add_argument("--mode", choices=("forgetting", "adaptive"),
                    required=True)
    sp.add_argument("--checkpoint", default=None,
                    help="distilled checkpoint (adaptive mode)")
    sp.set_defaults(func=cmd_hardness)

    sp = sub.add_parser("compare-estimators",
                        help="one distillation run per estimator")
    common(sp)
    sp.add_argument("--estimators", default=",".join(ESTIMATORS))
    sp.set_defaults(func=cmd_compare_estimators)

    sp = sub.add_parser("visualize", help="render a checkpoint as a PPM grid")
    sp.add_argument("--config", help="JSON config file (for ZCA inversion)")
    sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", default="grid.ppm", help="output PPM path")
    sp.add_argument("--cols", type=int, default=None)
    sp.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        return args.func(args)
    except ConfigError as exc:
        print(f"ddist: config error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"ddist: io error: {exc}", file=sys.stderr)
        return 4
    except DdistError as exc:
        print(f"ddist: runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
