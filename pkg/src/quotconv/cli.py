"""Command-line entry point: group-info, check, bench, synth, train, eval.

Configuration is a single flat key-value file (``key = value`` per line,
``#`` comments); unknown keys are rejected and CLI flags override config
keys. All randomness flows from the single config seed. Reports are written
as JSON for machines and an aligned text summary for humans.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import checks
from . import cloud as cl
from . import layers as ly
from . import train as tr
from .autograd import Tensor
from .rotgroup import SOLIDS, build_solid_symmetry
from .train import CheckpointMissing, OptimSpec, TaskSpec


class ConfigError(ValueError):
    """Malformed, unknown, or out-of-range configuration entry."""


_SCALAR_KEYS = {
    "solid": str,
    "seed": int,
    "out": str,
    "kernel.radius_ratio": float,
    "kernel.extra_points": str,
    "task.kind": str,
    "task.shapes": str,
    "task.points": int,
    "task.noise": float,
    "task.samples_per_epoch": int,
    "task.val_samples": int,
    "optim.lr": float,
    "optim.momentum": float,
    "optim.batch": int,
    "optim.epochs": int,
    "optim.lr_decay": float,
    "optim.lr_decay_every": int,
    "optim.hidden": int,
    "optim.bce_weight": float,
    "optim.head_lr_scale": float,
    "bench.points": int,
    "bench.channels": int,
    "bench.trials": int,
    "synth.kind": str,
    "synth.count": int,
    "synth.noise": float,
}

_BLOCK_KEYS = {"channels": int, "radius": float, "sigma": float,
               "kernel_radius": float, "mode": str, "cell": float, "alpha": float}

DEFAULT_BLOCKS = [
    {"type": "conv", "channels": 16, "radius": 0.4},
    {"type": "bn"},
    {"type": "relu"},
    {"type": "conv", "channels": 32, "radius": 0.55},
    {"type": "bn"},
    {"type": "relu"},
]

DEFAULTS = {
    "solid": "icosa",
    "seed": 7,
    "out": "runs/default",
    "kernel.radius_ratio": 0.66,
    "kernel.extra_points": "",
    "task.kind": "rotpair",
    "task.shapes": "cube,tetra",
    "task.points": 256,
    "task.noise": 0.005,
    "task.samples_per_epoch": 32,
    "task.val_samples": 64,
    "optim.lr": 0.01,
    "optim.momentum": 0.9,
    "optim.batch": 8,
    "optim.epochs": 30,
    "optim.lr_decay": 0.5,
    "optim.lr_decay_every": 20,
    "optim.hidden": 32,
    "optim.bce_weight": 1.0,
    "optim.head_lr_scale": 10.0,
    "bench.points": 1024,
    "bench.channels": 32,
    "bench.trials": 10,
    "synth.kind": "cube",
    "synth.count": 256,
    "synth.noise": 0.0,
}


class ExperimentConfig:
    """Validated flat configuration plus the ordered layer block list."""

    def __init__(self, values: dict, blocks: list[dict]):
        self.values = values
        self.blocks = blocks
        if values["solid"] not in SOLIDS:
            raise ConfigError(f"solid must be one of {SOLIDS}, got {values['solid']!r}")
        if values["task.kind"] not in ("rotpair", "shapecls"):
            raise ConfigError(f"unknown task {values['task.kind']!r}")

    def __getitem__(self, key):
        return self.values[key]

    def task_spec(self) -> TaskSpec:
        shapes = tuple(s.strip() for s in self["task.shapes"].split(",") if s.strip())
        for s in shapes:
            if s not in cl.SHAPE_KINDS:
                raise ConfigError(f"unknown shape {s!r}")
        return TaskSpec(task=self["task.kind"], shapes=shapes,
                        samples_per_epoch=self["task.samples_per_epoch"],
                        val_samples=self["task.val_samples"],
                        points=self["task.points"], noise=self["task.noise"],
                        seed=self["seed"])

    def optim_spec(self) -> OptimSpec:
        return OptimSpec(lr=self["optim.lr"], momentum=self["optim.momentum"],
                         batch=self["optim.batch"], epochs=self["optim.epochs"],
                         lr_decay=self["optim.lr_decay"],
                         lr_decay_every=self["optim.lr_decay_every"],
                         hidden=self["optim.hidden"],
                         bce_weight=self["optim.bce_weight"],
                         head_lr_scale=self["optim.head_lr_scale"])

    def resolved_blocks(self) -> list[dict]:
        """Blocks with the configured kernel-radius ratio applied to convs."""
        ratio = self["kernel.radius_ratio"]
        out = []
        for block in self.blocks:
            block = dict(block)
            if block["type"] == "conv" and "kernel_radius" not in block:
                block["kernel_radius"] = ratio * block["radius"]
            out.append(block)
        return out

    def extra_kernel_points(self) -> np.ndarray | None:
        text = self["kernel.extra_points"].strip()
        if not text:
            return None
        rows = []
        for chunk in text.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            parts = [float(x) for x in chunk.split(",")]
            if len(parts) != 3:
                raise ConfigError(f"extra kernel point needs 3 coordinates: {chunk!r}")
            rows.append(parts)
        return np.array(rows) if rows else None


def _parse_block(text: str) -> dict:
    parts = text.split()
    if not parts:
        raise ConfigError("empty block definition")
    block = {"type": parts[0]}
    if parts[0] not in ("conv", "bn", "relu", "leaky_relu", "pool"):
        raise ConfigError(f"unknown block type {parts[0]!r}")
    for item in parts[1:]:
        if "=" not in item:
            raise ConfigError(f"block option {item!r} must look like key=value")
        key, value = item.split("=", 1)
        if key not in _BLOCK_KEYS:
            raise ConfigError(f"unknown block option {key!r}")
        block[key] = _BLOCK_KEYS[key](value)
    return block


def parse_config_text(text: str) -> ExperimentConfig:
    values = dict(DEFAULTS)
    block_entries: dict[int, dict] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key.startswith("block."):
            suffix = key[len("block."):]
            if not suffix.isdigit():
                raise ConfigError(f"line {lineno}: block index must be an integer")
            block_entries[int(suffix)] = _parse_block(value)
        elif key in _SCALAR_KEYS:
            try:
                values[key] = _SCALAR_KEYS[key](value)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key!r}: {value!r}") from exc
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    if block_entries:
        indices = sorted(block_entries)
        if indices != list(range(len(indices))):
            raise ConfigError(f"block indices must be 0..{len(indices) - 1}, got {indices}")
        blocks = [block_entries[i] for i in indices]
    else:
        blocks = [dict(b) for b in DEFAULT_BLOCKS]
    return ExperimentConfig(values, blocks)


def load_config(path: str | None, overrides: dict | None = None) -> ExperimentConfig:
    if path is None:
        config = parse_config_text("")
    else:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as f:
            config = parse_config_text(f.read())
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _SCALAR_KEYS:
            raise ConfigError(f"unknown override {key!r}")
        config.values[key] = _SCALAR_KEYS[key](value)
    return ExperimentConfig(config.values, config.blocks)


def _ensure_out(config: ExperimentConfig) -> str:
    out = config["out"]
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(path: str, payload) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_group_info(config: ExperimentConfig) -> int:
    sym = build_solid_symmetry(config["solid"])
    payload = {
        "order": sym.order,
        "num_anchors": sym.num_anchors,
        "stabilizer_order": int(len(sym.quotient.stabilizer)),
        "element_order_histogram": {str(k): v for k, v in
                                    sym.group.element_order_histogram().items()},
    }
    print(json.dumps(payload, indent=2, sort_keys=True))
    out = _ensure_out(config)
    _write_json(os.path.join(out, "group_info.json"), payload)
    return 0


def cmd_check(config: ExperimentConfig, fast: bool = False) -> int:
    try:
        results = checks.run_all(solid=config["solid"], seed=config["seed"], fast=fast,
                                 extra_kernel_points=config.extra_kernel_points())
    except Exception as exc:  # a construction error is a failed check
        print(f"check construction failed: {exc}")
        return 1
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {status}  max_err={r.max_err:.3e}  {r.detail}")
    out = _ensure_out(config)
    _write_json(os.path.join(out, "check_report.json"),
                {"checks": [r.as_dict() for r in results],
                 "all_passed": all(r.passed for r in results)})
    return 0 if all(r.passed for r in results) else 1


def cmd_bench(config: ExperimentConfig, trials: int | None = None) -> int:
    trials = trials if trials is not None else config["bench.trials"]
    if trials < 3:
        raise ConfigError(f"bench needs at least 3 trials, got {trials}")
    rng = np.random.default_rng(config["seed"])
    sym = build_solid_symmetry(config["solid"])
    n = config["bench.points"]
    c = config["bench.channels"]
    positions = cl.synth_shape("cube", n, 0.01, rng).positions
    values = Tensor(rng.standard_normal((n, sym.num_anchors, c)))
    conv = ly.QuotientConv(sym, c, c, radius=0.3, rng=rng,
                           kernel_radius=config["kernel.radius_ratio"] * 0.3)
    timings = {}
    for mode in ly.CONV_MODES:
        samples = []
        for _ in range(trials):
            start = time.perf_counter()
            plan = conv.prepare([positions], [positions], mode=mode)
            conv.forward(values, plan)
            samples.append(time.perf_counter() - start)
        timings[mode] = samples
    k = conv.kpoints.count
    report = {
        "points": n,
        "channels": c,
        "trials": trials,
        "gather_locations_fast": k,
        "gather_locations_naive": sym.num_anchors * k,
        "median_seconds_fast": float(np.median(timings["fast"])),
        "median_seconds_naive": float(np.median(timings["naive"])),
        "speedup_naive_over_fast": float(np.median(timings["naive"])
                                         / np.median(timings["fast"])),
        "field_elements_quotient": n * sym.num_anchors * c,
        "field_elements_group": n * sym.order * c,
        "field_element_ratio": sym.num_anchors / sym.order,
    }
    print(f"gather locations per center : fast={k}  naive={sym.num_anchors * k}")
    print(f"median forward seconds      : fast={report['median_seconds_fast']:.4f}  "
          f"naive={report['median_seconds_naive']:.4f}  "
          f"(naive/fast = {report['speedup_naive_over_fast']:.2f}x)")
    print(f"field elements (memory proxy): quotient={report['field_elements_quotient']}  "
          f"group={report['field_elements_group']}  "
          f"ratio={report['field_element_ratio']:.3f}")
    out = _ensure_out(config)
    _write_json(os.path.join(out, "bench_report.json"), report)
    return 0


def cmd_synth(config: ExperimentConfig) -> int:
    kind = config["synth.kind"]
    count = config["synth.count"]
    noise = config["synth.noise"]
    seed = config["seed"]
    pc = cl.synth_shape(kind, count, noise, seed)
    out = _ensure_out(config)
    base = os.path.join(out, f"{kind}_{seed}")
    cl.write_xyz(base + ".xyz", pc.positions)
    cl.write_sidecar(base + ".json",
                     {"kind": kind, "count": count, "noise": noise, "seed": seed,
                      "label": cl.SHAPE_KINDS.index(kind)})
    print(f"wrote {base}.xyz ({count} points) and sidecar")
    return 0


def cmd_train(config: ExperimentConfig) -> int:
    sym = build_solid_symmetry(config["solid"])
    spec = config.task_spec()
    optim = config.optim_spec()
    out = _ensure_out(config)
    metrics_path = os.path.join(out, "metrics.jsonl")
    if os.path.exists(metrics_path):
        os.remove(metrics_path)
    checkpoint = os.path.join(out, "model")

    def log(record):
        print(f"epoch {record['epoch']:3d}  loss {record['train_loss']:.4f}  "
              f"val_acc {record['val_acc']:.3f}  {record['wall_seconds']:.1f}s")

    runner = tr.run_rotpair_training if spec.task == "rotpair" else tr.run_shapecls_training
    result = runner(sym, config.resolved_blocks(), spec, optim,
                    metrics_path=metrics_path, checkpoint_prefix=checkpoint, log=log)
    print(f"final val_acc {result['final_val_acc']:.3f}")
    return 0


def cmd_eval(config: ExperimentConfig, checkpoint: str | None = None) -> int:
    sym = build_solid_symmetry(config["solid"])
    spec = config.task_spec()
    optim = config.optim_spec()
    prefix = checkpoint or os.path.join(config["out"], "model")
    result = tr.evaluate_checkpoint(sym, config.resolved_blocks(), spec, optim, prefix)
    stored = result["checkpoint_extra"].get("final_val_acc")
    print(f"val_acc {result['val_acc']:.6f} (checkpoint recorded {stored})")
    out = _ensure_out(config)
    _write_json(os.path.join(out, "eval_report.json"),
                {"val_acc": result["val_acc"], "checkpoint_final_val_acc": stored})
    if stored is not None and abs(stored - result["val_acc"]) > 0:
        print("evaluation does not reproduce the checkpoint's recorded accuracy")
        return 1
    return 0


def main(argv=None) -> int:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="flat key=value config file")
    common.add_argument("--seed", type=int, default=None, help="override config seed")
    common.add_argument("--out", default=None, help="override output directory")
    parser = argparse.ArgumentParser(
        prog="quotconv",
        description="Quotient-space equivariant point convolution toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("group-info", parents=[common],
                   help="print group/quotient cardinalities as JSON")
    p_check = sub.add_parser("check", parents=[common],
                             help="run the full property suite")
    p_check.add_argument("--fast", action="store_true", help="reduced trial counts")
    p_bench = sub.add_parser("bench", parents=[common],
                             help="time fast vs naive gathering")
    p_bench.add_argument("--trials", type=int, default=None)
    p_synth = sub.add_parser("synth", parents=[common],
                             help="write a synthetic point cloud")
    p_synth.add_argument("--kind", default=None, choices=cl.SHAPE_KINDS)
    p_synth.add_argument("--count", type=int, default=None)
    p_train = sub.add_parser("train", parents=[common],
                             help="train the configured toy task")
    p_train.add_argument("--mode", default=None, choices=ly.CONV_MODES,
                         help="override conv gathering mode")
    p_eval = sub.add_parser("eval", parents=[common],
                            help="replay held-out evaluation from a checkpoint")
    p_eval.add_argument("--checkpoint", default=None, help="checkpoint prefix")

    args = parser.parse_args(argv)
    overrides = {"seed": args.seed, "out": args.out}
    if getattr(args, "kind", None) is not None:
        overrides["synth.kind"] = args.kind
    if getattr(args, "count", None) is not None:
        overrides["synth.count"] = args.count
    try:
        config = load_config(args.config, overrides)
        if getattr(args, "mode", None):
            for block in config.blocks:
                if block["type"] == "conv":
                    block["mode"] = args.mode
        if args.command == "group-info":
            return cmd_group_info(config)
        if args.command == "check":
            return cmd_check(config, fast=args.fast)
        if args.command == "bench":
            return cmd_bench(config, trials=args.trials)
        if args.command == "synth":
            return cmd_synth(config)
        if args.command == "train":
            return cmd_train(config)
        if args.command == "eval":
            return cmd_eval(config, checkpoint=args.checkpoint)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, CheckpointMissing) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
