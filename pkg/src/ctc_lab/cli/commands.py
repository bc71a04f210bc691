"""
Command handlers: gen, train, mi, report.

Every handler takes the parsed argparse namespace and returns a process
exit code. Command output goes to stdout, logs to stderr.
"""
import argparse
import json
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import structlog

from .. import __version__
from ..core.config import get_settings
from ..core.config_file import load_train_config, render_config_text
from ..core.errors import UsageError
from ..core.metrics import write_metrics
from ..models.config import MineConfig, RunManifest, SharedPatternSpec
from ..models.records import MiEstimate
from ..services.checkpoint import load_checkpoint
from ..services.datagen import gen_shared_pair, load_pair, load_samples_csv, save_pair
from ..services.mi_lab import (
    DiscreteJoint,
    discrete_mi_exact,
    estimate_ity,
    estimate_ixt,
    gaussian_mi,
    gaussian_pair,
    mine_estimate,
)
from ..services.numerics import mlp_forward
from ..services.pipeline import load_experiment_data, train_ctc, train_vanilla
from ..services.trajectory import JSON_NAME, emit_trajectory, load_trajectory, read_trajectory_csv

logger = structlog.get_logger(__name__)

MANIFEST_NAME = "manifest.json"
RESOLVED_CONFIG_NAME = "config.cfg"

SPEC_FLAGS = {
    "shared_dim": int,
    "source_private_dim": int,
    "target_private_dim": int,
    "ambient_dim": int,
    "source_classes": int,
    "target_classes": int,
    "train_samples": int,
    "test_samples": int,
    "noise_std": float,
    "source_shared_weight": float,
}


def _write_manifest(out: Path, manifest: RunManifest) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / MANIFEST_NAME).write_text(manifest.json(indent=2) + "\n", encoding="utf-8")


def _finish(out: Path) -> None:
    settings = get_settings()
    if settings.metrics_enabled:
        write_metrics(out / settings.metrics_filename)


# gen

def cmd_gen(args: argparse.Namespace) -> int:
    """Write source/target train/test CSVs from a SharedPatternSpec."""
    seed = args.seed if args.seed is not None else get_settings().seed
    if args.config:
        base = load_train_config(args.config).data.shared_spec().dict()
    else:
        base = SharedPatternSpec.preset(args.preset).dict()
    base["seed"] = seed
    for flag in SPEC_FLAGS:
        value = getattr(args, flag)
        if value is not None:
            base[flag] = value
    spec = SharedPatternSpec(**base)

    out = Path(args.out)
    source, target = gen_shared_pair(spec)
    written = [*save_pair(source, out / "source"), *save_pair(target, out / "target")]
    _write_manifest(out, RunManifest(
        command="gen",
        output_dir=str(out.resolve()),
        config_path=args.config,
        seed=seed,
        version=__version__,
    ))
    for path in written:
        print(path)
    _finish(out)
    return 0


# train

def cmd_train(args: argparse.Namespace) -> int:
    """Run vanilla or CTC training and write trajectory, checkpoints and manifest."""
    overrides: List[str] = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"model.seed={args.seed}")
    config = load_train_config(
        args.config, overrides, defaults=[f"model.seed={get_settings().seed}"]
    )
    data = load_experiment_data(config.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED_CONFIG_NAME).write_text(render_config_text(config), encoding="utf-8")
    _write_manifest(out, RunManifest(
        command="train",
        output_dir=str(out.resolve()),
        config_path=args.config,
        seed=config.seed,
        mode=args.mode,
        overrides=overrides,
        config_fingerprint=config.fingerprint(),
        version=__version__,
    ))

    runner = train_vanilla if args.mode == "vanilla" else train_ctc
    trajectory = runner(config, data, out)
    csv_path, json_path = emit_trajectory(trajectory, out)
    print(csv_path)
    print(json_path)
    _finish(out)
    return 0


# mi

def _mine_config(args: argparse.Namespace, quantity: str) -> MineConfig:
    config = MineConfig.preset(args.preset, quantity)
    updates = {
        key: getattr(args, key)
        for key in ("hidden_dim", "batch_size", "learning_rate", "train_steps")
        if getattr(args, key) is not None
    }
    return MineConfig(**{**config.dict(), **updates})


def _load_joint(path: str) -> DiscreteJoint:
    return DiscreteJoint(load_samples_csv(path, header=False))


def cmd_mi(args: argparse.Namespace) -> int:
    """Estimate (or compute exactly) a mutual information and print it in nats."""
    seed = args.seed if args.seed is not None else get_settings().seed
    sources = [bool(args.oracle), bool(args.fixture), bool(args.a or args.b), bool(args.checkpoint)]
    if sum(sources) != 1:
        raise UsageError("give exactly one of --oracle, --fixture, --a/--b or --checkpoint")

    reference: Optional[float] = None
    if args.oracle:
        kind, path = args.oracle
        if kind != "discrete":
            raise UsageError(f"unknown oracle {kind!r}; only 'discrete' is exact")
        estimate = MiEstimate(value=discrete_mi_exact(_load_joint(path)), method="discrete")
    elif args.fixture:
        rho = 0.0 if args.fixture == "independent" else args.rho
        a, b = gaussian_pair(args.samples, rho, seed)
        reference = gaussian_mi(rho)
        estimate = mine_estimate(a, b, _mine_config(args, "ixt"), seed=seed, quantity="fixture")
    elif args.checkpoint:
        if not args.dataset:
            raise UsageError("--checkpoint needs --dataset PREFIX")
        backbone, _ = load_checkpoint(args.checkpoint).network()
        split = getattr(load_pair(args.dataset), args.split)
        reps, _ = mlp_forward(backbone, split.features)
        if args.quantity == "ixt":
            estimate = estimate_ixt(split.features, reps, _mine_config(args, "ixt"), seed)
        else:
            estimate = estimate_ity(reps, split.labels, split.class_count,
                                    _mine_config(args, "ity"), seed)
    else:
        if not (args.a and args.b):
            raise UsageError("--a and --b must be given together")
        estimate = mine_estimate(load_samples_csv(args.a), load_samples_csv(args.b),
                                 _mine_config(args, "ixt"), seed=seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload: Dict = {"estimate": estimate.dict(), "seed": seed}
    if reference is not None:
        payload["closed_form"] = reference
    (out / "mi.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_manifest(out, RunManifest(command="mi", output_dir=str(out.resolve()), seed=seed,
                                     version=__version__))

    line = f"I = {estimate.value:.4f} ± {estimate.stderr:.4f} nats ({estimate.method}"
    line += f", {estimate.steps_used} steps)" if estimate.steps_used else ")"
    if reference is not None:
        line += f"; closed form {reference:.4f}"
    print(line)
    _finish(out)
    return 0


# report

def _resolve_csv(path: str) -> Path:
    candidate = Path(path)
    return candidate / "trajectory.csv" if candidate.is_dir() else candidate


def _final_source_accuracy(csv_path: Path) -> Optional[float]:
    sibling = csv_path.with_name(JSON_NAME)
    if not sibling.is_file():
        return None
    trajectory = load_trajectory(sibling)
    return trajectory.records[-1].source_accuracy if trajectory.records else None


def summarize_run(csv_path: Path) -> Optional[Dict[str, float]]:
    """Peak-transfer epoch, final-vs-peak gap and final metrics of one run."""
    frame = read_trajectory_csv(csv_path)
    if frame.empty:
        return None
    final = frame.iloc[-1]
    summary: Dict[str, float] = {
        "final_epoch": int(final["epoch"]),
        "final_r_at_1": float(final["r_at_1"]),
        "final_nmi": float(final["nmi"]),
    }
    for column in (c for c in frame.columns if c.startswith("probe_")):
        values = frame[column]
        if values.isna().all():
            continue
        peak_row = int(np.nanargmax(values.to_numpy()))
        target = column[len("probe_"):]
        summary[f"{target}_peak_epoch"] = int(frame["epoch"].iloc[peak_row])
        summary[f"{target}_peak"] = float(values.iloc[peak_row])
        summary[f"{target}_final"] = float(values.iloc[-1])
        summary[f"{target}_gap"] = float(values.iloc[peak_row] - values.iloc[-1])
    accuracy = _final_source_accuracy(csv_path)
    if accuracy is not None:
        summary["final_source_accuracy"] = accuracy
    return summary


def cmd_report(args: argparse.Namespace) -> int:
    """Summarize one trajectory; with two, also print final-metric deltas."""
    summaries = {}
    for raw in args.trajectories:
        path = _resolve_csv(raw)
        summary = summarize_run(path)
        if summary is None:
            print(f"{raw}: no evaluated epochs")
            continue
        summaries[raw] = summary
        print(f"== {raw}")
        for key, value in summary.items():
            print(f"  {key}: {value:.4f}" if isinstance(value, float) else f"  {key}: {value}")

    if len(args.trajectories) == 2 and len(summaries) == 2:
        first, second = (summaries[name] for name in args.trajectories)
        keys = [k for k in first if k in second and (k.startswith("final") or k.endswith(("_final", "_gap")))
                and k != "final_epoch"]
        table = pd.DataFrame(
            {
                "metric": keys,
                args.trajectories[0]: [first[k] for k in keys],
                args.trajectories[1]: [second[k] for k in keys],
                "delta": [second[k] - first[k] for k in keys],
            }
        )
        table["sign"] = np.sign(table["delta"]).map({1.0: "+", -1.0: "-", 0.0: "="})
        print("== delta (second - first)")
        print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    return 0


# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctc-lab",
        description="Contrastive temporal coding lab: train, evaluate and measure information dynamics.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic source/target dataset pair")
    gen.add_argument("--preset", choices=["default", "small"], default="default")
    gen.add_argument("-c", "--config", help="take the [data] section of a config file as generation parameters")
    gen.add_argument("--seed", type=int, help="generation seed (default CTCLAB_SEED)")
    gen.add_argument("--out", required=True, help="output directory")
    for flag, kind in SPEC_FLAGS.items():
        gen.add_argument(f"--{flag.replace('_', '-')}", dest=flag, type=kind)
    gen.set_defaults(handler=cmd_gen)

    train = sub.add_parser("train", help="train a backbone and record its trajectory")
    train.add_argument("-c", "--config", help="experiment config file")
    train.add_argument("--mode", choices=["vanilla", "ctc"], default="ctc")
    train.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config key (repeatable)")
    train.add_argument("--seed", type=int, help="master seed (overrides model.seed)")
    train.add_argument("--out", required=True, help="output directory")
    train.set_defaults(handler=cmd_train)

    mi = sub.add_parser("mi", help="estimate mutual information with MINE or an exact oracle")
    mi.add_argument("--a", help="CSV of samples of the first variable (header row)")
    mi.add_argument("--b", help="CSV of samples of the second variable, paired by row")
    mi.add_argument("--checkpoint", help="checkpoint whose backbone gives the representation")
    mi.add_argument("--dataset", help="dataset prefix (<prefix>_train.csv / _test.csv)")
    mi.add_argument("--split", choices=["train", "test"], default="test")
    mi.add_argument("--quantity", choices=["ixt", "ity"], default="ixt")
    mi.add_argument("--fixture", choices=["gaussian", "independent"])
    mi.add_argument("--rho", type=float, default=0.9)
    mi.add_argument("--samples", type=int, default=10000)
    mi.add_argument("--oracle", nargs=2, metavar=("KIND", "JOINT_CSV"))
    mi.add_argument("--preset", choices=["desk", "paper-a5"], default="desk")
    mi.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    mi.add_argument("--batch-size", dest="batch_size", type=int)
    mi.add_argument("--learning-rate", dest="learning_rate", type=float)
    mi.add_argument("--steps", dest="train_steps", type=int)
    mi.add_argument("--seed", type=int)
    mi.add_argument("--out", default=".", help="directory for mi.json")
    mi.set_defaults(handler=cmd_mi)

    report = sub.add_parser("report", help="summarize one or two trajectories")
    report.add_argument("trajectories", nargs="+", help="trajectory.csv files or run directories")
    report.set_defaults(handler=cmd_report)
    return parser
