"""Command-line surface: gen-data, train, eval, calibrate, monitor, report.

Every artifact-producing subcommand takes an explicit seed, writes a config
echo next to its outputs, and is bit-reproducible from that echo. Errors go
to stderr as one JSON object and the process exits nonzero. The monitor
distinguishes a clean episode end (exit 0) from a triggered stop (exit 3).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .checkpoint import load_detector, save_detector
from .detectors import DETECTOR_KINDS, train_detector
from .episodes import load_dataset, save_dataset
from .metrics import DEFAULT_FRACTIONS, parse_report_csv, partial_length_eval, render_report
from .monitor import (MonitorState, ThresholdSchedule, calibrate_thresholds,
                      default_periods, emit_trace, monitor_step)
from .synth import SynthConfig, generate_dataset

STOP_EXIT_CODE = 3

_SYNTH_FIELDS = set(SynthConfig.__dataclass_fields__)


def _data_dir() -> Path:
    return Path(os.environ.get("POLICYSTOP_DATA_DIR", "."))


def _resolve(path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() or p.exists() else _data_dir() / path


def _write_echo(out_path: Path, payload: dict) -> None:
    echo = out_path.with_name(out_path.name + ".config.json")
    with open(echo, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as f:
        cfg = json.load(f)
    if not isinstance(cfg, dict):
        raise ValueError("config file must hold a JSON object")
    return cfg


def _synth_config(overrides: dict) -> SynthConfig:
    unknown = set(overrides) - _SYNTH_FIELDS
    if unknown:
        raise ValueError(f"unknown generator option(s) {sorted(unknown)}; "
                         f"valid options: {sorted(_SYNTH_FIELDS)}")
    return SynthConfig(**overrides)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    base = _load_config_file(args.config)
    gen = dict(base)
    if args.max_steps is not None:
        gen["max_steps"] = args.max_steps
    test_jitter = gen.pop("test_policy_jitter", 0.15 if args.test_jitter is None
                          else args.test_jitter)
    if args.test_jitter is not None:
        test_jitter = args.test_jitter

    train_cfg = _synth_config(gen)
    test_cfg = _synth_config({**gen, "policy_jitter": test_jitter})

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = generate_dataset(train_cfg, args.n_train, 0, seed=args.seed,
                             id_prefix="train")
    val = generate_dataset(test_cfg, args.n_val, 0, seed=args.seed + 1,
                           id_prefix="val")
    test = generate_dataset(test_cfg, args.n_test_normal, args.n_test_anomalous,
                            seed=args.seed + 2, id_prefix="test")
    # Evaluation splits carry the training split's normalization statistics.
    val.norm_stats = train.norm_stats
    test.norm_stats = train.norm_stats
    save_dataset(train, out_dir / "train.jsonl")
    save_dataset(val, out_dir / "val.jsonl")
    save_dataset(test, out_dir / "test.jsonl")
    _write_echo(out_dir / "datasets", {
        "subcommand": "gen-data",
        "seed": args.seed,
        "n_train": args.n_train,
        "n_val": args.n_val,
        "n_test_normal": args.n_test_normal,
        "n_test_anomalous": args.n_test_anomalous,
        "generator": asdict(train_cfg),
        "test_policy_jitter": test_jitter,
    })
    print(f"wrote train/val/test datasets under {out_dir}")
    return 0


def cmd_train(args) -> int:
    data = load_dataset(_resolve(args.data))
    overrides = _load_config_file(args.config)
    overrides.update(json.loads(args.set) if args.set else {})
    model = train_detector(args.detector, data, overrides, seed=args.seed)
    out = Path(args.out)
    save_detector(model, out)
    _write_echo(out, {
        "subcommand": "train",
        "detector": args.detector,
        "seed": args.seed,
        "data": str(args.data),
        "dataset_fingerprint": data.fingerprint(),
        "config": model.config_echo(),
    })
    print(f"trained {args.detector} -> {out}")
    return 0


def cmd_eval(args) -> int:
    data = load_dataset(_resolve(args.data))
    detectors = {}
    for path in args.models:
        model = load_detector(_resolve(path))
        name = model.kind
        if name in detectors:  # same kind twice: disambiguate by file stem
            name = f"{name}:{Path(path).stem}"
        detectors[name] = model
    fractions = args.fractions or list(DEFAULT_FRACTIONS)
    report = partial_length_eval(detectors, data, fractions=fractions, seed=args.seed)
    text = render_report(report, fmt=args.format)
    if args.out:
        out = Path(args.out)
        out.write_text(text, encoding="utf-8")
        _write_echo(out, {
            "subcommand": "eval",
            "seed": args.seed,
            "data": str(args.data),
            "dataset_fingerprint": report.dataset_fingerprint,
            "fractions": fractions,
            "detectors": report.detector_configs,
        })
        print(f"wrote report -> {out}")
    else:
        print(text, end="")
    return 0


def cmd_calibrate(args) -> int:
    model = load_detector(_resolve(args.model))
    data = load_dataset(_resolve(args.data))
    periods = args.periods or default_periods(data.k_max)
    schedule = calibrate_thresholds(model, data, periods, target_fpr=args.target_fpr)
    out = Path(args.out)
    with open(out, "w", encoding="utf-8") as f:
        json.dump(schedule.to_dict(), f, indent=2)
        f.write("\n")
    _write_echo(out, {
        "subcommand": "calibrate",
        "model": str(args.model),
        "data": str(args.data),
        "target_fpr": args.target_fpr,
        "periods": periods,
    })
    print(f"wrote threshold schedule -> {out}")
    return 0


def cmd_monitor(args) -> int:
    model = load_detector(_resolve(args.model))
    with open(_resolve(args.schedule), "r", encoding="utf-8") as f:
        schedule = ThresholdSchedule.from_dict(json.load(f))

    stream = sys.stdin if args.input == "-" else open(_resolve(args.input), "r",
                                                      encoding="utf-8")
    state: MonitorState | None = None
    stopped = False
    try:
        for lineno, line in enumerate(stream, start=1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            state_vec = np.asarray(rec["state"], dtype=np.float64)
            action_vec = np.asarray(rec["action"], dtype=np.float64)
            if state is None:
                state = MonitorState(
                    n_s=state_vec.size, n_a=action_vec.size,
                    episode_id=str(rec.get("episode_id", "live")),
                    stride=args.stride, running_max=args.running_max,
                )
            elif str(rec.get("episode_id", state.episode_id)) != state.episode_id:
                raise ValueError(
                    f"line {lineno}: episode id changed mid-stream; "
                    "one episode per monitor run"
                )
            decision = monitor_step(state, state_vec, action_vec, schedule, model)
            print(json.dumps({
                "episode_id": state.episode_id,
                "t": decision.step,
                "verdict": decision.verdict,
                "score": decision.score,
                "threshold": decision.threshold,
            }), flush=True)
            if decision.verdict == "stop":
                stopped = True
                break
    finally:
        if stream is not sys.stdin:
            stream.close()

    if state is None:
        raise ValueError("no steps received on the input stream")
    if args.trace_csv:
        Path(args.trace_csv).write_text(emit_trace(state, "csv"), encoding="utf-8")
    if args.trace_svg:
        Path(args.trace_svg).write_text(emit_trace(state, "svg"), encoding="utf-8")
    return STOP_EXIT_CODE if stopped else 0


def cmd_report(args) -> int:
    text = Path(_resolve(args.report)).read_text(encoding="utf-8")
    report = parse_report_csv(text)
    print(render_report(report, fmt=args.format), end="")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="policystop",
        description="Train, evaluate and deploy early-stop anomaly detectors "
                    "for trajectory-executing policies.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic benchmark dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-train", type=int, default=300)
    p.add_argument("--n-val", type=int, default=200)
    p.add_argument("--n-test-normal", type=int, default=100)
    p.add_argument("--n-test-anomalous", type=int, default=100)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--test-jitter", type=float, default=None,
                   help="controller gain jitter for val/test episodes (default 0.15)")
    p.add_argument("--config", help="JSON file with generator options")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one detector")
    p.add_argument("--detector", required=True, choices=DETECTOR_KINDS)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--config", help="JSON file with detector options")
    p.add_argument("--set", help="inline JSON object overriding config values")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="partial-length evaluation of trained detectors")
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--format", choices=["table", "csv"], default="csv")
    p.add_argument("--fractions", type=float, nargs="+")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("calibrate", help="calibrate per-period stop thresholds")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="success-only validation dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--target-fpr", type=float, default=0.05)
    p.add_argument("--periods", type=int, nargs="+")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("monitor", help="stream step records and emit stop decisions")
    p.add_argument("--model", required=True)
    p.add_argument("--schedule", required=True)
    p.add_argument("--input", default="-", help="step JSONL file, or - for stdin")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--running-max", action="store_true",
                   help="apply a monotone envelope to detector scores")
    p.add_argument("--trace-csv")
    p.add_argument("--trace-svg")
    p.set_defaults(func=cmd_monitor)

    p = sub.add_parser("report", help="re-render a saved CSV report")
    p.add_argument("--report", required=True)
    p.add_argument("--format", choices=["table", "csv"], default="table")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        return 1
    except Exception as e:  # machine-readable error surface
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
