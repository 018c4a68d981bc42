"""Command-line entry points: build-data, train, evaluate, ablate, report.

Run directories are content-addressed by the resolved-config fingerprint so
identical configs land in the same place; reruns refuse to overwrite without
--force. Exit codes: 0 success, 2 usage/config/data errors, 3 non-finite
training abort.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    DatasetError,
    LongTailSpec,
    build_bundle,
    load_base_dataset,
    load_bundle,
    save_bundle,
)
from .evaluation import cam, cam_overlay, evaluate, format_accuracy_table, EvalReport
from .losses import NonFiniteLossError
from .model import model_from_checkpoint, load_checkpoint
from .reporting import load_metrics, render_report
from .trainer import (
    ConfigError,
    TrainConfig,
    config_from_dict,
    config_fingerprint,
    config_to_dict,
    load_config,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_ABORT = 3

# Preset constant blocks. The cifar presets carry the published 200-epoch
# recipe; desk presets scale it to 60 epochs (decay 48/54, DRW and masking
# from 48) on the small backbone for CPU-scale runs.
_DESK = {
    "backbone": "tiny4",
    "epochs": 60,
    "lr_schedule": "step:48,54:0.1",
    "drw_start_epoch": 48,
    "mask_start_epoch": 48,
    "checkpoint_interval": 20,
}

PRESETS = {
    "cifar100lt-smcl-drw": {},
    "cifar100lt-smcl": {"drw_start_epoch": 200},
    "cifar100lt-ce-drw": {"mu": 0.0, "mask_probability": 0.0},
    "cifar100lt-erm": {"mu": 0.0, "mask_probability": 0.0, "drw_start_epoch": 200},
    "cifar10lt-smcl-drw": {},
    "cifar10lt-smcl": {"drw_start_epoch": 200},
    "cifar10lt-ce-drw": {"mu": 0.0, "mask_probability": 0.0},
    "cifar10lt-erm": {"mu": 0.0, "mask_probability": 0.0, "drw_start_epoch": 200},
    "desk-smcl-drw": dict(_DESK),
    "desk-ce-drw": dict(_DESK, mu=0.0, mask_probability=0.0),
    "desk-erm": dict(_DESK, mu=0.0, mask_probability=0.0, drw_start_epoch=60),
}

ABLATION_AXES = {
    "mask_mode": [
        ("random", {"mask_mode": "random"}),
        ("center", {"mask_mode": "center"}),
        ("saliency", {"mask_mode": "saliency"}),
    ],
    "contrastive_on_off": [
        ("ce-only", {"mu": 0.0}),
        ("supcon", {}),
    ],
}


def code_revision():
    """Git commit of the installed tree, or a version tag when unavailable."""
    try:
        out = subprocess.run(
            ["git", "-C", str(Path(__file__).resolve().parent), "rev-parse", "HEAD"],
            capture_output=True, text=True, timeout=10,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return f"unversioned-{__version__}"


def resolve_config(preset=None, config_path=None, overrides=None):
    """Defaults -> preset -> config file -> --set overrides, then validate."""
    cfg = TrainConfig()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; have {sorted(PRESETS)}")
        cfg = config_from_dict(PRESETS[preset], base=cfg)
    if config_path is not None:
        cfg = load_config(config_path, base=cfg)
    if overrides:
        cfg = config_from_dict(overrides, base=cfg)
    return cfg.validate()


def parse_overrides(pairs):
    overrides = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def write_record(run_dir, record):
    (Path(run_dir) / "record.json").write_text(
        json.dumps(record, sort_keys=True, indent=2) + "\n"
    )


def read_record(run_dir):
    path = Path(run_dir) / "record.json"
    if not path.exists():
        raise FileNotFoundError(f"missing experiment record: {path}")
    return json.loads(path.read_text())


def run_training(cfg, bundle, runs_root, dataset_path, preset=None, force=False, resume=False):
    """Train one config into its content-addressed run dir; returns (dir, record, code)."""
    fingerprint = config_fingerprint(cfg)
    run_dir = Path(runs_root) / f"run-{fingerprint}"
    record_path = run_dir / "record.json"
    if record_path.exists() and not (force or resume):
        raise ConfigError(
            f"run {run_dir} already has a record; pass --force to redo or --resume to continue"
        )
    run_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "preset": preset,
        "config": config_to_dict(cfg),
        "config_fingerprint": fingerprint,
        "dataset_fingerprint": bundle.fingerprint(),
        "dataset_path": str(dataset_path),
        "code_revision": code_revision(),
        "metrics_path": "metrics.jsonl",
        "checkpoint_path": "checkpoint.pt",
        "status": "running",
        "final_eval": None,
    }
    write_record(run_dir, record)
    try:
        result = train(cfg, bundle, run_dir, resume=resume)
    except NonFiniteLossError as err:
        record["status"] = "aborted"
        record["error"] = str(err)
        write_record(run_dir, record)
        print(f"training aborted (non-finite loss): {err}", file=sys.stderr)
        return run_dir, record, EXIT_ABORT
    record["status"] = "completed"
    record["completed_epochs"] = result.completed_epochs
    if result.final_eval is not None:
        record["final_eval"] = result.final_eval.to_json_dict()
    write_record(run_dir, record)
    return run_dir, record, EXIT_OK


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_build_data(args):
    train_set, test_set = load_base_dataset(args.dataset)
    counts = train_set.histogram().counts
    n_max = args.n_max if args.n_max is not None else int(counts.min())
    spec = LongTailSpec(num_classes=train_set.num_classes, rho=args.rho, n_max=n_max)
    bundle = build_bundle(train_set, test_set, spec, args.seed,
                          extra_meta={"source": str(args.dataset)})
    out = save_bundle(args.out, bundle)
    hist = bundle.histogram
    print(f"built {out}: {hist.num_classes} classes, {hist.total} samples, "
          f"n_0={hist.counts[0]}, n_{hist.num_classes - 1}={hist.counts[-1]}, "
          f"rho={hist.imbalance_ratio:g}")
    return EXIT_OK


def cmd_train(args):
    cfg = resolve_config(args.preset, args.config, parse_overrides(args.set))
    bundle = load_bundle(args.data)
    run_dir, record, code = run_training(
        cfg, bundle, args.runs_root, args.data,
        preset=args.preset, force=args.force, resume=args.resume,
    )
    if code == EXIT_OK:
        print(f"run dir: {run_dir}")
        if record["final_eval"] is not None:
            rep = EvalReport.from_json_dict(record["final_eval"])
            print(rep.text_table(record["preset"] or record["config_fingerprint"]), end="")
    return code


def cmd_evaluate(args):
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise FileNotFoundError(f"no checkpoint at {ckpt_path}")
    bundle = load_bundle(args.data)
    if bundle.test is None:
        raise DatasetError("built dataset has no test split to evaluate on")
    ckpt = load_checkpoint(ckpt_path)
    model = model_from_checkpoint(ckpt)
    report = evaluate(model, bundle.test, bundle.histogram,
                      bundle.channel_mean, bundle.channel_std)
    out_dir = Path(args.out) if args.out else ckpt_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "eval.json").write_text(report.to_json())
    print(report.text_table(ckpt_path.stem), end="")
    if args.cam_samples > 0:
        _dump_cams(model, bundle, out_dir, args.cam_samples)
    return EXIT_OK


def _dump_cams(model, bundle, out_dir, count):
    from PIL import Image

    from .evaluation import test_tensor

    images = test_tensor(bundle.test, bundle.channel_mean, bundle.channel_std)
    count = min(count, images.shape[0])
    for i in range(count):
        logits, _ = model(images[i : i + 1])
        pred = int(logits.detach().numpy().argmax())
        heat = cam(model, images[i], pred)
        overlay = cam_overlay(bundle.test.images[i], heat)
        Image.fromarray(overlay).save(out_dir / f"cam_{i}_class{pred}.png")


def cmd_ablate(args):
    base = resolve_config(args.preset, args.config, parse_overrides(args.set))
    bundle = load_bundle(args.data)
    variants = ABLATION_AXES[args.axis]
    named_reports = []
    rows = []
    worst = EXIT_OK
    for name, overrides in variants:
        cfg = config_from_dict(overrides, base=base)  # shared seed from base
        reuse = None
        if not args.force:
            run_dir = Path(args.runs_root) / f"run-{config_fingerprint(cfg)}"
            if (run_dir / "record.json").exists():
                rec = read_record(run_dir)
                if rec.get("status") == "completed":
                    reuse = (run_dir, rec)
        if reuse is None:
            run_dir, rec, code = run_training(
                cfg, bundle, args.runs_root, args.data, force=args.force, resume=True,
            )
            worst = max(worst, code)
            if code != EXIT_OK:
                continue
        else:
            run_dir, rec = reuse
        if rec.get("final_eval"):
            named_reports.append((name, EvalReport.from_json_dict(rec["final_eval"])))
        rows.append((name, str(run_dir)))
    out_dir = Path(args.out) if args.out else Path(args.runs_root) / f"ablate-{args.axis}"
    out_dir.mkdir(parents=True, exist_ok=True)
    table = format_accuracy_table(named_reports) if named_reports else "no completed variants\n"
    (out_dir / "table.txt").write_text(table)
    if named_reports:
        from .reporting import write_accuracy_csv

        write_accuracy_csv(out_dir / "table.csv", named_reports)
    print(table, end="")
    return worst


def cmd_report(args):
    runs = []
    for run_dir in args.runs:
        record = read_record(run_dir)  # missing record -> exit 2 via FileNotFoundError
        name = record.get("preset") or record.get("config_fingerprint") or Path(run_dir).name
        metrics_file = Path(run_dir) / record.get("metrics_path", "metrics.jsonl")
        metrics_rows = load_metrics(metrics_file) if metrics_file.exists() else []
        report = None
        if record.get("final_eval"):
            report = EvalReport.from_json_dict(record["final_eval"])
        runs.append({"name": name, "metrics_rows": metrics_rows, "report": report})
    written = render_report(runs, args.out)
    print((Path(args.out) / "report.txt").read_text(), end="")
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="smcl",
        description="Saliency-masked contrastive learning for long-tailed classification",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-data", help="carve a long-tailed training set from a balanced base")
    p.add_argument("--dataset", required=True, help="base dataset (CIFAR dir/tar, npz, or image folder)")
    p.add_argument("--rho", type=float, required=True, help="imbalance ratio n_max/n_min")
    p.add_argument("--n-max", type=int, default=None, help="largest class size (default: base per-class count)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output bundle directory")
    p.set_defaults(func=cmd_build_data)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--data", required=True, help="built dataset bundle directory")
    p.add_argument("--preset", default=None, help=f"one of {sorted(PRESETS)}")
    p.add_argument("--config", default=None, help="flat key-value config file (YAML/JSON)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    p.add_argument("--runs-root", default="runs")
    p.add_argument("--force", action="store_true", help="redo an existing run directory")
    p.add_argument("--resume", action="store_true", help="continue from the run's checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a bundle's test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="output directory (default: checkpoint's)")
    p.add_argument("--cam-samples", type=int, default=0, help="dump N CAM overlays")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run an ablation axis with a shared seed")
    p.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    p.add_argument("--data", required=True)
    p.add_argument("--preset", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--runs-root", default="runs")
    p.add_argument("--out", default=None, help="table output directory")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="render tables and loss plots for runs")
    p.add_argument("--runs", nargs="+", required=True, help="run directories")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetError, FileNotFoundError, NotADirectoryError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as err:
        print(f"training aborted: {err}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
