"""Config-driven command line: train base models, train codes, evaluate,
simulate, and aggregate reports.

Every command takes ``--config`` (a JSON experiment file); defaults are
materialized back into the file on first run so reruns have no hidden
hyperparameters, and the fully resolved config is copied into each output
directory. Exit codes are stable for scripting: 0 success, 2 usage or
configuration error, 3 artifact-compatibility error, 1 runtime failure.

Dataset files are looked up under ``--root``/config root, falling back to the
``CODEDINFERENCE_DATA`` environment variable: ``<root>/mnist/*-ubyte[.gz]``,
``<root>/fashion-mnist/...``, ``<root>/cifar-10-batches-bin/*.bin``. The
``synthetic`` dataset kind needs no files: uniform images labeled by a seeded
random linear teacher.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
import traceback
from pathlib import Path

import numpy as np
import torch

from . import models
from .coding import TrainedCode
from .data import Dataset, load_cifar10, load_idx
from .evaluation import CSV_COLUMNS, EvalReport, evaluate
from .exceptions import CompatibilityError, ConfigurationError
from .geometry import CodeConfig
from .simulator import SimConfig, simulate
from .training import TrainConfig, train

DATA_ENV = "CODEDINFERENCE_DATA"

DEFAULT_CONFIG = {
    "seed": 0,
    "device": "cpu",
    "deterministic": False,
    "out_dir": "runs/experiment",
    "dataset": {
        "name": "mnist",
        "root": None,
        "count": 2000,        # synthetic only
        "test_count": 500,    # synthetic only
        "n": 28,              # synthetic only
        "channels": 1,        # synthetic only
        "classes": 10,        # synthetic only
    },
    "base_model": {
        "name": "base-mlp",
        "checkpoint": None,
        "digest": None,
        "epochs": 30,
        "optimizer": "adam",
        "learning_rate": 0.001,
        "momentum": 0.9,
        "weight_decay": 0.0,
        "batch_size": 128,
        "milestones": [],
        "gamma": 0.1,
        "augment": False,
        "accuracy_floor": None,
    },
    "code": {
        "k": 2,
        "r": 1,
        "encoder": "mlp",
        "share_channel_weights": True,
    },
    "train": {
        "loss": "MSE-Base",
        "learning_rate": 0.001,
        "l2": 1e-05,
        "batch_samples": None,
        "epochs": 150,
        "patience": 20,
        "validation_fraction": 0.1,
        "scenario_sizes": "exact",
    },
    "simulate": {
        "p": 0.1,
        "requests": 100000,
        "failure_model": "per-group-capped",
        "unrecoverable": "wrong",
    },
}


def _deep_merge(defaults: dict, overrides: dict) -> dict:
    merged = copy.deepcopy(defaults)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(path: str | Path, overrides: argparse.Namespace) -> dict:
    """Load + merge a config file, materializing defaults back on first run."""

    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        user = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
    merged = _deep_merge(DEFAULT_CONFIG, user)
    if merged != user:
        path.write_text(json.dumps(merged, indent=2, sort_keys=True) + "\n")
    for name in ("seed", "device", "out"):
        value = getattr(overrides, name, None)
        if value is not None:
            merged["out_dir" if name == "out" else name] = value
    if getattr(overrides, "deterministic", False):
        merged["deterministic"] = True
    return merged


def _prepare_out(config: dict) -> Path:
    out_dir = Path(config["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps(config, indent=2, sort_keys=True) + "\n")
    if config.get("deterministic"):
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(int(config["seed"]))
    return out_dir


# ---------------------------------------------------------------------------
# Dataset resolution
# ---------------------------------------------------------------------------

IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find_idx(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise ConfigurationError(f"dataset file not found: {directory / stem}[.gz]")


def _synthetic_split(cfg: dict, split: str, seed: int) -> Dataset:
    count = int(cfg["test_count" if split == "test" else "count"])
    n, channels, classes = int(cfg["n"]), int(cfg["channels"]), int(cfg["classes"])
    rng = np.random.default_rng(seed + (1 if split == "test" else 0))
    images = rng.uniform(0.0, 1.0, size=(count, channels, n, n)).astype(np.float32)
    teacher = np.random.default_rng(seed + 10_000).normal(
        0.0, 1.0, size=(channels * n * n, classes)).astype(np.float32)
    labels = (images.reshape(count, -1) @ teacher).argmax(axis=1).astype(np.int64)
    return Dataset(images=images, labels=labels, split=split, name="synthetic",
                   preprocessing=f"synthetic-seed{seed}")


def load_dataset(config: dict, split: str) -> Dataset:
    cfg = config["dataset"]
    name = cfg["name"]
    if name == "synthetic":
        return _synthetic_split(cfg, split, int(config["seed"]))
    root = cfg.get("root") or os.environ.get(DATA_ENV)
    if not root:
        raise ConfigurationError(
            f"dataset root not set; pass dataset.root or export {DATA_ENV}")
    root = Path(root)
    if name in ("mnist", "fashion-mnist"):
        directory = root / name
        image_stem, label_stem = IDX_FILES[split]
        ds = load_idx(_find_idx(directory, image_stem),
                      _find_idx(directory, label_stem), split=split, name=name)
        return ds
    if name == "cifar10":
        directory = root / "cifar-10-batches-bin"
        if not directory.exists():
            raise ConfigurationError(f"dataset directory not found: {directory}")
        return load_cifar10(directory, split=split)
    raise ConfigurationError(
        f"unknown dataset {name!r}; choose mnist, fashion-mnist, cifar10, or synthetic")


def _build_base(config: dict, train_ds: Dataset) -> models.BaseModel:
    name = config["base_model"]["name"]
    seed = int(config["seed"])
    if name == "base-mlp":
        return models.build_base_mlp(seed=seed)
    if name == "logistic":
        return models.build_logistic_regression(seed=seed)
    if name == "resnet18":
        classes = int(train_ds.labels.max()) + 1 if train_ds.labels is not None else 10
        return models.build_resnet18(channels=train_ds.channels, n=train_ds.n,
                                     m=classes, seed=seed)
    raise ConfigurationError(
        f"unknown base model {name!r}; choose base-mlp, logistic, or resnet18")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train_base(args) -> int:
    config = load_config(args.config, args)
    out_dir = _prepare_out(config)
    train_ds = load_dataset(config, "train")
    test_ds = load_dataset(config, "test")
    model = _build_base(config, train_ds)

    bm = config["base_model"]
    log_lines: list[str] = []

    def log(record):
        log_lines.append(json.dumps(record))
        print(f"epoch {record['epoch']}: train loss {record['train_loss']:.4f}")

    models.train_base(
        model, train_ds.images, train_ds.labels, test_ds.images, test_ds.labels,
        epochs=int(bm["epochs"]), batch_size=int(bm["batch_size"]),
        optimizer=bm["optimizer"], learning_rate=float(bm["learning_rate"]),
        momentum=float(bm["momentum"]), weight_decay=float(bm["weight_decay"]),
        milestones=tuple(bm["milestones"]), gamma=float(bm["gamma"]),
        augment=bool(bm["augment"]), seed=int(config["seed"]),
        device=config["device"], log=log)
    model.dataset = train_ds.name

    checkpoint = models.save_base_model(model, out_dir / "base")
    (out_dir / "train_base_log.ndjson").write_text("\n".join(log_lines) + "\n")
    print(f"test accuracy: {model.test_accuracy:.4f}")
    print(f"checkpoint: {checkpoint}")

    floor = bm.get("accuracy_floor")
    if floor is not None and model.test_accuracy < float(floor):
        sidecar_path = out_dir / "base.json"
        sidecar = json.loads(sidecar_path.read_text())
        sidecar["below_accuracy_floor"] = True
        sidecar_path.write_text(json.dumps(sidecar, indent=2) + "\n")
        print(f"WARNING: accuracy {model.test_accuracy:.4f} below floor {floor}",
              file=sys.stderr)
        return 1
    return 0


def _load_base_checkpoint(config: dict, args) -> models.BaseModel:
    path = getattr(args, "base", None) or config["base_model"].get("checkpoint")
    if not path:
        raise ConfigurationError("no base checkpoint: pass --base or set "
                                 "base_model.checkpoint")
    path = Path(path)
    if not path.with_suffix(".json").exists():
        raise ConfigurationError(f"base checkpoint not found: {path}")
    model = models.load_base_model(path)
    pinned = config["base_model"].get("digest")
    if pinned and pinned != model.param_digest:
        raise CompatibilityError(
            f"base checkpoint digest {model.param_digest[:12]}… does not match "
            f"the config's pinned digest {pinned[:12]}…")
    return model


def cmd_train_code(args) -> int:
    config = load_config(args.config, args)
    out_dir = _prepare_out(config)
    base = _load_base_checkpoint(config, args)
    train_ds = load_dataset(config, "train")

    code_cfg = config["code"]
    channels, n, _ = base.input_shape
    code_config = CodeConfig(k=int(code_cfg["k"]), r=int(code_cfg["r"]), n=n,
                             channels=channels, m=base.output_dim)
    tr = config["train"]
    train_config = TrainConfig(
        loss=tr["loss"], learning_rate=float(tr["learning_rate"]),
        l2=float(tr["l2"]), batch_samples=tr["batch_samples"],
        epochs=int(tr["epochs"]), patience=int(tr["patience"]),
        validation_fraction=float(tr["validation_fraction"]),
        scenario_sizes=tr["scenario_sizes"], seed=int(config["seed"]),
        device=config["device"], deterministic=bool(config["deterministic"]))

    trained = train(
        train_ds, base, code_config, train_config,
        architecture=code_cfg["encoder"],
        share_channel_weights=bool(code_cfg["share_channel_weights"]),
        log_path=out_dir / "train_log.ndjson",
        checkpoint_dir=out_dir / "checkpoints", resume=bool(args.resume))
    code_dir = trained.save(out_dir / "code")
    val = trained.val_recovery
    print(f"best epoch: {trained.epoch}")
    print(f"validation recovery accuracy: "
          f"{val:.4f}" if val is not None else "validation recovery accuracy: n/a")
    print(f"trained code: {code_dir}")
    return 0


def cmd_eval(args) -> int:
    config = load_config(args.config, args)
    out_dir = _prepare_out(config)
    if args.grid:
        return _write_grid(Path(args.grid), out_dir / "grid.csv")

    if not args.code:
        raise ConfigurationError("pass --code (a trained-code directory)")
    trained = TrainedCode.load(args.code)
    base = _load_base_checkpoint(config, args)
    test_ds = load_dataset(config, "test")

    report = evaluate(trained, base, test_ds, device=config["device"])
    (out_dir / "report.json").write_text(report.to_json())
    (out_dir / "report.csv").write_text(report.to_csv())
    print(f"recovery accuracy: {report.recovery_accuracy:.4f}")
    if report.overall_accuracy is not None:
        print(f"overall accuracy:  {report.overall_accuracy:.4f}")
    if args.per_scenario:
        for s in report.scenarios:
            overall = "" if s.overall is None else f"  overall {s.overall:.4f}"
            print(f"  pattern {list(s.pattern)}: recovery {s.recovery:.4f}{overall}")
    print(f"report: {out_dir / 'report.json'}")
    return 0


def _write_grid(sweep_dir: Path, out_path: Path) -> int:
    if not sweep_dir.is_dir():
        raise ConfigurationError(f"sweep directory not found: {sweep_dir}")
    reports = sorted(sweep_dir.rglob("report.json"))
    if not reports:
        raise ConfigurationError(f"no report.json files under {sweep_dir}")
    rows = []
    for path in reports:
        report = EvalReport.from_dict(json.loads(path.read_text()))
        rows.append(report.csv_row())
    rows.sort()
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        writer.writerows(rows)
    print(f"grid: {out_path} ({len(rows)} rows)")
    return 0


def cmd_simulate(args) -> int:
    config = load_config(args.config, args)
    out_dir = _prepare_out(config)
    if not args.code:
        raise ConfigurationError("pass --code (a trained-code directory)")
    trained = TrainedCode.load(args.code)
    base = _load_base_checkpoint(config, args)
    test_ds = load_dataset(config, "test")

    sim_cfg = config["simulate"]
    ps = [float(x) for x in args.p.split(",")] if args.p else [float(sim_cfg["p"])]
    rows = []
    last_result = None
    for p in ps:
        sim = SimConfig(p=p, requests=int(sim_cfg["requests"]),
                        failure_model=sim_cfg["failure_model"],
                        seed=int(config["seed"]),
                        unrecoverable=sim_cfg["unrecoverable"])
        result = simulate(test_ds, base, trained, sim, device=config["device"])
        last_result = result
        rows.append([f"{p:.4f}", base.name, str(trained.config.k),
                     str(trained.config.r), f"{result.accuracy_without_code:.6f}",
                     f"{result.accuracy_with_code:.6f}", str(result.recovered),
                     str(result.unrecoverable)])
        print(f"p={p:.3f}: without code {result.accuracy_without_code:.4f}, "
              f"with code {result.accuracy_with_code:.4f}")

    (out_dir / "simulation.json").write_text(last_result.to_json())
    with open(out_dir / "accuracy_vs_p.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["p", "model", "k", "r", "acc_no_code", "acc_with_code",
                         "recovered", "unrecoverable"])
        writer.writerows(rows)
    _render_accuracy_plot(rows, out_dir / "accuracy_vs_p.png")
    print(f"sweep: {out_dir / 'accuracy_vs_p.csv'}")
    return 0


def _render_accuracy_plot(rows, path: Path) -> None:
    """Best-effort rendering; never affects exit status."""
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        ps = [float(r[0]) for r in rows]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(ps, [float(r[4]) for r in rows], "o-", label="without code")
        ax.plot(ps, [float(r[5]) for r in rows], "s-", label="with code")
        ax.set_xlabel("unavailability probability p")
        ax.set_ylabel("end-to-end accuracy")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
    except Exception as exc:  # noqa: BLE001 - rendering is optional
        print(f"plot skipped: {exc}", file=sys.stderr)


def cmd_report(args) -> int:
    config = load_config(args.config, args)
    out_dir = _prepare_out(config)
    return _write_grid(Path(args.sweep), out_dir / "grid.csv")


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="codedinference",
        description="Learn and evaluate erasure codes for resilient inference")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment JSON file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--device", default=None)
        p.add_argument("--deterministic", action="store_true")
        p.add_argument("--out", default=None, help="output directory override")

    p = sub.add_parser("train-base", help="train and checkpoint a base model")
    common(p)
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("train-code", help="train an erasure code against a base checkpoint")
    common(p)
    p.add_argument("--base", default=None, help="base checkpoint path (…/base[.pt])")
    p.add_argument("--resume", action="store_true",
                   help="continue from the run's last checkpoint")
    p.set_defaults(func=cmd_train_code)

    p = sub.add_parser("eval", help="evaluate a trained code over the test split")
    common(p)
    p.add_argument("--code", default=None, help="trained-code directory")
    p.add_argument("--base", default=None)
    p.add_argument("--per-scenario", action="store_true")
    p.add_argument("--grid", default=None, metavar="SWEEP_DIR",
                   help="aggregate report.json files under a sweep directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("simulate", help="coded-inference simulation over p values")
    common(p)
    p.add_argument("--code", default=None, help="trained-code directory")
    p.add_argument("--base", default=None)
    p.add_argument("--p", default=None,
                   help="comma-separated unavailability probabilities")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="aggregate a sweep directory into a grid CSV")
    common(p)
    p.add_argument("--sweep", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # argparse usage errors / --help
        return int(exc.code or 0)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CompatibilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return 2
    except Exception:  # noqa: BLE001 - CLI boundary
        traceback.print_exc()
        return 1


def console_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_entry()
