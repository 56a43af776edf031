"""Command-line entry point: ``ctslice {cv,train,predict,gradcheck,baseline}``.

Exit codes: 0 success, 1 verification failure (or non-finite training),
2 usage/config error, 3 I/O or data-format error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, read_config_file
from .data import NORM_MODES, DataFormatError, apply_normalizer, fit_normalizer, load_dataset, make_patient_folds
from .evaluation import cross_validate, fold_seed, knn_cross_validate, subsample_indices
from .gradcheck import gradient_check
from .layers import NonFiniteError
from .model import build_model
from .training import fit, predict

log = logging.getLogger("ctslice")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
ALL_ROWS = 2**16  # seed slot for training on every row; fold k reuses slot k

# CLI flag dest -> RunConfig key
CONFIG_FLAGS = {
    "data": "data", "folds": "folds", "fold": "fold", "seed": "seed", "fold_seed": "fold_seed",
    "model_seed": "model_seed", "max_steps": "max_steps", "batch_size": "batch_size",
    "l2_lambda": "l2_lambda", "lr": "lr", "decay_step": "decay_step", "decay_rate": "decay_rate",
    "init": "init", "norm": "norm", "train_subsample": "train_subsample",
    "output_relu": "output_relu", "k": "knn_k", "parallel_folds": "parallel_folds",
}


class UsageError(Exception):
    pass


def _shared(p: argparse.ArgumentParser):
    p.add_argument("--data", help="slice-localization CSV")
    p.add_argument("--config", help="key=value config file, or a JSON report whose config is reused")
    p.add_argument("--seed", type=int)
    p.add_argument("--fold-seed", type=int)
    p.add_argument("--model-seed", type=int)
    p.add_argument("--out", help="output path (checkpoint for train)")
    p.add_argument("--report", help="write the JSON report here instead of stdout")
    p.add_argument("--log", help="line-delimited JSON training log")
    p.add_argument("--folds", type=int)
    p.add_argument("--norm", choices=NORM_MODES)
    p.add_argument("--train-subsample", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def _training(p: argparse.ArgumentParser):
    p.add_argument("--fold", type=int, help="run only this fold")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lambda", dest="l2_lambda", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--decay-step", type=int)
    p.add_argument("--decay-rate", type=float)
    p.add_argument("--init", help="he | fixed:STD")
    p.add_argument("--output-relu", choices=("on", "off"))
    p.add_argument("--parallel-folds", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctslice", description="1D-CNN CT slice location regression")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cv", help="patient-grouped cross-validation of the CNN")
    _shared(p)
    _training(p)

    p = sub.add_parser("train", help="train one model and save a checkpoint")
    _shared(p)
    _training(p)

    p = sub.add_parser("predict", help="predict locations for raw feature rows")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="CSV of 384-value feature rows (or full dataset rows)")
    p.add_argument("--columns", choices=("features", "dataset"), default="features",
                   help="'dataset' takes 386-column rows and uses the middle 384")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", action="store_true", help="flip conv weight gradients (self-test)")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("baseline", help="KNN baseline under the same fold plan")
    _shared(p)
    p.add_argument("--fold", type=int)
    p.add_argument("--k", type=int)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    raw = {}
    if getattr(args, "config", None):
        raw.update(_config_source(args.config))
    for dest, key in CONFIG_FLAGS.items():
        value = getattr(args, dest, None)
        if value is not None:
            raw[key] = value
    return RunConfig.from_mapping(raw).resolved()


def _config_source(path: str) -> dict:
    text = Path(path).read_text(encoding="utf-8") if Path(path).is_file() else None
    if text is not None and text.lstrip().startswith("{"):
        blob = json.loads(text)
        blob = blob.get("config", blob)
        return {k: v for k, v in blob.items() if v is not None}
    return read_config_file(path)


def _emit_report(report_dict: dict, path: str | None):
    text = json.dumps(report_dict, indent=2)
    if path:
        Path(path).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


class _JsonlLog:
    def __init__(self, path):
        self.fh = open(path, "w", encoding="utf-8") if path else None

    def __call__(self, record: dict):
        if self.fh:
            self.fh.write(json.dumps(record) + "\n")

    def close(self):
        if self.fh:
            self.fh.close()


def _progress(every=200):
    def hook(record):
        if record["step"] % every == 0:
            log.info("step %d lr %.3g loss %.4f", record["step"], record["lr"], record["loss"])
    return hook


def _require_data(config: RunConfig):
    if not config.data:
        raise UsageError("--data is required")
    return load_dataset(config.data)


def cmd_cv(args) -> int:
    config = resolve_config(args)
    dataset = _require_data(config)
    plan = make_patient_folds(dataset, config.folds, config.fold_seed)
    jsonl = _JsonlLog(args.log)
    progress = _progress()

    def on_step(fold, record):
        jsonl({"fold": fold, **record})
        progress(record)

    try:
        report = cross_validate(dataset, plan, config, on_step)
    finally:
        jsonl.close()
    agg = report.aggregate
    log.info("pooled MdAE %.3f cm, MAE %.3f cm, RRMSE %s", agg["mdae_cm"], agg["mae_cm"], agg["rrmse"])
    _emit_report(report.to_dict(), args.report)
    return EXIT_OK


def cmd_baseline(args) -> int:
    config = resolve_config(args)
    dataset = _require_data(config)
    plan = make_patient_folds(dataset, config.folds, config.fold_seed)
    report = knn_cross_validate(dataset, plan, config)
    log.info("pooled MAE %.3f cm", report.aggregate["mae_cm"])
    _emit_report(report.to_dict(), args.report)
    return EXIT_OK


def cmd_train(args) -> int:
    """Train on all rows, or on the training side of ``--fold``; save a checkpoint."""
    config = resolve_config(args)
    if not args.out:
        raise UsageError("--out is required for train")
    dataset = _require_data(config)
    idx = np.arange(len(dataset))
    if config.fold is not None:
        plan = make_patient_folds(dataset, config.folds, config.fold_seed)
        idx, _ = plan.split(dataset, config.fold)
    seed = fold_seed(config.model_seed, ALL_ROWS if config.fold is None else config.fold)
    idx = subsample_indices(idx, config.train_subsample, seed)

    norm = fit_normalizer(dataset.features[idx], config.norm)
    x = apply_normalizer(norm, dataset.features[idx]).astype(np.float32)
    y = dataset.targets[idx]
    model = build_model(config.model_config(), seed=seed)
    jsonl = _JsonlLog(args.log or f"{args.out}.log.jsonl")
    progress = _progress()

    def on_step(record):
        jsonl(record)
        progress(record)

    t0 = time.perf_counter()
    try:
        history = fit(model, x, y, config.train_config(), seed, on_step)
    except NonFiniteError as exc:
        print(f"ctslice: error: training diverged at {exc}", file=sys.stderr)
        return EXIT_VERIFY
    finally:
        jsonl.close()
    elapsed = time.perf_counter() - t0

    save_checkpoint(model, norm, args.out, step=len(history),
                    run_config={k: v for k, v in config.to_dict().items() if v is not None})
    train_mse = float(np.mean((predict(model, x).astype(np.float64) - y) ** 2))
    summary = {
        "checkpoint": str(args.out),
        "n_train": int(len(idx)),
        "steps": len(history),
        "train_mse_cm2": train_mse,
        "final_batch_loss": history[-1]["loss"] if history else None,
        "train_seconds": elapsed,
        "config": config.to_dict(),
    }
    log.info("trained %d steps on %d rows: train MSE %.4f cm^2", len(history), len(idx), train_mse)
    _emit_report(summary, args.report)
    return EXIT_OK


def _read_rows(path: str, width: int, columns: str) -> np.ndarray:
    expected = width + 2 if columns == "dataset" else width
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                values = [float(v) for v in row]
            except ValueError:
                if lineno == 1:
                    continue  # header
                raise DataFormatError(f"row {lineno}: non-numeric cell") from None
            if len(values) != expected:
                raise DataFormatError(f"row {lineno}: expected {expected} values, got {len(values)}")
            rows.append(values[1:-1] if columns == "dataset" else values)
    if not rows:
        raise DataFormatError(f"{path}: no rows")
    return np.asarray(rows, dtype=np.float64)


def cmd_predict(args) -> int:
    model, norm = load_checkpoint(args.checkpoint)
    raw = _read_rows(args.input, model.config.input_len, args.columns)
    x = apply_normalizer(norm, raw).astype(np.float32)
    t0 = time.perf_counter()
    preds = predict(model, x)
    latency_ms = 1000 * (time.perf_counter() - t0) / len(x)
    for value in preds:
        print(f"{float(value):.9g}")
    log.info("%d predictions, %.3f ms per sample", len(preds), latency_ms)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradient_check(tolerance=args.tolerance, seed=args.seed, inject_fault=args.inject_fault)
    print(report.format())
    return EXIT_OK if report.passed else EXIT_VERIFY


COMMANDS = {
    "cv": cmd_cv, "train": cmd_train, "predict": cmd_predict,
    "gradcheck": cmd_gradcheck, "baseline": cmd_baseline,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"ctslice: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, CheckpointError, OSError) as exc:
        print(f"ctslice: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NonFiniteError as exc:
        print(f"ctslice: error: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except ValueError as exc:
        print(f"ctslice: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
