"""Error metrics, the patient-grouped cross-validation driver and the KNN baseline."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .config import RunConfig
from .data import Dataset, FoldPlan, apply_normalizer, fit_normalizer
from .model import build_model
from .training import fit, predict

log = logging.getLogger(__name__)

# Published results on the same dataset, for side-by-side reporting only.
PUBLISHED_RESULTS = [
    {"method": "KNN", "year": 2011, "mdae_cm": None, "mae_cm": 1.80, "rrmse": None},
    {"method": "Random forest", "year": 2013, "mdae_cm": None, "mae_cm": None, "rrmse": 0.28},
    {"method": "Anisotropic diffusion KNN", "year": 2014, "mdae_cm": 1.65, "mae_cm": None, "rrmse": None},
    {"method": "Random subspace KNN", "year": 2016, "mdae_cm": 1.22, "mae_cm": None, "rrmse": None},
    {"method": "Local search genetic programming", "year": 2016, "mdae_cm": 3.44, "mae_cm": None, "rrmse": None},
    {"method": "Traditional ANN", "year": 2016, "mdae_cm": 15.32, "mae_cm": None, "rrmse": None},
    {"method": "1D-CNN", "year": 2017, "mdae_cm": 1.04, "mae_cm": 1.69, "rrmse": 0.15},
]

TIMING_FIELDS = ("train_seconds", "infer_ms_per_sample")


def compute_metrics(predictions, targets) -> dict:
    """MdAE and MAE (in target units) and RRMSE.

    RRMSE = sqrt(sum (pred - y)^2 / sum (y - mean(y))^2); it is None when the
    targets are all identical.
    """
    pred = np.asarray(predictions, dtype=np.float64)
    tgt = np.asarray(targets, dtype=np.float64)
    if pred.shape != tgt.shape or pred.ndim != 1:
        raise ValueError("predictions and targets must be equal-length vectors")
    if pred.size == 0:
        raise ValueError("cannot compute metrics on an empty set")
    resid = pred - tgt
    abs_err = np.abs(resid)
    denom = float(np.sum((tgt - tgt.mean()) ** 2))
    rrmse = float(np.sqrt(np.sum(resid ** 2) / denom)) if denom > 0 else None
    return {"mdae": float(np.median(abs_err)), "mae": float(abs_err.mean()), "rrmse": rrmse}


def _cm_keys(metrics: dict) -> dict:
    return {"mdae_cm": metrics["mdae"], "mae_cm": metrics["mae"], "rrmse": metrics["rrmse"]}


# --------------------------------------------------------------------------
# k-nearest neighbours
# --------------------------------------------------------------------------

def knn_predict(train_x, train_y, query, k: int) -> float:
    """Mean target of the k nearest training rows (Euclidean); ties go to the lower index."""
    train_x = np.asarray(train_x, dtype=np.float64)
    if len(train_x) == 0:
        raise ValueError("empty training set")
    if not 1 <= k <= len(train_x):
        raise ValueError(f"k must be in [1, {len(train_x)}], got {k}")
    dist = np.sqrt(np.sum((train_x - np.asarray(query, dtype=np.float64)) ** 2, axis=1))
    nearest = np.sort(np.argsort(dist, kind="stable")[:k])
    return float(np.mean(np.asarray(train_y, dtype=np.float64)[nearest]))


def knn_predict_batch(train_x, train_y, queries, k: int, chunk: int = 256) -> np.ndarray:
    """Vectorized ``knn_predict`` over many queries, same tie rule."""
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    n = len(train_x)
    if n == 0:
        raise ValueError("empty training set")
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    sq_train = np.einsum("ij,ij->i", train_x, train_x)
    out = np.empty(len(queries))
    for start in range(0, len(queries), chunk):
        q = queries[start:start + chunk]
        d2 = sq_train[None, :] - 2.0 * (q @ train_x.T) + np.einsum("ij,ij->i", q, q)[:, None]
        if k == n:
            nearest = np.broadcast_to(np.arange(n), d2.shape)
        else:
            part = np.argpartition(d2, k - 1, axis=1)[:, :k]
            kth = np.take_along_axis(d2, part, axis=1).max(axis=1)
            ties = np.count_nonzero(d2 <= kth[:, None], axis=1) > k
            nearest = np.sort(part, axis=1)
            for row in np.flatnonzero(ties):
                cand = np.flatnonzero(d2[row] <= kth[row])
                order = np.lexsort((cand, d2[row, cand]))
                nearest[row] = np.sort(cand[order[:k]])
        out[start:start + len(q)] = train_y[nearest].mean(axis=1)
    return out


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

@dataclass
class MetricsReport:
    config: dict
    seeds: dict
    folds: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    fold_mean: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    method: str = "cnn"
    predictions: np.ndarray | None = None  # pooled test predictions, row order of the dataset

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "config": self.config,
            "seeds": self.seeds,
            "folds": self.folds,
            "aggregate": self.aggregate,
            "fold_mean": self.fold_mean,
            "timing": self.timing,
            "published": PUBLISHED_RESULTS,
        }

    def to_json(self, indent=2) -> str:
        return json.dumps(self.to_dict(), indent=indent)


def without_timing(report: dict) -> dict:
    """Copy of a report dict with wall-clock fields removed, for reproducibility checks."""
    clean = {k: v for k, v in report.items() if k != "timing"}
    clean["folds"] = [{k: v for k, v in f.items() if k not in TIMING_FIELDS} for f in report["folds"]]
    return clean


def fold_seed(base: int, fold: int) -> int:
    """Per-fold seed derived from a base seed."""
    return int(np.random.SeedSequence([base, fold]).generate_state(1)[0])


def _finish(report: MetricsReport, dataset: Dataset, preds: np.ndarray, tested: np.ndarray):
    mask = tested
    report.aggregate = _cm_keys(compute_metrics(preds[mask], dataset.targets[mask]))
    keys = ("mdae_cm", "mae_cm", "rrmse")
    report.fold_mean = {}
    for key in keys:
        vals = [f[key] for f in report.folds if f[key] is not None]
        report.fold_mean[key] = float(np.mean(vals)) if vals else None
    report.predictions = np.where(mask, preds, np.nan)
    report.timing["total_train_seconds"] = sum(f["train_seconds"] for f in report.folds)


def _folds_to_run(plan: FoldPlan, config: RunConfig) -> list[int]:
    return list(range(plan.k)) if config.fold is None else [config.fold]


def _check_split(fold: int, train_idx, test_idx):
    if len(train_idx) == 0 or len(test_idx) == 0:
        raise ValueError(f"fold {fold} has an empty train or test set")


def subsample_indices(train_idx: np.ndarray, n: int | None, seed: int) -> np.ndarray:
    if n is None or n >= len(train_idx):
        return train_idx
    rng = np.random.default_rng([seed, 0x5B5])
    return np.sort(rng.choice(train_idx, size=n, replace=False))


def run_cnn_fold(dataset: Dataset, plan: FoldPlan, config: RunConfig, fold: int,
                 on_step: Callable[[int, dict], None] | None = None) -> tuple[dict, np.ndarray, np.ndarray]:
    """Train and evaluate one fold. Returns (fold entry, test indices, test predictions)."""
    config = config.resolved()
    train_idx, test_idx = plan.split(dataset, fold)
    _check_split(fold, train_idx, test_idx)
    seed = fold_seed(config.model_seed, fold)
    train_idx = subsample_indices(train_idx, config.train_subsample, seed)

    t0 = time.perf_counter()
    norm = fit_normalizer(dataset.features[train_idx], config.norm)
    x_train = apply_normalizer(norm, dataset.features[train_idx]).astype(np.float32)
    model = build_model(config.model_config(), seed=seed)
    callback = None if on_step is None else (lambda rec: on_step(fold, rec))
    history = fit(model, x_train, dataset.targets[train_idx], config.train_config(), seed, callback)
    train_seconds = time.perf_counter() - t0

    x_test = apply_normalizer(norm, dataset.features[test_idx]).astype(np.float32)
    t0 = time.perf_counter()
    preds = predict(model, x_test).astype(np.float64)
    infer_ms = 1000 * (time.perf_counter() - t0) / len(test_idx)

    metrics = compute_metrics(preds, dataset.targets[test_idx])
    entry = {
        "fold": fold,
        "patients": plan.patients_in(fold),
        "model_seed": seed,
        "n_train": int(len(train_idx)),
        "n_test": int(len(test_idx)),
        **_cm_keys(metrics),
        "steps": len(history),
        "final_loss": history[-1]["loss"] if history else None,
        "train_seconds": train_seconds,
        "infer_ms_per_sample": infer_ms,
    }
    log.info("fold %d: MdAE %.3f cm, MAE %.3f cm (%.0fs)", fold, metrics["mdae"], metrics["mae"], train_seconds)
    return entry, test_idx, preds


def _run_cnn_fold_job(args):
    return run_cnn_fold(*args)


def cross_validate(dataset: Dataset, plan: FoldPlan, config: RunConfig,
                   on_step: Callable[[int, dict], None] | None = None) -> MetricsReport:
    """Patient-grouped CV of the CNN: fresh normalizer and model per fold.

    Aggregate metrics pool every fold's test predictions. Results are
    deterministic for serial runs; with ``parallel_folds > 1`` folds run in
    separate processes and ``on_step`` is not called.
    """
    config = config.resolved()
    folds = _folds_to_run(plan, config)
    report = MetricsReport(
        config=config.to_dict(),
        seeds={"fold_seed": plan.seed, "model_seed": config.model_seed},
    )
    if config.parallel_folds > 1 and len(folds) > 1:
        with ProcessPoolExecutor(max_workers=config.parallel_folds) as pool:
            results = list(pool.map(_run_cnn_fold_job, [(dataset, plan, config, f) for f in folds]))
    else:
        results = [run_cnn_fold(dataset, plan, config, f, on_step) for f in folds]

    preds = np.zeros(len(dataset))
    tested = np.zeros(len(dataset), dtype=bool)
    for entry, test_idx, fold_preds in results:
        report.folds.append(entry)
        preds[test_idx] = fold_preds
        tested[test_idx] = True
    _finish(report, dataset, preds, tested)
    return report


def knn_cross_validate(dataset: Dataset, plan: FoldPlan, config: RunConfig) -> MetricsReport:
    """The KNN baseline under the same fold plan and report shape."""
    config = config.resolved()
    report = MetricsReport(
        config=config.to_dict(),
        seeds={"fold_seed": plan.seed, "model_seed": config.model_seed},
        method=f"knn(k={config.knn_k})",
    )
    preds = np.zeros(len(dataset))
    tested = np.zeros(len(dataset), dtype=bool)
    for fold in _folds_to_run(plan, config):
        train_idx, test_idx = plan.split(dataset, fold)
        _check_split(fold, train_idx, test_idx)
        train_idx = subsample_indices(train_idx, config.train_subsample, fold_seed(config.model_seed, fold))
        if config.knn_k > len(train_idx):
            raise ValueError(f"k={config.knn_k} exceeds the fold-{fold} training set ({len(train_idx)})")
        t0 = time.perf_counter()
        norm = fit_normalizer(dataset.features[train_idx], config.norm)
        x_train = apply_normalizer(norm, dataset.features[train_idx])
        train_seconds = time.perf_counter() - t0
        t0 = time.perf_counter()
        fold_preds = knn_predict_batch(
            x_train, dataset.targets[train_idx], apply_normalizer(norm, dataset.features[test_idx]), config.knn_k
        )
        infer_ms = 1000 * (time.perf_counter() - t0) / len(test_idx)
        metrics = compute_metrics(fold_preds, dataset.targets[test_idx])
        report.folds.append({
            "fold": fold,
            "patients": plan.patients_in(fold),
            "n_train": int(len(train_idx)),
            "n_test": int(len(test_idx)),
            **_cm_keys(metrics),
            "train_seconds": train_seconds,
            "infer_ms_per_sample": infer_ms,
        })
        preds[test_idx] = fold_preds
        tested[test_idx] = True
        log.info("knn fold %d: MAE %.3f cm", fold, metrics["mae"])
    _finish(report, dataset, preds, tested)
    return report
