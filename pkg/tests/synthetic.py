"""A small stand-in for the UCI slice table, for tests that cannot ship the real file.

Each feature is a bump centred somewhere along the body axis, so the target is
recoverable from the features; per-patient gain and noise keep it from being
trivial. A few columns hold the -0.25 "nothing in range" sentinel or are constant.
"""

import csv

import numpy as np

from ctslice.data import N_FEATURES, Dataset


def make_dataset(n_patients=12, slices=(20, 40), seed=0, n_features=N_FEATURES) -> Dataset:
    rng = np.random.default_rng(seed)
    centres = rng.uniform(-10, 110, n_features)
    widths = rng.uniform(8, 30, n_features)
    pids, feats, targets = [], [], []
    for p in range(n_patients):
        n = int(rng.integers(slices[0], slices[1] + 1))
        lo, hi = rng.uniform(0, 15), rng.uniform(80, 97)
        t = np.sort(rng.uniform(lo, hi, n))
        gain = rng.uniform(0.8, 1.2)
        x = gain * np.exp(-0.5 * ((t[:, None] - centres) / widths) ** 2)
        x += rng.normal(0, 0.03, x.shape)
        x[:, :4] = -0.25
        x[:, 4] = 0.0
        x[x < 0.02] = np.where(rng.random(np.count_nonzero(x < 0.02)) < 0.3, -0.25, 0.0)
        pids += [p * 3 + 1] * n  # sparse, non-contiguous ids like the real file
        feats.append(x)
        targets.append(t)
    return Dataset(np.asarray(pids), np.vstack(feats), np.concatenate(targets))


def write_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patientId"] + [f"value{i}" for i in range(dataset.n_features)] + ["reference"])
        for pid, x, y in zip(dataset.patient_ids, dataset.features, dataset.targets):
            w.writerow([int(pid)] + [repr(float(v)) for v in x] + [repr(float(y))])
