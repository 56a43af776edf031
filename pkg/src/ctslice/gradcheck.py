"""Central finite-difference verification of the hand-written backward passes.

All checks run in float64. The relative error of one gradient entry is
``|analytic - numeric| / max(|analytic|, |numeric|, FLOOR)``, so a gradient
with a flipped sign scores 2. The floor is ``FLOOR * max(1, |objective|)``:
central differences carry roundoff of roughly eps * |objective| / h, times
the depth of the forward pass, so exactly-zero gradients (a conv bias
feeding batch norm) are compared in absolute terms against a bound well
above that noise.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .model import ModelConfig, ModelNet, build_model, model_gradients
from .optim import LossConfig, mse_l2_loss

REL_STEP = 1e-5
FLOOR = 1e-5

# Same topology as the default network, scaled down: 32 -> 28 -> 14 -> 12 -> 6 -> 4 -> 2
REDUCED_CONFIG = ModelConfig(
    input_len=32, conv=((3, 5), (4, 3), (5, 3)), fc=(6, 5, 1),
    input_dropout=0.2, fc_dropout=0.5,
)
DENSE_ONLY_CONFIG = ModelConfig(input_len=8, conv=(), fc=(5, 1), input_dropout=0.0)


def rel_error(analytic, numeric, floor=FLOOR) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(f, x: np.ndarray, indices=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (perturbed in place).

    The step is ``REL_STEP * max(1, |x_i|)``. With ``indices`` only those flat
    positions are evaluated (others are left 0).
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        h = REL_STEP * max(1.0, abs(orig))
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


# --------------------------------------------------------------------------
# per-layer-type checks on small random instances
# --------------------------------------------------------------------------

def _layer_instance(kind: str, rng):
    if kind == "conv":
        layer = L.Conv1d("conv", 3, 4, 5, stride=2, dtype=np.float64)
        layer.params["weight"] = rng.normal(size=layer.params["weight"].shape)
        layer.params["bias"] = rng.normal(size=4)
        return layer, rng.normal(size=(2, 3, 13))
    if kind == "batchnorm":
        layer = L.BatchNorm1d("bn", 3, dtype=np.float64)
        layer.params["gamma"] = rng.normal(size=3)
        layer.params["beta"] = rng.normal(size=3)
        return layer, rng.normal(size=(4, 3, 5))
    if kind == "maxpool":
        return L.MaxPool1d("pool"), rng.normal(size=(2, 3, 9))
    if kind == "dense":
        layer = L.Dense("fc", 4, 3, dtype=np.float64)
        layer.params["weight"] = rng.normal(size=(3, 4))
        layer.params["bias"] = rng.normal(size=3)
        return layer, rng.normal(size=(5, 4))
    if kind == "relu":
        x = rng.normal(size=(4, 6))
        return L.ReLU("relu"), np.where(np.abs(x) < 0.05, 0.5, x)  # keep away from the kink
    if kind == "dropout":
        return L.Dropout("drop", 0.5), rng.normal(size=(4, 6))
    raise ValueError(f"unknown layer kind {kind!r}")


LAYER_KINDS = ("conv", "batchnorm", "maxpool", "dense", "relu", "dropout")


def check_layer(kind: str, seed: int = 0) -> dict[str, float]:
    """Max relative error of input and parameter gradients for one layer type.

    The objective is ``sum(out * R)`` for a fixed random R, so the analytic
    gradient is ``layer.backward(cache, R)``.
    """
    rng = np.random.default_rng(seed)
    layer, x = _layer_instance(kind, rng)
    mask_seed = int(rng.integers(2**31))
    out, cache = layer.forward(x, True, np.random.default_rng(mask_seed))
    weights = rng.normal(size=out.shape)
    saved_buffers = {k: v.copy() for k, v in layer.buffers.items()}
    grad_x, grads = layer.backward(cache, weights)

    def objective():
        y, _ = layer.forward(x, True, np.random.default_rng(mask_seed))
        return float(np.sum(y * weights))

    floor = FLOOR * max(1.0, abs(objective()))
    errors = {"input": float(rel_error(grad_x, numeric_grad(objective, x), floor).max())}
    for name, p in layer.params.items():
        errors[name] = float(rel_error(grads[name], numeric_grad(objective, p), floor).max())
    layer.buffers.update(saved_buffers)
    return errors


# --------------------------------------------------------------------------
# whole-model checks
# --------------------------------------------------------------------------

def model_loss_fn(model: ModelNet, x, y, loss_config: LossConfig, mask_seed: int):
    """Scalar training loss with dropout masks frozen by ``mask_seed``.

    BN running statistics are restored after every call so repeated
    evaluation leaves the model unchanged.
    """
    buffers = {k: v.copy() for k, v in model.named_buffers().items()}

    def loss():
        pred, _ = model.forward(x, training=True, rng=np.random.default_rng(mask_seed))
        params = model.named_parameters()
        value, _ = mse_l2_loss(pred, y, [params[n] for n in model.regularized_names()], loss_config)
        for layer in model.layers:
            for k in layer.buffers:
                layer.buffers[k][...] = buffers[f"{layer.name}.{k}"]
        return value

    return loss


def check_model(model: ModelNet, x, y, loss_config=LossConfig(1e-3), seed=0, samples_per_tensor=None):
    """Relative errors of analytic vs numeric parameter gradients, per tensor.

    ``samples_per_tensor`` limits the number of entries checked per tensor
    (randomly chosen); None checks every entry.
    """
    if model.dtype != np.float64:
        raise ValueError("gradient checks need a float64 model")
    rng = np.random.default_rng(seed)
    mask_seed = int(rng.integers(2**31))
    f = model_loss_fn(model, x, y, loss_config, mask_seed)
    buffers = {k: v.copy() for k, v in model.named_buffers().items()}
    _, grads = model_gradients(model, x, y, loss_config, np.random.default_rng(mask_seed))
    model.load_state({**model.named_parameters(), **buffers})
    floor = FLOOR * max(1.0, abs(f()))
    errors = {}
    for name, p in model.named_parameters().items():
        if samples_per_tensor is None or samples_per_tensor >= p.size:
            idx = None
        else:
            idx = rng.choice(p.size, size=samples_per_tensor, replace=False)
        num = numeric_grad(f, p, idx)
        err = rel_error(grads[name], num, floor)
        errors[name] = float(err.max() if idx is None else err.reshape(-1)[idx].max())
    return errors


def spot_check_model(model: ModelNet, x, y, n_params=20, loss_config=LossConfig(1e-3), seed=0) -> float:
    """Max relative error over ``n_params`` randomly chosen scalar parameters."""
    if model.dtype != np.float64:
        raise ValueError("gradient checks need a float64 model")
    rng = np.random.default_rng(seed)
    mask_seed = int(rng.integers(2**31))
    buffers = {k: v.copy() for k, v in model.named_buffers().items()}
    _, grads = model_gradients(model, x, y, loss_config, np.random.default_rng(mask_seed))
    model.load_state({**model.named_parameters(), **buffers})
    f = model_loss_fn(model, x, y, loss_config, mask_seed)
    floor = FLOOR * max(1.0, abs(f()))
    params = model.named_parameters()
    names = list(params)
    sizes = np.array([params[n].size for n in names])
    worst = 0.0
    for flat in rng.choice(sizes.sum(), size=n_params, replace=False):
        t = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
        offset = int(flat - (sizes[:t].sum() if t else 0))
        name = names[t]
        num = numeric_grad(f, params[name], [offset]).reshape(-1)[offset]
        worst = max(worst, float(rel_error(grads[name].reshape(-1)[offset], num, floor)))
    return worst


@contextmanager
def conv_sign_fault():
    """Test fixture: flip the sign of every conv weight gradient."""
    original = L.Conv1d.backward

    def corrupted(self, cache, grad_out):
        gx, grads = original(self, cache, grad_out)
        return gx, {**grads, "weight": -grads["weight"]}

    L.Conv1d.backward = corrupted
    try:
        yield
    finally:
        L.Conv1d.backward = original


def randomize_affine(model: ModelNet, rng) -> None:
    """Give biases and BN gamma/beta generic values.

    Zero-initialized biases put pre-activations exactly on the ReLU kink
    whenever an upstream dropout mask zeroes a whole row.
    """
    for layer in model.layers:
        if layer.kind == "batchnorm":
            layer.params["gamma"] = rng.uniform(0.5, 1.5, size=layer.params["gamma"].shape)
            layer.params["beta"] = rng.normal(0, 0.1, size=layer.params["beta"].shape)
        elif "bias" in layer.params:
            layer.params["bias"] = rng.normal(0, 0.1, size=layer.params["bias"].shape)


@dataclass
class GradCheckReport:
    tolerance: float
    rows: list = field(default_factory=list)  # (name, max relative error)

    @property
    def max_error(self) -> float:
        return max(err for _, err in self.rows)

    @property
    def passed(self) -> bool:
        return all(err < self.tolerance for _, err in self.rows)

    def format(self) -> str:
        width = max(len(n) for n, _ in self.rows)
        lines = [f"{'check':<{width}}  max rel err  status"]
        for name, err in self.rows:
            lines.append(f"{name:<{width}}  {err:11.3e}  {'ok' if err < self.tolerance else 'FAIL'}")
        lines.append(f"tolerance {self.tolerance:g}: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def gradient_check(config: ModelConfig = REDUCED_CONFIG, tolerance: float = 1e-4, seed: int = 0,
                   batch: int = 4, inject_fault: bool = False) -> GradCheckReport:
    """Per-layer-type checks plus a whole-model check of every parametric layer."""
    report = GradCheckReport(tolerance)

    def run():
        for kind in LAYER_KINDS:
            errs = check_layer(kind, seed)
            report.rows.append((f"{kind} (unit)", max(errs.values())))
        rng = np.random.default_rng(seed)
        model = build_model(config, seed=seed, dtype=np.float64)
        randomize_affine(model, rng)
        x = rng.normal(size=(batch, config.input_len))
        y = rng.normal(size=batch)
        errs = check_model(model, x, y, seed=seed)
        by_layer: dict[str, float] = {}
        for name, err in errs.items():
            layer = name.split(".")[0]
            by_layer[layer] = max(by_layer.get(layer, 0.0), err)
        for layer, err in by_layer.items():
            report.rows.append((f"model/{layer}", err))

    if inject_fault:
        with conv_sign_fault():
            run()
    else:
        run()
    return report
