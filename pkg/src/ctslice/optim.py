"""MSE + L2 loss, Adam, and the staircase learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import NonFiniteError


@dataclass(frozen=True)
class LossConfig:
    """``l2_lambda`` multiplies the sum of squared conv/dense weights.

    Biases and batch-norm scale/shift are never regularized.
    """

    l2_lambda: float = 1e-4

    def __post_init__(self):
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be non-negative")


def mse_l2_loss(predictions, targets, weights=(), config: LossConfig = LossConfig()):
    """Return ``(loss, d loss / d predictions)``.

    loss = mean((pred - target)^2) + l2_lambda * sum_w sum(w^2). The L2 term's
    gradient w.r.t. each weight is ``2 * l2_lambda * w`` and is added by the
    caller, since it does not flow through the predictions.
    """
    pred = np.asarray(predictions)
    tgt = np.asarray(targets, dtype=pred.dtype)
    if pred.shape != tgt.shape or pred.ndim != 1:
        raise ValueError(f"predictions {pred.shape} and targets {tgt.shape} must be equal-length vectors")
    if pred.size == 0:
        raise ValueError("empty batch")
    resid = pred - tgt
    n = pred.size
    loss = float(np.dot(resid.astype(np.float64), resid.astype(np.float64)) / n)
    if config.l2_lambda:
        loss += config.l2_lambda * sum(float(np.sum(np.square(w, dtype=np.float64))) for w in weights)
    return loss, (2.0 / n) * resid


@dataclass
class AdamState:
    base_lr: float = 1e-4
    decay_step: int = 20000
    decay_rate: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def lr_at_step(state: AdamState, t: int) -> float:
    """Staircase decay: base_lr * decay_rate ** floor(t / decay_step)."""
    if t < 0:
        raise ValueError("step must be non-negative")
    return state.base_lr * state.decay_rate ** (t // state.decay_step)


def adam_step(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update, applied to ``params`` in place.

    The schedule is read at the number of updates completed so far (0 for
    the first update), the usual global-step convention.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name} at step {state.t}")

    lr = lr_at_step(state, state.t)
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        denom = np.sqrt(v / corr2)
        denom += state.epsilon
        p -= (lr / corr1) * m / denom
    return params, state
