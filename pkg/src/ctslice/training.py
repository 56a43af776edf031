"""Mini-batch training loop: MSE + L2 loss, Adam, staircase learning rate."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import iterate_batches
from .layers import NonFiniteError
from .model import ModelNet, model_gradients
from .optim import AdamState, LossConfig, adam_step, lr_at_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    max_steps: int = 40000
    batch_size: int = 256
    lr: float = 1e-4
    decay_step: int = 20000
    decay_rate: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    l2_lambda: float = 1e-4

    def adam_state(self) -> AdamState:
        return AdamState(
            base_lr=self.lr, decay_step=self.decay_step, decay_rate=self.decay_rate,
            beta1=self.beta1, beta2=self.beta2, epsilon=self.epsilon,
        )


def fit(
    model: ModelNet,
    x: np.ndarray,
    y: np.ndarray,
    config: TrainConfig,
    seed: int,
    on_step: Callable[[dict], None] | None = None,
    state: AdamState | None = None,
) -> list[dict]:
    """Train ``model`` in place on normalized features ``x`` and targets ``y`` (cm).

    Returns one record ``{"step", "lr", "loss"}`` per update, where ``step``
    counts updates completed before this one. Raises NonFiniteError naming the
    step if the loss or a gradient stops being finite.
    """
    x = np.ascontiguousarray(x, dtype=model.dtype)
    y = np.asarray(y, dtype=model.dtype)
    if len(x) != len(y):
        raise ValueError("features and targets disagree in length")
    state = state or config.adam_state()
    loss_config = LossConfig(config.l2_lambda)
    dropout_rng = np.random.default_rng([seed, 0xD50])
    history = []
    epoch = 0
    while len(history) < config.max_steps:
        for idx in iterate_batches(len(x), config.batch_size, seed, epoch):
            if len(history) >= config.max_steps:
                break
            step = state.t
            lr = lr_at_step(state, step)
            try:
                loss, grads = model_gradients(model, x[idx], y[idx], loss_config, dropout_rng)
                adam_step(model.named_parameters(), grads, state)
            except NonFiniteError as exc:
                raise NonFiniteError(f"step {step}: {exc}") from None
            record = {"step": step, "lr": lr, "loss": loss}
            history.append(record)
            if on_step is not None:
                on_step(record)
        epoch += 1
    return history


def predict(model: ModelNet, x: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Inference-mode predictions in cm, evaluated in fixed-size chunks."""
    out = [model.predict(x[i:i + chunk]) for i in range(0, len(x), chunk)]
    return np.concatenate(out) if out else np.empty(0, dtype=model.dtype)
