"""The 1D-CNN slice-location regressor.

Default topology (VALID padding everywhere)::

    [B,384] -dropout(0.2)-> [B,1,384]
    conv 32x41 -> BN -> ReLU -> pool/2     [B,32,344] -> [B,32,172]
    conv 64x21 -> BN -> ReLU -> pool/2     [B,64,152] -> [B,64,76]
    conv 128x11 -> BN -> ReLU -> pool/2    [B,128,66] -> [B,128,33]
    flatten                                [B,4224]
    FC 1024 -> ReLU -> dropout(0.5)
    FC 1024 -> ReLU -> dropout(0.5)
    FC 1 (linear head)                     [B]

which has 5,512,129 trainable parameters.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .layers import (
    BatchNorm1d,
    Conv1d,
    Dense,
    Dropout,
    Flatten,
    Layer,
    MaxPool1d,
    NonFiniteError,
    ReLU,
    ShapeError,
    Unsqueeze,
)
from .optim import LossConfig, mse_l2_loss

BLOCK_ORDERS = ("conv-bn-relu-pool", "conv-bn-pool-relu")


@dataclass(frozen=True)
class ModelConfig:
    input_len: int = 384
    conv: tuple = ((32, 41), (64, 21), (128, 11))  # (out_channels, kernel_len)
    conv_stride: int = 1
    pool_window: int = 2
    pool_stride: int = 2
    fc: tuple = (1024, 1024, 1)
    input_dropout: float = 0.2
    fc_dropout: float = 0.5
    init: str = "he"  # "he": N(0, 2/fan_in); "fixed": N(0, init_std^2)
    init_std: float = 0.01
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    output_relu: bool = False
    block_order: str = "conv-bn-relu-pool"

    def __post_init__(self):
        object.__setattr__(self, "conv", tuple(tuple(int(v) for v in c) for c in self.conv))
        object.__setattr__(self, "fc", tuple(int(v) for v in self.fc))
        if self.init not in ("he", "fixed"):
            raise ValueError(f"unknown init scheme {self.init!r}")
        if self.block_order not in BLOCK_ORDERS:
            raise ValueError(f"block_order must be one of {BLOCK_ORDERS}")
        if not self.fc or self.fc[-1] != 1:
            raise ValueError("the last fully-connected layer must have exactly 1 unit")

    # key=value text form, used in checkpoints and config files
    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "conv":
                value = ",".join(f"{c}x{k}" for c, k in value)
            elif f.name == "fc":
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "on" if value else "off"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls.from_mapping(dict(line.split("=", 1) for line in text.splitlines() if line.strip()))

    @classmethod
    def from_mapping(cls, raw: dict) -> "ModelConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            if key not in types:
                raise ValueError(f"unknown model config key {key!r}")
            if not isinstance(value, str):
                kwargs[key] = value
            elif key == "conv":
                kwargs[key] = tuple(tuple(int(v) for v in item.split("x")) for item in value.split(",") if item)
            elif key == "fc":
                kwargs[key] = tuple(int(v) for v in value.split(","))
            elif key == "output_relu":
                kwargs[key] = value.strip().lower() in ("on", "true", "1", "yes")
            elif types[key] == "int":
                kwargs[key] = int(value)
            elif types[key] == "float":
                kwargs[key] = float(value)
            else:
                kwargs[key] = value.strip()
        return cls(**kwargs)


class ModelNet:
    """An ordered list of layers plus a handful of whole-network helpers."""

    def __init__(self, config: ModelConfig, layers: list[Layer]):
        self.config = config
        self.layers = layers

    @property
    def dtype(self):
        for layer in self.layers:
            for p in layer.params.values():
                return p.dtype
        return np.dtype(np.float32)

    def named_parameters(self) -> dict[str, np.ndarray]:
        """Trainable tensors keyed ``"<layer>.<param>"`` (views, not copies)."""
        return {f"{l.name}.{k}": v for l in self.layers for k, v in l.params.items()}

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {f"{l.name}.{k}": v for l in self.layers for k, v in l.buffers.items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {**self.named_parameters(), **self.named_buffers()}

    def regularized_names(self) -> list[str]:
        return [f"{l.name}.weight" for l in self.layers if l.kind in ("conv", "dense")]

    def astype(self, dtype) -> "ModelNet":
        """Copy of the model with every tensor cast to ``dtype``."""
        clone = build_model(self.config, seed=0, dtype=dtype, init=False)
        clone.load_state(self.state_dict())
        return clone

    def load_state(self, state: dict[str, np.ndarray]):
        for layer in self.layers:
            for store in (layer.params, layer.buffers):
                for key, old in store.items():
                    name = f"{layer.name}.{key}"
                    if name not in state:
                        raise KeyError(f"missing tensor {name}")
                    new = np.asarray(state[name])
                    if new.shape != old.shape:
                        raise ShapeError(f"{name}: shape {new.shape} does not match model {old.shape}")
                    store[key] = new.astype(old.dtype, copy=True)

    def shape_trace(self, batch: int = 1) -> list[tuple]:
        """Output shape of every layer for an input of ``batch`` samples."""
        shape = (self.config.input_len,)
        trace = [(batch,) + shape]
        for layer in self.layers:
            shape = layer.out_shape(shape)
            trace.append((batch,) + shape)
        return trace

    def forward(self, x, training=False, rng=None):
        """Return ``(predictions [B], caches)``; caches are None in inference mode."""
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != self.config.input_len:
            raise ShapeError(f"expected input [batch, {self.config.input_len}], got {list(x.shape)}")
        h = x.astype(self.dtype, copy=False)
        caches = [] if training else None
        for layer in self.layers:
            h, cache = layer.forward(h, training, rng)
            if training:
                caches.append(cache)
        if not np.all(np.isfinite(h)):
            raise NonFiniteError("non-finite model output")
        return h[:, 0], caches

    def predict(self, x) -> np.ndarray:
        return self.forward(x, training=False)[0]

    def backward(self, caches, grad_pred) -> tuple[np.ndarray | None, dict[str, np.ndarray]]:
        """Reverse pass; returns (grad w.r.t. input, grads keyed like named_parameters).

        The input gradient is None when the first conv layer has
        ``need_input_grad`` switched off (the default for training).
        """
        if caches is None or len(caches) != len(self.layers):
            raise ValueError("backward needs the caches of a training-mode forward pass")
        g = np.asarray(grad_pred, dtype=self.dtype)[:, None]
        grads = {}
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            g, pgrads = layer.backward(cache, g)
            for k, v in pgrads.items():
                grads[f"{layer.name}.{k}"] = v
            if g is None:
                break
        return g, grads


def _conv_block(config, i, c_in, c_out, kernel, dtype):
    n = i + 1
    conv = Conv1d(f"conv{n}", c_in, c_out, kernel, config.conv_stride, dtype)
    bn = BatchNorm1d(f"bn{n}", c_out, config.bn_momentum, config.bn_eps, dtype)
    relu = ReLU(f"relu{n}")
    pool = MaxPool1d(f"pool{n}", config.pool_window, config.pool_stride)
    if config.block_order == "conv-bn-relu-pool":
        return [conv, bn, relu, pool]
    return [conv, bn, pool, relu]


def build_model(config: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float32, init=True) -> ModelNet:
    """Assemble the network; weights ~ zero-mean Gaussian, biases 0, BN gamma=1, beta=0."""
    layers: list[Layer] = [Dropout("drop_in", config.input_dropout), Unsqueeze("unsqueeze")]
    c_in = 1
    for i, (c_out, kernel) in enumerate(config.conv):
        layers += _conv_block(config, i, c_in, c_out, kernel, dtype)
        c_in = c_out
    layers.append(Flatten("flatten"))

    # resolve the flattened width before creating dense layers
    probe = ModelNet(config, layers)
    (flat,) = probe.shape_trace()[-1][1:]
    in_dim = flat
    n_fc = len(config.fc)
    for j, out_dim in enumerate(config.fc):
        n = j + 1
        layers.append(Dense(f"fc{n}", in_dim, out_dim, dtype))
        if j < n_fc - 1:
            layers.append(ReLU(f"fc_relu{n}"))
            layers.append(Dropout(f"fc_drop{n}", config.fc_dropout))
        elif config.output_relu:
            layers.append(ReLU("out_relu"))
        in_dim = out_dim

    for layer in layers:
        if layer.kind == "conv":
            layer.need_input_grad = False
            break

    model = ModelNet(config, layers)
    model.shape_trace()  # validates every layer against its incoming shape
    if init:
        rng = np.random.default_rng(seed)
        for layer in layers:
            if layer.kind not in ("conv", "dense"):
                continue
            w = layer.params["weight"]
            std = np.sqrt(2.0 / layer.fan_in) if config.init == "he" else config.init_std
            layer.params["weight"] = rng.normal(0.0, std, size=w.shape).astype(dtype)
    return model


def count_parameters(model: ModelNet) -> int:
    """Trainable scalars: conv/dense weights and biases plus BN gamma/beta."""
    return int(sum(p.size for p in model.named_parameters().values()))


def model_gradients(model: ModelNet, x, targets, loss_config: LossConfig = LossConfig(), rng=None):
    """Training-mode forward + backward. Returns ``(loss, grads)`` for every trainable tensor."""
    if rng is None:
        rng = np.random.default_rng(0)
    pred, caches = model.forward(x, training=True, rng=rng)
    params = model.named_parameters()
    reg = model.regularized_names()
    loss, dpred = mse_l2_loss(pred, targets, [params[n] for n in reg], loss_config)
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite loss")
    _, grads = model.backward(caches, dpred)
    if loss_config.l2_lambda:
        scale = 2.0 * loss_config.l2_lambda
        for n in reg:
            grads[n] = grads[n] + (scale * params[n]).astype(grads[n].dtype)
    return loss, grads
