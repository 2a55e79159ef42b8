"""Encoder, heads and the parameter container used for training.

Parameters are initialised from a 64-bit seed with one named random
stream per tensor, so initial weights do not depend on construction order.
Weights are uniform in +-sqrt(6/fan_in) (variance preserving through ReLU,
which matters here because there are no normalization layers); biases are
uniform in +-1/sqrt(fan_in).
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from trajssl.nn import tensor as T
from trajssl.nn.tensor import Tensor
from trajssl.rng import stream

TAP_NAMES = ("conv1", "conv2", "conv3", "conv4")
HEAD_KINDS = ("projector", "compression", "linear_probe", "relpose_probe")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    widths: tuple = (8, 16, 32, 64)
    feature_dim: int = 64
    compression_hidden: int = 128

    def tap_shape(self, i: int) -> tuple:
        s = self.image_size // 2 ** (i + 1)
        return (self.widths[i], s, s)

    def tap_dim(self, i: int) -> int:
        c, h, w = self.tap_shape(i)
        return c * h * w


@dataclass(frozen=True)
class HeadSpec:
    kind: str
    in_dim: int
    hidden_dim: int
    out_dim: int

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.kind!r}")


def init_uniform(seed: int, name: str, shape: tuple, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = (1.0 if name.endswith(".bias") else np.sqrt(6.0)) / np.sqrt(fan_in)
    return stream(seed, f"init/{name}").uniform(-bound, bound, size=shape).astype(dtype)


class Params(OrderedDict):
    """Ordered name -> Tensor mapping with a few conveniences."""

    def add(self, seed, name, shape, fan_in, dtype):
        self[name] = Tensor(init_uniform(seed, name, shape, fan_in, dtype), requires_grad=True, name=name)
        return self[name]

    def astype(self, dtype) -> "Params":
        return Params((k, Tensor(v.data.astype(dtype), requires_grad=True, name=k)) for k, v in self.items())

    def arrays(self) -> dict:
        return {k: v.data for k, v in self.items()}

    def zero_grad(self):
        for p in self.values():
            p.grad = None


def add_linear(params: Params, seed, prefix, in_dim, out_dim, dtype):
    params.add(seed, f"{prefix}.weight", (out_dim, in_dim), in_dim, dtype)
    params.add(seed, f"{prefix}.bias", (out_dim,), in_dim, dtype)


def add_head(params: Params, seed, prefix, spec: HeadSpec, dtype):
    if spec.kind == "linear_probe":
        add_linear(params, seed, f"{prefix}.fc", spec.in_dim, spec.out_dim, dtype)
    else:
        add_linear(params, seed, f"{prefix}.fc1", spec.in_dim, spec.hidden_dim, dtype)
        add_linear(params, seed, f"{prefix}.fc2", spec.hidden_dim, spec.out_dim, dtype)


def apply_linear(params, prefix, x: Tensor) -> Tensor:
    return T.linear(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"])


def flatten_tap(tap: Tensor) -> Tensor:
    """(N, H, W, C) channels-last tap -> (N, C*H*W) in channel-major row order."""
    return T.transpose(tap, (0, 3, 1, 2)).reshape(tap.shape[0], -1)


def head_forward(spec: HeadSpec, params, x: Tensor, prefix: str = "head") -> Tensor:
    """Run a head on a (batch, in_dim) input."""
    if x.ndim != 2 or x.shape[-1] != spec.in_dim:
        raise ValueError(f"{spec.kind} head expects (batch, {spec.in_dim}) input, got {x.shape}")
    if spec.kind == "linear_probe":
        return apply_linear(params, f"{prefix}.fc", x)
    h = T.relu(apply_linear(params, f"{prefix}.fc1", x))
    return apply_linear(params, f"{prefix}.fc2", h)


def make_head(spec: HeadSpec, seed: int, prefix: str = "head", dtype=np.float32) -> Params:
    params = Params()
    add_head(params, seed, prefix, spec, dtype)
    return params


class Model:
    """Four conv blocks, pooled feature, projector and two compression heads."""

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float32,
                 params: Params | None = None):
        self.config = config
        self.seed = seed
        if params is None:
            params = self._init_params(seed, dtype)
        self.params = params

    def _init_params(self, seed, dtype) -> Params:
        cfg = self.config
        p = Params()
        cin = 1
        for i, cout in enumerate(cfg.widths):
            p.add(seed, f"encoder.block{i + 1}.weight", (cout, cin, 3, 3), cin * 9, dtype)
            p.add(seed, f"encoder.block{i + 1}.bias", (cout,), cin * 9, dtype)
            cin = cout
        add_linear(p, seed, "encoder.fc", cin, cfg.feature_dim, dtype)
        for name, spec in self.head_specs().items():
            add_head(p, seed, name, spec, dtype)
        return p

    def head_specs(self) -> dict:
        cfg = self.config
        d = cfg.feature_dim
        return {
            "projector": HeadSpec("projector", d, d, d // 2),
            "compress3": HeadSpec("compression", cfg.tap_dim(2), cfg.compression_hidden, d),
            "compress4": HeadSpec("compression", cfg.tap_dim(3), cfg.compression_hidden, d),
        }

    def astype(self, dtype) -> "Model":
        return Model(self.config, self.seed, params=self.params.astype(dtype))

    def encode(self, images, params=None) -> dict:
        """Block taps (conv1..conv4) and pooled feature for (N, 1, H, W) grayscale images.

        Taps are returned channels-last, (N, H, W, C); use
        :func:`flatten_tap` for the (C, H, W) row-major flattening.
        """
        params = self.params if params is None else params
        x = images if isinstance(images, Tensor) else Tensor(images)
        size = self.config.image_size
        if x.ndim != 4 or x.shape[1:] != (1, size, size):
            raise ValueError(f"encoder expects (N, 1, {size}, {size}) images, got {x.shape}")
        x = x.reshape(x.shape[0], size, size, 1)
        taps = {}
        for i in range(len(self.config.widths)):
            pre = f"encoder.block{i + 1}"
            x = T.avg_pool2d(T.relu(T.conv2d(x, params[f"{pre}.weight"], params[f"{pre}.bias"])), 2)
            taps[TAP_NAMES[i]] = x
        taps["feature"] = apply_linear(params, "encoder.fc", T.global_avg_pool(x))
        return taps

    def head(self, name: str, x: Tensor, params=None) -> Tensor:
        params = self.params if params is None else params
        if x.ndim == 4:
            x = flatten_tap(x)
        return head_forward(self.head_specs()[name], params, x, prefix=name)
