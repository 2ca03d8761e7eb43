"""Desk-scale feature extractors with a residual switch, plus the output head.

Two kinds are supported. ``mlp`` is a linear stem followed by two-layer
blocks; ``conv`` is a 3x3 conv stem followed by two-conv blocks with 2x2
average pooling between blocks and global average pooling at the end. With
``residual=True`` each block computes ``relu(shortcut(x) + F(x))``, otherwise
``relu(F(x))``, so the two settings differ only in the skip connection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .gaussian_head import LOG_VAR_MAX, LOG_VAR_MIN, GaussianLogits, HeadKind

# scale applied to the He-uniform log-variance rows so initial sigma^2 stays near 1
LOG_VAR_INIT_SCALE = 0.05


@dataclass
class BackboneConfig:
    kind: str
    widths: list[int]
    residual: bool
    input_shape: tuple[int, ...]
    num_classes: int
    head: HeadKind = field(default_factory=HeadKind)

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if isinstance(self.head, dict):
            self.head = HeadKind.from_dict(self.head)
        if self.kind not in ("mlp", "conv"):
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if not self.widths or min(self.widths) < 1:
            raise ValueError("widths must be a nonempty list of positive ints")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.kind == "mlp" and len(self.input_shape) != 1:
            raise ValueError("mlp backbone expects a flat input_shape (dim,)")
        if self.kind == "conv":
            if len(self.input_shape) != 3:
                raise ValueError("conv backbone expects input_shape (C, H, W)")
            side = 2 ** max(len(self.widths) - 2, 0)
            if self.input_shape[1] % side or self.input_shape[2] % side:
                raise ValueError(f"conv input H, W must be divisible by {side}")

    @property
    def num_blocks(self) -> int:
        return len(self.widths) - 1

    @property
    def head_outputs(self) -> int:
        return 2 * self.num_classes if self.head.gaussian else self.num_classes

    def to_dict(self) -> dict:
        return {"kind": self.kind, "widths": list(self.widths), "residual": self.residual,
                "input_shape": list(self.input_shape), "num_classes": self.num_classes,
                "head": self.head.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)


def resnet_mini(input_shape=(3, 32, 32), num_classes=10, head=None, channels=(16, 16, 32, 64)):
    return BackboneConfig("conv", list(channels), True, input_shape, num_classes, head or HeadKind())


def vgg_mini(input_shape=(3, 32, 32), num_classes=10, head=None, channels=(16, 16, 32, 64)):
    return BackboneConfig("conv", list(channels), False, input_shape, num_classes, head or HeadKind())


@dataclass
class Model:
    config: BackboneConfig
    params: dict[str, nc.Node]
    seed: int
    meta: dict = field(default_factory=dict)

    def parameters(self) -> list[nc.Node]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.value.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def param_shapes(config: BackboneConfig) -> dict[str, tuple]:
    """Ordered parameter names and shapes implied by ``config``."""
    shapes: dict[str, tuple] = {}
    w = config.widths
    if config.kind == "mlp":
        shapes["stem.w"] = (config.input_shape[0], w[0])
        shapes["stem.b"] = (w[0],)
        for i in range(1, len(w)):
            shapes[f"block{i}.fc1.w"] = (w[i - 1], w[i])
            shapes[f"block{i}.fc1.b"] = (w[i],)
            shapes[f"block{i}.fc2.w"] = (w[i], w[i])
            shapes[f"block{i}.fc2.b"] = (w[i],)
            if config.residual and w[i] != w[i - 1]:
                shapes[f"block{i}.proj.w"] = (w[i - 1], w[i])
    else:
        shapes["stem.w"] = (w[0], config.input_shape[0], 3, 3)
        shapes["stem.b"] = (w[0],)
        for i in range(1, len(w)):
            shapes[f"block{i}.conv1.w"] = (w[i], w[i - 1], 3, 3)
            shapes[f"block{i}.conv1.b"] = (w[i],)
            shapes[f"block{i}.conv2.w"] = (w[i], w[i], 3, 3)
            shapes[f"block{i}.conv2.b"] = (w[i],)
            if config.residual and w[i] != w[i - 1]:
                shapes[f"block{i}.proj.w"] = (w[i], w[i - 1], 1, 1)
    shapes["head.w"] = (w[-1], config.head_outputs)
    shapes["head.b"] = (config.head_outputs,)
    return shapes


def _fan_in(name: str, shape: tuple) -> int:
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    return shape[0]


def init(config: BackboneConfig, seed: int) -> Model:
    """He-uniform weights, zero biases, deterministic in ``seed``."""
    rng = nc.Rng(seed).split("init")
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            value = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / _fan_in(name, shape))
            value = nc.rand_uniform(rng.split(name), shape, -bound, bound)
        params[name] = nc.parameter(value, name)
    if config.head.gaussian:
        params["head.w"].value[:, config.num_classes:] *= LOG_VAR_INIT_SCALE
    return Model(config, params, int(seed))


def _linear(x, p, prefix):
    return nc.matmul(x, p[prefix + ".w"]) + p[prefix + ".b"]


def _conv(x, p, prefix):
    return nc.conv2d(x, p[prefix + ".w"], p[prefix + ".b"], stride=1, pad=1)


def block_forward(model: Model, i: int, x):
    """Hidden block ``i`` (1-based) applied to ``x``."""
    p, cfg = model.params, model.config
    layer = _linear if cfg.kind == "mlp" else _conv
    names = ("fc1", "fc2") if cfg.kind == "mlp" else ("conv1", "conv2")
    h = layer(nc.relu(layer(x, p, f"block{i}.{names[0]}")), p, f"block{i}.{names[1]}")
    if not cfg.residual:
        return nc.relu(h)
    proj = f"block{i}.proj.w"
    if proj in p:
        shortcut = nc.matmul(x, p[proj]) if cfg.kind == "mlp" else nc.conv2d(x, p[proj])
    else:
        shortcut = x
    return nc.relu(shortcut + h)


def features(model: Model, batch) -> nc.Node:
    cfg = model.config
    x = nc.constant(batch)
    if x.shape[1:] != cfg.input_shape:
        raise nc.ShapeError("forward", x.shape, (None,) + cfg.input_shape)
    p = model.params
    if cfg.kind == "mlp":
        h = nc.relu(_linear(x, p, "stem"))
        for i in range(1, len(cfg.widths)):
            h = block_forward(model, i, h)
        return h
    h = nc.relu(_conv(x, p, "stem"))
    for i in range(1, len(cfg.widths)):
        h = block_forward(model, i, h)
        if i < len(cfg.widths) - 1:
            h = nc.avg_pool2d(h, 2)
    return nc.mean(h, axis=(2, 3))


def forward(model: Model, batch):
    """``GaussianLogits`` for Gaussian heads, raw logits ``[B, K]`` for softmax."""
    out = _linear(features(model, batch), model.params, "head")
    k = model.config.num_classes
    if not model.config.head.gaussian:
        return out
    mu = out[:, :k]
    log_var = nc.clip(out[:, k:], LOG_VAR_MIN, LOG_VAR_MAX)
    return GaussianLogits(mu, log_var)


# cap on input values per inference batch; im2col on 32x32 images costs ~6 MB per sample
INFER_VALUES = 1 << 19


def infer(model: Model, inputs: np.ndarray, batch_size: int | None = None):
    """Batched forward pass returning numpy arrays.

    Returns ``(mu, log_var)`` for Gaussian heads and ``(logits, None)`` for
    the softmax head. The default batch size is 512 rows, reduced for large
    inputs so conv backbones stay within a few hundred MB.
    """
    if batch_size is None:
        per_row = int(np.prod(inputs.shape[1:])) or 1
        batch_size = max(1, min(512, INFER_VALUES // per_row))
    mus, lvs = [], []
    for start in range(0, len(inputs), batch_size):
        out = forward(model, inputs[start:start + batch_size])
        if isinstance(out, GaussianLogits):
            mus.append(out.mu.value)
            lvs.append(out.log_var.value)
        else:
            mus.append(out.value)
    empty = np.zeros((0, model.config.num_classes))
    mu = np.concatenate(mus) if mus else empty
    if not model.config.head.gaussian:
        return mu, None
    return mu, (np.concatenate(lvs) if lvs else empty)
