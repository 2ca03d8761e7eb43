"""Gaussian logits, class prototypes and the KL-regularized classification loss.

Each input gets a diagonal Gaussian over its K class logits, ``N(mu, exp(log_var))``.
Class ``c`` is anchored by the prototype ``N(one_hot(c), I)``; training adds
``lam * KL(q || prototype)`` to the softmax cross-entropy on ``mu``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .numcore import Node

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0

HEAD_KINDS = ("zclassifier", "nokl", "softmax")


@dataclass(frozen=True)
class HeadKind:
    """Which head the model carries and its loss settings.

    ``nokl`` is the zclassifier head with ``lam`` forced to 0. ``ce_source``
    picks whether cross-entropy is taken on ``mu`` (default) or on the
    latent-averaged sample ``z_bar``.
    """

    kind: str = "zclassifier"
    lam: float = 10.0
    latent_dim: int = 4
    samples: int = 1
    ce_source: str = "mu"

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.kind!r}")
        if self.kind == "nokl":
            object.__setattr__(self, "lam", 0.0)
        if self.kind == "softmax":
            object.__setattr__(self, "lam", 0.0)
        if self.kind == "zclassifier" and not self.lam > 0:
            raise ValueError("zclassifier head needs lam > 0")
        if self.latent_dim < 1 or self.samples < 1:
            raise ValueError("latent_dim and samples must be positive")
        if self.ce_source not in ("mu", "sample"):
            raise ValueError(f"ce_source must be 'mu' or 'sample', got {self.ce_source!r}")

    @classmethod
    def zclassifier(cls, lam: float = 10.0, latent_dim: int = 4, samples: int = 1, **kw) -> "HeadKind":
        return cls("zclassifier", lam, latent_dim, samples, **kw)

    @classmethod
    def nokl(cls, latent_dim: int = 4, samples: int = 1, **kw) -> "HeadKind":
        return cls("nokl", 0.0, latent_dim, samples, **kw)

    @classmethod
    def softmax(cls) -> "HeadKind":
        return cls("softmax", 0.0)

    @property
    def gaussian(self) -> bool:
        return self.kind != "softmax"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "lam": self.lam, "latent_dim": self.latent_dim,
                "samples": self.samples, "ce_source": self.ce_source}

    @classmethod
    def from_dict(cls, d: dict) -> "HeadKind":
        return cls(**d)


@dataclass
class GaussianLogits:
    """Per-sample class-logit means and log-variances, both ``[batch, K]``."""

    mu: Node
    log_var: Node

    def __post_init__(self):
        self.mu = nc.constant(self.mu)
        self.log_var = nc.constant(self.log_var)
        if self.mu.shape != self.log_var.shape or self.mu.value.ndim != 2:
            raise nc.ShapeError("GaussianLogits", self.mu.shape, self.log_var.shape)

    @property
    def num_classes(self) -> int:
        return self.mu.shape[1]


@dataclass(frozen=True)
class ClassPrototype:
    class_index: int
    num_classes: int

    @property
    def mean(self) -> np.ndarray:
        return one_hot(self.class_index, self.num_classes)


@dataclass
class LossBreakdown:
    cross_entropy: float
    kl: float
    total: float
    lam: float
    graph: Node | None = field(default=None, repr=False, compare=False)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label out of range for {num_classes} classes")
    return np.eye(num_classes)[labels]


def kl_to_prototype(mu, log_var, label) -> np.ndarray | float:
    """Closed-form ``KL(N(mu, diag exp(log_var)) || N(one_hot(label), I))``.

    Works on a single vector (returns a float) or row-wise on ``[batch, K]``
    inputs with a label per row.
    """
    mu = np.asarray(mu, dtype=np.float64)
    log_var = np.asarray(log_var, dtype=np.float64)
    if mu.shape != log_var.shape:
        raise nc.ShapeError("kl_to_prototype", mu.shape, log_var.shape)
    target = one_hot(label, mu.shape[-1])
    terms = (mu - target) ** 2 + np.exp(log_var) - 1.0 - log_var
    kl = 0.5 * terms.sum(axis=-1)
    return float(kl) if np.ndim(kl) == 0 else kl


def kl_per_sample(mu: Node, log_var: Node, labels) -> Node:
    """Graph version of :func:`kl_to_prototype`, one value per row."""
    target = one_hot(labels, mu.shape[1])
    diff = mu - target
    terms = diff * diff + nc.exp(log_var) - 1.0 - log_var
    return nc.sum(terms, axis=1) * 0.5


def reparameterize(mu, log_var, eps) -> Node:
    """``z[b, c, j] = mu[b, c] + exp(log_var[b, c] / 2) * eps[b, c, j]``."""
    mu, log_var, eps = nc.constant(mu), nc.constant(log_var), nc.constant(eps)
    if eps.value.ndim != 3 or eps.shape[:2] != mu.shape or mu.shape != log_var.shape:
        raise nc.ShapeError("reparameterize", mu.shape, log_var.shape, eps.shape)
    b, k = mu.shape
    sigma = nc.exp(log_var * 0.5)
    return nc.reshape(mu, (b, k, 1)) + nc.reshape(sigma, (b, k, 1)) * eps


def average_latent(z) -> Node:
    z = nc.constant(z)
    if z.value.ndim != 3:
        raise nc.ShapeError("average_latent", z.shape)
    return nc.mean(z, axis=2)


def sample_logits(gauss: GaussianLogits, latent_dim: int, rng: nc.Rng) -> Node:
    """One reparameterized, latent-averaged draw ``z_bar [batch, K]``."""
    eps = rng.normal(gauss.mu.shape + (latent_dim,))
    return average_latent(reparameterize(gauss.mu, gauss.log_var, eps))


def loss(head: HeadKind, output, labels, rng: nc.Rng | None = None) -> LossBreakdown:
    """Batch-mean cross-entropy plus ``head.lam`` times batch-mean KL.

    ``output`` is :class:`GaussianLogits` for Gaussian heads and a raw logit
    node for the softmax head.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("loss: empty batch")
    if head.gaussian:
        if not isinstance(output, GaussianLogits):
            raise TypeError("Gaussian head expects GaussianLogits")
        if head.ce_source == "sample":
            if rng is None:
                raise ValueError("ce_source='sample' needs an rng")
            draws = [nc.softmax_cross_entropy(sample_logits(output, head.latent_dim, rng.split(s)), labels)
                     for s in range(head.samples)]
            ce = draws[0]
            for d in draws[1:]:
                ce = ce + d
            if len(draws) > 1:
                ce = ce * (1.0 / len(draws))
        else:
            ce = nc.softmax_cross_entropy(output.mu, labels)
        kl = nc.mean(kl_per_sample(output.mu, output.log_var, labels))
    else:
        ce = nc.softmax_cross_entropy(output, labels)
        kl = nc.constant(0.0)
    total = ce + nc.constant(head.lam) * kl
    return LossBreakdown(ce.item(), kl.item(), total.item(), head.lam, graph=total)


def predict(mu) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    if isinstance(mu, GaussianLogits):
        mu = mu.mu
    if isinstance(mu, Node):
        mu = mu.value
    return np.argmax(np.asarray(mu), axis=1)
