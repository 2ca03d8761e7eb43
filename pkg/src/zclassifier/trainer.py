"""Training loop, optimizers, per-class reports and the checkpoint format."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .backbone import BackboneConfig, Model, forward, infer, param_shapes
from .data import Dataset
from .gaussian_head import GaussianLogits, kl_to_prototype, loss, predict

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "ce", "kl", "total", "train_acc", "val_acc", "seconds")


@dataclass
class OptimizerConfig:
    name: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.name not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.name!r}")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    eval_every: int = 1
    val_fraction: float = 0.1

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and eval_every >= 1 required")


@dataclass
class EpochRecord:
    epoch: int
    ce: float
    kl: float
    total: float
    train_acc: float
    val_acc: float | None
    seconds: float
    val_kl: float | None = None

    def csv_row(self) -> list[str]:
        val = "" if self.val_acc is None else repr(self.val_acc)
        return [str(self.epoch), repr(self.ce), repr(self.kl), repr(self.total),
                repr(self.train_acc), val, f"{self.seconds:.3f}"]


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, batch, ce, kl, total):
        self.epoch, self.batch = epoch, batch
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: "
                         f"ce={ce}, kl={kl}, total={total}")


class SGD:
    """Heavy-ball momentum: ``v = m v + g; p -= lr v``."""

    def __init__(self, params, lr, momentum=0.0):
        self.params = list(params)
        self.lr, self.momentum = lr, momentum
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad
            p.value -= self.lr * v


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(cfg: OptimizerConfig, params):
    if cfg.name == "sgd":
        return SGD(params, cfg.lr, cfg.momentum)
    return Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)


def mean_kl(model: Model, dataset: Dataset) -> float | None:
    if not model.config.head.gaussian or len(dataset) == 0:
        return None
    mu, log_var = infer(model, dataset.inputs)
    return float(np.mean(kl_to_prototype(mu, log_var, dataset.labels)))


def accuracy(model: Model, dataset: Dataset) -> float:
    mu, _ = infer(model, dataset.inputs)
    return float(np.mean(predict(mu) == dataset.labels))


def train(model: Model, dataset: Dataset, config: TrainConfig, validation: Dataset | None = None,
          history_path=None):
    """Fit ``model`` in place; returns ``(model, records)``.

    When ``validation`` is not given, a seeded ``val_fraction`` of ``dataset``
    is held out. With ``history_path`` each epoch is appended to a CSV as it
    finishes.
    """
    if len(dataset) == 0:
        raise ValueError("train: empty dataset")
    k = model.config.num_classes
    if dataset.labels is None or dataset.labels.max() >= k or dataset.labels.min() < 0:
        raise ValueError(f"train: labels must lie in [0, {k})")
    rng = nc.Rng(config.seed)
    if validation is None and config.val_fraction > 0:
        dataset, validation = dataset.split(config.val_fraction, rng.split("val-split"))
    head = model.config.head
    opt = make_optimizer(config.optimizer, model.parameters())
    writer = None
    if history_path is not None:
        fh = open(history_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
    records: list[EpochRecord] = []
    try:
        for epoch in range(1, config.epochs + 1):
            start = time.perf_counter()
            order = rng.split(f"shuffle-{epoch}").permutation(len(dataset))
            eps_rng = rng.split(f"eps-{epoch}")
            sums = np.zeros(3)
            correct = 0
            for b, lo in enumerate(range(0, len(dataset), config.batch_size)):
                idx = order[lo:lo + config.batch_size]
                x, y = dataset.inputs[idx], dataset.labels[idx]
                out = forward(model, x)
                parts = loss(head, out, y, rng=eps_rng.split(b))
                if not all(math.isfinite(v) for v in (parts.cross_entropy, parts.kl, parts.total)):
                    raise TrainingDiverged(epoch, b, parts.cross_entropy, parts.kl, parts.total)
                model.zero_grad()
                nc.backward(parts.graph)
                opt.step()
                sums += len(idx) * np.array([parts.cross_entropy, parts.kl, parts.total])
                mu = out.mu if isinstance(out, GaussianLogits) else out
                correct += int(np.sum(predict(mu) == y))
            ce, kl, total = sums / len(dataset)
            val_acc = val_kl = None
            if validation is not None and len(validation) and (
                    epoch % config.eval_every == 0 or epoch == config.epochs):
                val_acc = accuracy(model, validation)
                val_kl = mean_kl(model, validation)
            rec = EpochRecord(epoch, float(ce), float(kl), float(total), correct / len(dataset),
                              val_acc, time.perf_counter() - start, val_kl)
            records.append(rec)
            if writer is not None:
                writer.writerow(rec.csv_row())
                fh.flush()
            log.info("epoch %d ce=%.4f kl=%.4f train_acc=%.4f val_acc=%s", epoch, ce, kl,
                     rec.train_acc, val_acc)
    finally:
        if writer is not None:
            fh.close()
    model.zero_grad()
    return model, records


@dataclass
class ClassReport:
    precision: list[float]
    recall: list[float]
    support: list[int]
    accuracy: float
    confusion: list[list[int]] = field(repr=False)

    def to_dict(self) -> dict:
        return asdict(self)


def class_report(y_true, y_pred, num_classes: int) -> ClassReport:
    """Per-class precision/recall; undefined ratios are reported as 0."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    tp = np.diag(cm)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros(num_classes), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros(num_classes), where=actual > 0)
    acc = float(tp.sum() / len(y_true)) if len(y_true) else 0.0
    return ClassReport(precision.tolist(), recall.tolist(), actual.tolist(), acc, cm.tolist())


def evaluate(model: Model, dataset: Dataset) -> ClassReport:
    mu, _ = infer(model, dataset.inputs)
    return class_report(dataset.labels, predict(mu), model.config.num_classes)


def write_history(records, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for rec in records:
            writer.writerow(rec.csv_row())


# checkpoints

MAGIC = b"ZCLF1"


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def save_checkpoint(model: Model, path) -> None:
    """``ZCLF1`` + u32 LE manifest length + JSON manifest + f32 LE payload."""
    names = list(model.params)
    manifest = {
        "config": model.config.to_dict(),
        "seed": model.seed,
        "params": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
        "meta": model.meta,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(model.params[n].value.astype("<f4").tobytes() for n in names)
    Path(path).write_bytes(MAGIC + struct.pack("<I", len(blob)) + blob + payload)


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: bad magic")
    head = len(MAGIC) + 4
    if len(raw) < head:
        raise TruncatedPayloadError(f"{path}: truncated header")
    (size,) = struct.unpack("<I", raw[len(MAGIC):head])
    if len(raw) < head + size:
        raise TruncatedPayloadError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[head:head + size].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from None
    config = BackboneConfig.from_dict(manifest["config"])
    expected = param_shapes(config)
    entries = manifest["params"]
    if [e["name"] for e in entries] != list(expected) or any(
            tuple(e["shape"]) != expected[e["name"]] for e in entries):
        raise ShapeMismatchError(f"{path}: parameter manifest does not match the model config")
    payload = raw[head + size:]
    count = sum(math.prod(e["shape"]) for e in entries)
    if len(payload) != 4 * count:
        raise TruncatedPayloadError(f"{path}: truncated payload ({len(payload)} bytes, expected {4 * count})")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    params, offset = {}, 0
    for e in entries:
        n = math.prod(e["shape"])
        params[e["name"]] = nc.parameter(values[offset:offset + n].reshape(e["shape"]).copy(), e["name"])
        offset += n
    return Model(config, params, int(manifest["seed"]), manifest.get("meta", {}))
