"""Config-driven building blocks shared by the CLI and the experiment scripts."""

from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import latent
from .backbone import Model, infer, init
from .config import ConfigError, OodSource, RunConfig
from .data import (BlobConfig, Dataset, NormStats, gen_blobs, gen_gaussian_noise,
                   gen_shifted_blobs, gen_uniform_noise, load_cifar10)
from .numcore import Rng
from .ood import ScoreSet, detection_metrics, ood_scores
from .trainer import train


class HeadError(ValueError):
    """The requested operation needs a head the model does not have."""


def derive_seed(seed: int, tag: str) -> int:
    return zlib.crc32(f"{seed}:{tag}".encode())


@dataclass
class Task:
    train: Dataset
    test: Dataset
    norm: NormStats
    num_classes: int


def load_task(cfg: RunConfig, norm: NormStats | None = None) -> Task:
    """Normalized train/test sets; ``norm`` defaults to stats fitted on train."""
    d = cfg.data
    if d.source == "cifar10":
        if not d.cifar_dir:
            raise ConfigError("data.cifar_dir is required for source cifar10")
        train_set, test_set = load_cifar10(d.cifar_dir, d.limit_train, d.limit_test)
        # load_cifar10 standardizes already; keep its stats unless told otherwise
        return Task(train_set, test_set, train_set.norm, 10)
    b = d.blobs
    train_raw = gen_blobs(b.num_classes, b.n_per_class, b.dim, b.spread,
                          derive_seed(cfg.seed, "train"), b.separation)
    test_raw = gen_blobs(b.num_classes, b.test_per_class, b.dim, b.spread,
                         derive_seed(cfg.seed, "test"), b.separation)
    norm = norm or NormStats.fit(train_raw.inputs)
    return Task(train_raw.normalized(norm), test_raw.normalized(norm), norm, b.num_classes)


def build_model(cfg: RunConfig, task: Task) -> Model:
    model = init(cfg.backbone(task.train.sample_shape, task.num_classes), cfg.seed)
    model.meta = {"name": cfg.model.display_name, "norm": task.norm.to_dict(),
                  "data": cfg.data.source}
    return model


def train_model(cfg: RunConfig, task: Task | None = None, history_path=None):
    task = task or load_task(cfg)
    model = build_model(cfg, task)
    return train(model, task.train, cfg.train, history_path=history_path)


def model_name(model: Model) -> str:
    return model.meta.get("name") or model.config.head.kind


def task_for_model(cfg: RunConfig, model: Model) -> Task:
    norm = model.meta.get("norm")
    return load_task(cfg, NormStats.from_dict(norm) if norm else None)


# OOD


def _raw_source(cfg: RunConfig, src: OodSource, shape, split: str) -> Dataset:
    seed = derive_seed(cfg.seed, f"ood-{src.kind}-{split}")
    if src.kind == "gaussian":
        return gen_gaussian_noise(shape, src.n, seed)
    if src.kind == "uniform":
        return gen_uniform_noise(shape, src.n, src.lo, src.hi, seed)
    if cfg.data.source != "blobs":
        raise ConfigError("ood source 'shifted' is only defined for the blobs task")
    b = cfg.data.blobs
    if isinstance(src.shift, list):
        if len(src.shift) != b.dim:
            raise ConfigError(f"ood shift vector has {len(src.shift)} entries, expected {b.dim}")
        shift = np.asarray(src.shift, dtype=np.float64)
    else:
        # translate along the class-bearing coordinates, in units of spread
        shift = np.zeros(b.dim)
        shift[:min(b.num_classes, b.dim)] = src.shift * b.spread
    base = BlobConfig(b.num_classes, math.ceil(src.n / b.num_classes), b.dim, b.spread, b.separation)
    shifted = gen_shifted_blobs(base, shift, seed)
    return shifted.subset(np.arange(src.n))


def ood_datasets(cfg: RunConfig, task: Task, split: str = "test") -> list[tuple[str, Dataset]]:
    """Configured OOD sources, normalized with the in-distribution stats."""
    out = []
    for src in cfg.ood.sources:
        raw = _raw_source(cfg, src, task.train.sample_shape, split)
        out.append((src.kind, raw.normalized(task.norm)))
    return out


def kl_scores(model: Model, inputs) -> np.ndarray:
    if not model.config.head.gaussian:
        raise HeadError("head has no KL score")
    mu, log_var = infer(model, inputs)
    return ood_scores(mu, log_var)


def evaluate_ood(cfg: RunConfig, model: Model, task: Task):
    """Per-source ``(source, DetectionMetrics, test ScoreSet)``.

    The threshold is tuned on a held-out half of the in-distribution test set
    against a separately seeded draw of the same OOD source.
    """
    if not model.config.head.gaussian:
        raise HeadError("head has no KL score")
    test_ind, val_ind = task.test.split(0.5, Rng(cfg.seed).split("ood-val"))
    in_test = kl_scores(model, test_ind.inputs)
    in_val = kl_scores(model, val_ind.inputs)
    val_sources = dict(ood_datasets(cfg, task, "val"))
    rows = []
    for name, ds in ood_datasets(cfg, task, "test"):
        test = ScoreSet(in_test, kl_scores(model, ds.inputs))
        validation = ScoreSet(in_val, kl_scores(model, val_sources[name].inputs))
        rows.append((name, detection_metrics(test, validation, cfg.ood.tpr_target), test))
    return rows


# analysis


def _subsample(coll: latent.LogitCollection, max_points: int, seed: int):
    if len(coll.vectors) <= max_points:
        return coll
    idx = np.sort(Rng(seed).split("analyze-subsample").permutation(len(coll.vectors))[:max_points])
    return latent.LogitCollection(coll.vectors[idx], coll.labels[idx], coll.source)


def _gmm_summary(g: latent.GmmResult) -> dict:
    return {"weights": g.weights.tolist(), "means": g.means.tolist(),
            "covariances": g.covariances.tolist(), "log_likelihood": g.log_likelihood[-1],
            "iterations": len(g.log_likelihood), "converged": g.converged,
            "regularized": g.regularized}


def analyze_model(cfg: RunConfig, model: Model, task: Task):
    """Latent statistics for one model.

    Returns ``(summary, projections, ellipses, covariance, correlation)``
    where ``projections`` maps method to ``(xy, labels)``.
    """
    a = cfg.analyze
    coll = latent.collect_logits(model, task.test, a.sampled, cfg.seed,
                                 "z_bar" if a.sampled else "mu")
    coll = _subsample(coll, a.max_points, cfg.seed)
    x, y = coll.vectors, coll.labels
    cov = latent.covariance(x)
    try:
        corr = latent.correlation(x)
    except ValueError:
        corr = None
    bart = latent.bartlett_per_dimension(x, y)
    summary = {
        "source": coll.source,
        "n_points": int(len(x)),
        "covariance": cov.tolist(),
        "correlation": None if corr is None else corr.tolist(),
        "bartlett": [None if r is None else {"statistic": r[0], "p_value": r[1]} for r in bart],
    }
    pc = latent.pca(x, 2)
    summary["pca"] = {"explained_variance": pc.explained_variance.tolist(),
                      "explained_ratio": pc.explained_ratio.tolist(),
                      "components": pc.components.tolist()}
    projections = {}
    if "pca" in a.methods:
        projections["pca"] = (pc.projection, y)
    if "lda" in a.methods:
        n_comp = min(2, len(np.unique(y)) - 1, x.shape[1])
        lda = latent.fisher_lda(x, y, n_comp)
        xy = lda.projection if n_comp == 2 else np.c_[lda.projection, np.zeros(len(x))]
        projections["lda"] = (xy, y)
        summary["lda"] = {"ratios": lda.ratios.tolist(), "directions": lda.directions.tolist()}
    if "tsne" in a.methods:
        res = latent.run_tsne(x, a.perplexity, a.iterations, seed=cfg.seed)
        projections["tsne"] = (res.embedding, y)
        summary["tsne"] = {"perplexity": a.perplexity, "iterations": a.iterations,
                           "final_kl": res.kl_history[-1]}
    ellipses = {str(c): e.to_dict() for c, e in latent.fit_class_gaussians(pc.projection, y).items()}
    if a.gmm:
        k = len(np.unique(y))
        summary["gmm"] = _gmm_summary(latent.fit_gmm(pc.projection, k, seed=cfg.seed))
    return summary, projections, ellipses, cov, corr


def unique_names(models) -> list[str]:
    names, seen = [], {}
    for m in models:
        base = model_name(m)
        seen[base] = seen.get(base, 0) + 1
        names.append(base if seen[base] == 1 else f"{base}-{seen[base]}")
    return names


def run_analysis(cfg: RunConfig, models: list[Model], out_dir) -> dict:
    """Writes ``latent_report.json``, ``ellipses.json`` and projection CSVs."""
    out_dir = Path(out_dir)
    names = unique_names(models)
    report = {"models": {}, "frobenius": []}
    ellipses = {}
    mats = {}
    for name, model in zip(names, models):
        summary, projections, ell, cov, corr = analyze_model(cfg, model, task_for_model(cfg, model))
        report["models"][name] = summary
        ellipses[name] = ell
        mats[name] = (cov, corr)
        for method, (xy, labels) in projections.items():
            suffix = "" if len(models) == 1 else f"_{name}"
            write_projection(xy, labels, out_dir / f"projection_{method}{suffix}.csv")
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            (ca, ra), (cb, rb) = mats[names[i]], mats[names[j]]
            report["frobenius"].append({
                "a": names[i], "b": names[j],
                "covariance": latent.frobenius_diff(ca, cb),
                "correlation": None if ra is None or rb is None else latent.frobenius_diff(ra, rb),
            })
    write_json(report, out_dir / "latent_report.json")
    write_json(ellipses, out_dir / "ellipses.json")
    return report


def run_sweep(cfg: RunConfig, models: list[Model]) -> list[latent.SweepResult]:
    stds = cfg.sweep.stds if cfg.sweep.stds is not None else latent.DEFAULT_STDS
    results = []
    for name, model in zip(unique_names(models), models):
        task = task_for_model(cfg, model)
        results.append(latent.noise_calibration_sweep(model, task.test, stds, cfg.sweep.trials,
                                                      cfg.seed, name=name))
    return results


# writers


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def write_projection(xy, labels, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("x", "y", "label"))
        for (px, py), label in zip(xy, labels):
            writer.writerow((repr(float(px)), repr(float(py)), int(label)))


def write_sweep(results, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("std", "model", "accuracy"))
        for res in results:
            for std, acc in zip(res.stds, res.accuracies):
                writer.writerow((repr(std), res.model, repr(acc)))
