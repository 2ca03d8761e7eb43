"""Acceptance criteria, one test (or a few parts) per criterion.

Each test records a PASS/FAIL/SKIP line that ``conftest.py`` prints in the
terminal summary. The blobs task shared by criteria 5 and 6 trains nine
models (three heads, three seeds) once per session.
"""

import csv
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import norm

from zclassifier import latent as L
from zclassifier import numcore as nc
from zclassifier import pipeline as pl
from zclassifier.backbone import forward, init, resnet_mini, vgg_mini
from zclassifier.cli import main
from zclassifier.config import parse_config
from zclassifier.gaussian_head import HeadKind, average_latent, kl_to_prototype, loss, one_hot, reparameterize
from zclassifier.ood import ScoreSet, aupr, auroc, fpr_at_tpr

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)
HEADS = ("zclassifier", "nokl", "softmax")


def blobs_config(seed: int, head: str, **extra):
    doc = {
        "seed": seed,
        "data": {"source": "blobs", "blobs": {"num_classes": 10, "n_per_class": 200, "test_per_class": 100,
                                              "dim": 16, "spread": 1.0, "separation": 8.0}},
        "model": {"name": head, "kind": "mlp", "widths": [64, 64], "residual": True, "head": {"kind": head}},
        "train": {"epochs": 200, "batch_size": 128, "optimizer": {"name": "adam", "lr": 0.001}},
        "ood": {"sources": [{"kind": "gaussian", "n": 1000}, {"kind": "uniform", "n": 1000},
                            {"kind": "shifted", "n": 1000, "shift": 4.0}]},
        "sweep": {"trials": 20},
    }
    doc.update(extra)
    return parse_config(doc)


@pytest.fixture(scope="session")
def blob_models():
    """``{(seed, head): (config, model, task, seconds)}`` trained on first use."""
    cache = {}

    def get(seed, head):
        if (seed, head) not in cache:
            cfg = blobs_config(seed, head)
            task = pl.load_task(cfg)
            start = time.perf_counter()
            model, _ = pl.train_model(cfg, task)
            cache[seed, head] = (cfg, model, task, time.perf_counter() - start)
        return cache[seed, head]

    return get


# 1 ------------------------------------------------------------------- KL


def stratified_normals(rng, n, k):
    # Latin hypercube: one draw per probability stratum, independently permuted per column
    u = (np.arange(n)[:, None] + rng.random((n, k))) / n
    order = np.argsort(rng.random((n, k)), axis=0)
    return norm.ppf(np.take_along_axis(u, order, axis=0))


def test_criterion_1_kl_closed_form_matches_monte_carlo(record_criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        k = int(rng.integers(2, 11))
        y = int(rng.integers(k))
        mu, log_var = rng.normal(0, 1.5, k), rng.uniform(-2, 2, k)
        eps = stratified_normals(rng, 100_000, k)
        z = mu + np.exp(log_var / 2) * eps
        log_q = -0.5 * (np.log(2 * np.pi) + log_var + eps ** 2)
        log_p = -0.5 * (np.log(2 * np.pi) + (z - one_hot(y, k)) ** 2)
        mc = (log_q - log_p).sum(axis=1).mean()
        worst = max(worst, abs(mc - kl_to_prototype(mu, log_var, y)))
    exact_zero = kl_to_prototype(one_hot(3, 10), np.zeros(10), 3)
    exact_half = kl_to_prototype(np.zeros(10), np.zeros(10), 7)
    seconds = time.perf_counter() - start
    ok = worst < 0.01 and exact_zero == 0.0 and exact_half == 0.5 and seconds < 60
    record_criterion("1", "kl vs Monte-Carlo", ok,
                     f"max |err| {worst:.2e} over 50 cases, analytic 0 and 0.5 exact, {seconds:.1f}s")
    assert ok


# 2 ------------------------------------------------------------- gradients


@pytest.mark.parametrize("factory", [resnet_mini, vgg_mini], ids=["residual", "plain"])
def test_criterion_2_total_loss_gradients(factory, record_criterion):
    start = time.perf_counter()
    head = HeadKind.zclassifier(lam=10.0, latent_dim=4)
    cfg = factory(input_shape=(3, 8, 8), num_classes=10, head=head, channels=(4, 4, 8, 8))
    model = init(cfg, 0)
    rng = nc.Rng(11)
    x = rng.normal((4, 3, 8, 8))
    y = np.array([0, 3, 7, 9])
    report = nc.grad_check(lambda: loss(head, forward(model, x), y).graph, model.parameters(), step=1e-5)
    seconds = time.perf_counter() - start
    ok = report.max_error < 1e-4 and seconds < 120
    record_criterion("2", factory.__name__, ok,
                     f"max rel err {report.max_error:.2e} over {model.num_parameters()} params, {seconds:.1f}s")
    assert ok, report.errors


# 3 ------------------------------------------------------- latent averaging


@pytest.mark.parametrize("var,d", [(1.0, 1), (4.0, 4), (9.0, 3)])
def test_criterion_3_latent_average_variance(var, d, record_criterion):
    n = 100_000
    eps = nc.Rng(5).split(f"{var}-{d}").normal((n, 1, d))
    zbar = average_latent(reparameterize(np.zeros((n, 1)), np.full((n, 1), math.log(var)), eps)).value
    rel = abs(zbar.var() / (var / d) - 1)
    record_criterion("3", f"sigma2={var:g},d={d}", rel < 0.03, f"rel dev {rel:.4f}")
    assert rel < 0.03


# 4 ------------------------------------------------------- metric oracles


def pairwise_auroc(ins, outs):
    gt = (outs[:, None] > ins[None, :]).sum()
    eq = (outs[:, None] == ins[None, :]).sum()
    return (gt + 0.5 * eq) / (len(ins) * len(outs))


def sweep_aupr(ins, outs):
    terms, prev = [], 0.0
    for t in sorted(set(ins.tolist()) | set(outs.tolist()), reverse=True):
        tp = int(np.sum(outs >= t))
        fp = int(np.sum(ins >= t))
        recall = tp / len(outs)
        terms.append((recall - prev) * (tp / (tp + fp)))
        prev = recall
    return math.fsum(terms)


def test_criterion_4_metric_oracles(record_criterion):
    rng = np.random.default_rng(4)
    auroc_ok = True
    for i in range(200):
        n_in, n_out = rng.integers(1, 1001, size=2)
        if i % 2:
            ins, outs = rng.integers(0, 40, n_in).astype(float), rng.integers(5, 45, n_out).astype(float)
        else:
            ins, outs = rng.normal(0, 1, n_in), rng.normal(0.7, 1, n_out)
        auroc_ok &= auroc(ins, outs) == pairwise_auroc(ins, outs)
    record_criterion("4", "auroc == pairwise", auroc_ok, "200 pairs, n <= 1000, ties included")

    fprs = [fpr_at_tpr(s, s.copy()) for s in (rng.random(n) for n in (200, 500, 1000))]
    fpr_ok = all(abs(f - 0.95) <= 0.02 for f in fprs)
    record_criterion("4", "fpr identical inputs", fpr_ok, ", ".join(f"{f:.3f}" for f in fprs))

    aupr_ok = True
    for i in range(100):
        n_in, n_out = rng.integers(1, 201, size=2)
        ins, outs = rng.integers(0, 30, n_in).astype(float), rng.integers(3, 33, n_out).astype(float)
        if i % 2:
            ins, outs = rng.normal(size=n_in), rng.normal(0.5, 1, n_out)
        aupr_ok &= aupr(ins, outs) == sweep_aupr(ins, outs)
    record_criterion("4", "aupr == sweep", aupr_ok, "100 pairs, n <= 200")
    assert auroc_ok and fpr_ok and aupr_ok


# 5 ------------------------------------------------------- OOD separation


@pytest.mark.slow
def test_criterion_5_ood_separation(blob_models, record_criterion):
    start = time.perf_counter()
    lines, ok = [], True
    for seed in SEEDS:
        per_head = {}
        for head in ("zclassifier", "nokl"):
            cfg, model, task, _ = blob_models(seed, head)
            per_head[head] = {src: m.auroc for src, m, _ in pl.evaluate_ood(cfg, model, task)}
        for src, zc in per_head["zclassifier"].items():
            nokl = per_head["nokl"][src]
            good = zc >= 0.95 and zc - nokl >= 0.2
            ok &= good
            lines.append(f"s{seed} {src} zc={zc:.3f} nokl={nokl:.3f}")
    seconds = time.perf_counter() - start
    ok &= seconds < 600
    record_criterion("5", "zc >= 0.95 and gap >= 0.2", ok, "; ".join(lines) + f"; {seconds:.0f}s")
    assert ok


# 6 ------------------------------------------------------- calibration sweep


@pytest.fixture(scope="module")
def sweeps(blob_models):
    out = {}
    for seed in SEEDS:
        for head in ("zclassifier", "softmax"):
            cfg, model, task, _ = blob_models(seed, head)
            res = L.noise_calibration_sweep(model, task.test, L.DEFAULT_STDS, trials=20, seed=seed, name=head)
            out[seed, head] = (res, task, model)
    return out


@pytest.mark.slow
def test_criterion_6a_zero_noise_is_clean_accuracy(sweeps, record_criterion):
    from zclassifier.trainer import accuracy

    diffs = [abs(res.accuracies[0] - accuracy(model, task.test)) for res, task, model in sweeps.values()]
    record_criterion("6", "std=0 == clean", max(diffs) <= 0.02, f"max diff {max(diffs):.3g}")
    assert max(diffs) <= 0.02


@pytest.mark.slow
def test_criterion_6b_accuracy_non_increasing(sweeps, record_criterion):
    worst = max(max(b - a for a, b in zip(r.accuracies, r.accuracies[1:])) for r, _, _ in sweeps.values())
    record_criterion("6", "non-increasing", worst <= 0.02, f"largest rise {worst:.4f}")
    assert worst <= 0.02


@pytest.mark.slow
def test_criterion_6c_zclassifier_beats_softmax_at_1_11(sweeps, record_criterion):
    i = int(np.argmin(np.abs(np.array(L.DEFAULT_STDS) - 1.11)))
    rows, ok = [], True
    for seed in SEEDS:
        zc = sweeps[seed, "zclassifier"][0].accuracies[i]
        sm = sweeps[seed, "softmax"][0].accuracies[i]
        ok &= zc > sm
        rows.append(f"s{seed} zc={zc:.3f} softmax={sm:.3f}")
    record_criterion("6", f"zc > softmax at std={L.DEFAULT_STDS[i]:.2f}", ok, "; ".join(rows))
    assert ok, rows


# 7 ------------------------------------------------------- analysis battery


def test_criterion_7_analysis_battery(record_criterion):
    rng = np.random.default_rng(7)

    worst = 0.0
    for _ in range(10):
        n, k = int(rng.integers(20, 200)), int(rng.integers(2, 12))
        x = rng.normal(size=(n, k)) @ rng.normal(size=(k, k))
        comps = L.pca(x, k).components
        worst = max(worst, np.abs(comps @ comps.T - np.eye(k)).max())
    record_criterion("7", "pca orthonormal", worst < 1e-10, f"max dev {worst:.1e}")

    lda_ok = True
    for trial in range(10):
        y = np.repeat(np.arange(3), 60)
        x = rng.normal(size=(3, 5))[y] * 2 + rng.normal(size=(180, 5)) @ rng.normal(size=(5, 5))
        v = L.fisher_lda(x, y, 1).directions[0]
        best = L.fisher_ratio(x, y, v)
        probes = rng.normal(size=(100, 5))
        lda_ok &= all(best >= L.fisher_ratio(x, y, p / np.linalg.norm(p)) for p in probes)
    record_criterion("7", "lda beats 100 random", lda_ok, "10 trials")

    passes = sum(L.bartlett_test([rng.normal(2, 3, 200) for _ in range(4)])[1] > 0.05 for _ in range(200))
    record_criterion("7", "bartlett null", passes >= 180, f"p > 0.05 in {passes}/200")

    centers = rng.normal(size=(3, 2)) * 4
    yb = np.repeat(np.arange(3), 100)
    xb = centers[yb] + rng.normal(size=(300, 2))
    drops = [np.diff(L.fit_gmm(xb, 3, seed=s).log_likelihood).min(initial=0.0) for s in range(20)]
    # steps may only go down by float rounding of the objective
    em_ok = min(drops) >= -1e-12
    record_criterion("7", "em monotone", em_ok, f"20 inits, most negative step {min(drops):.1e}")

    y3 = np.repeat(np.arange(3), 50)
    x3 = np.eye(3, 6)[y3] * 30 + rng.normal(size=(150, 6))
    res = L.run_tsne(x3, perplexity=30, iterations=1000, seed=0)
    p_sum = abs(res.p.sum() - 1)
    rows = np.abs(res.p_cond.sum(axis=1) - 1).max()
    sym = np.abs(res.p - res.p.T).max()
    cents = np.array([res.embedding[y3 == c].mean(0) for c in range(3)])
    assign = np.argmin(((res.embedding[:, None] - cents[None]) ** 2).sum(-1), axis=1)
    purity = float(np.mean(assign == y3))
    tsne_ok = p_sum < 1e-9 and rows < 1e-9 and sym == 0 and purity == 1.0
    record_criterion("7", "t-SNE", tsne_ok, f"|sum P - 1| {p_sum:.1e}, purity {purity}")
    assert worst < 1e-10 and lda_ok and passes >= 180 and em_ok and tsne_ok


# 8 ------------------------------------------------------- determinism


def _pipeline_outputs(root: Path, cfg_path: Path) -> dict:
    for cmd in ("train", "ood", "analyze"):
        assert main([cmd, str(cfg_path)]) == 0
    files = {}
    for path in sorted(root.iterdir()):
        if path.name == "history.csv":
            rows = list(csv.reader(open(path)))
            drop = rows[0].index("seconds")
            files[path.name] = [r[:drop] + r[drop + 1:] for r in rows]
        else:
            files[path.name] = path.read_bytes()
    return files


def test_criterion_8_pipeline_determinism(tmp_path, record_criterion):
    outputs = []
    for run in ("a", "b"):
        doc = {
            "seed": 8, "output_dir": str(tmp_path / run),
            "data": {"source": "blobs", "blobs": {"num_classes": 4, "n_per_class": 60, "test_per_class": 40,
                                                  "dim": 8}},
            "model": {"kind": "mlp", "widths": [32, 32], "head": {"kind": "zclassifier"}},
            "train": {"epochs": 30, "batch_size": 64},
            "ood": {"sources": [{"kind": "gaussian", "n": 200}, {"kind": "uniform", "n": 200},
                                {"kind": "shifted", "n": 200}]},
            "analyze": {"methods": ["pca", "lda", "tsne"], "max_points": 120, "tsne": {"iterations": 300}},
        }
        path = tmp_path / f"{run}.json"
        path.write_text(json.dumps(doc))
        outputs.append(_pipeline_outputs(tmp_path / run, path))
    a, b = outputs
    differing = sorted(name for name in a.keys() | b.keys() if a.get(name) != b.get(name))
    ok = not differing and len(a) >= 10
    record_criterion("8", "byte-identical rerun", ok,
                     f"{len(a)} files compared" + (f", differing: {differing}" if differing else ""))
    assert ok


# 9 ------------------------------------------------------- CIFAR-10 (overnight)


@pytest.mark.slow
def test_criterion_9_cifar10_overnight(tmp_path, record_criterion):
    root = os.environ.get("ZC_CIFAR_DIR")
    if not root:
        record_criterion("9", "cifar10 30 epochs", "SKIP", "set ZC_CIFAR_DIR to run (overnight)")
        pytest.skip("ZC_CIFAR_DIR not set; overnight check")
    cfg = parse_config({
        "seed": 0, "output_dir": str(tmp_path),
        "data": {"source": "cifar10", "cifar_dir": root},
        "model": {"kind": "conv", "widths": [16, 16, 32, 64], "residual": True, "head": {"kind": "zclassifier"}},
        "train": {"epochs": 30, "batch_size": 128, "optimizer": {"name": "adam", "lr": 0.001}},
        "ood": {"sources": [{"kind": "gaussian", "n": 2000}]},
    })
    task = pl.load_task(cfg)
    model, _ = pl.train_model(cfg, task)
    from zclassifier.trainer import accuracy

    acc = accuracy(model, task.test)
    (_, metrics, _), = pl.evaluate_ood(cfg, model, task)
    ok = acc >= 0.60 and metrics.auroc >= 0.90
    record_criterion("9", "cifar10 30 epochs", ok, f"test acc {acc:.3f}, gaussian auroc {metrics.auroc:.3f}")
    assert ok
