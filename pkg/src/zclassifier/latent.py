"""Statistics and projections over collections of logit vectors.

Covers covariance/correlation and their Frobenius differences, Bartlett's
test per logit dimension, PCA, Fisher LDA, exact t-SNE, per-class Gaussian
ellipses, a full-covariance GMM fitted by EM, and the logit-noise accuracy
sweep. Symmetric eigenproblems go through a cyclic Jacobi solver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp

from .numcore import Rng

# ---------------------------------------------------------------- linear algebra


def symmetric_eigh(a, tol: float = 1e-15, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns eigenvalues in descending order and the matching eigenvectors as
    columns.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError(f"expected a square matrix, got {a.shape}")
    a = (a + a.T) / 2
    v = np.eye(n)
    scale = np.linalg.norm(a)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol * max(scale, 1e-300):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * apq)
                t = 1.0 / (abs(theta) + math.sqrt(theta * theta + 1.0))
                if theta < 0:
                    t = -t
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    values = np.diag(a).copy()
    order = np.argsort(-values, kind="stable")
    return values[order], v[:, order]


# ---------------------------------------------------------------- second moments


@dataclass
class LogitCollection:
    vectors: np.ndarray
    labels: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.vectors.ndim != 2 or len(self.vectors) < 2:
            raise ValueError("need an [N x K] matrix with N >= 2")
        if len(self.labels) != len(self.vectors):
            raise ValueError("vectors and labels differ in length")


def covariance(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ValueError("covariance needs an [N x K] matrix with N >= 2")
    centered = x - x.mean(axis=0)
    return centered.T @ centered / (len(x) - 1)


def correlation(x) -> np.ndarray:
    cov = covariance(x)
    sd = np.sqrt(np.diag(cov))
    if np.any(sd == 0):
        raise ValueError(f"zero-variance column(s) {np.flatnonzero(sd == 0).tolist()}")
    corr = cov / np.outer(sd, sd)
    np.fill_diagonal(corr, 1.0)
    return corr


def frobenius_diff(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"frobenius_diff: shape mismatch {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


# ---------------------------------------------------------------- Bartlett


def _gamma_p_series(a, x, eps=1e-16, max_iter=100000):
    term = total = 1.0 / a
    ap = a
    for _ in range(max_iter):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * eps:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_q_cf(a, x, eps=1e-16, max_iter=100000):
    # modified Lentz evaluation of the continued fraction for Q(a, x)
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, max_iter):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gamma_q(a: float, x: float) -> float:
    """Regularized upper incomplete gamma ``Q(a, x)``."""
    if a <= 0:
        raise ValueError("gamma_q needs a > 0")
    if x < 0:
        raise ValueError("gamma_q needs x >= 0")
    if x == 0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_p_series(a, x)
    return _gamma_q_cf(a, x)


def chi2_sf(x: float, dof: int) -> float:
    return gamma_q(dof / 2.0, x / 2.0)


def bartlett_test(groups) -> tuple[float, float]:
    """Bartlett's statistic for equal variances and its chi-square p-value."""
    groups = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    k = len(groups)
    if k < 2:
        raise ValueError("bartlett_test needs at least 2 groups")
    n = np.array([g.size for g in groups], dtype=np.float64)
    if np.any(n < 2):
        raise ValueError("every group needs at least 2 values")
    var = np.array([g.var(ddof=1) for g in groups])
    if np.any(var <= 0):
        raise ValueError(f"group(s) {np.flatnonzero(var <= 0).tolist()} have zero variance")
    total = n.sum()
    pooled = np.sum((n - 1) * var) / (total - k)
    numer = (total - k) * math.log(pooled) - np.sum((n - 1) * np.log(var))
    correction = 1.0 + (np.sum(1.0 / (n - 1)) - 1.0 / (total - k)) / (3.0 * (k - 1))
    stat = max(float(numer / correction), 0.0)
    return stat, chi2_sf(stat, k - 1)


def bartlett_per_dimension(x, labels) -> list[tuple[float, float] | None]:
    """Bartlett's test across classes for each column; ``None`` where degenerate."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    out = []
    for j in range(x.shape[1]):
        try:
            out.append(bartlett_test([x[labels == c, j] for c in classes]))
        except ValueError:
            out.append(None)
    return out


# ---------------------------------------------------------------- PCA / LDA


class PcaResult(NamedTuple):
    projection: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    mean: np.ndarray
    total_variance: float

    @property
    def explained_ratio(self) -> np.ndarray:
        if self.total_variance <= 0:
            return np.zeros_like(self.explained_variance)
        return self.explained_variance / self.total_variance


def pca(x, n_components: int) -> PcaResult:
    """Principal components of ``x`` from its unbiased covariance.

    Each component's largest-magnitude entry is made positive.
    """
    x = np.asarray(x, dtype=np.float64)
    if not 1 <= n_components <= min(x.shape):
        raise ValueError(f"n_components must lie in [1, {min(x.shape)}]")
    values, vectors = symmetric_eigh(covariance(x))
    comps = vectors[:, :n_components].T.copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    mean = x.mean(axis=0)
    projection = (x - mean) @ comps.T
    return PcaResult(projection, comps, np.clip(values[:n_components], 0, None), mean,
                     float(np.clip(values, 0, None).sum()))


def scatter_matrices(x, labels):
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    overall = x.mean(axis=0)
    d = x.shape[1]
    s_w, s_b = np.zeros((d, d)), np.zeros((d, d))
    for c in np.unique(labels):
        xc = x[labels == c]
        mc = xc.mean(axis=0)
        centered = xc - mc
        s_w += centered.T @ centered
        diff = (mc - overall)[:, None]
        s_b += len(xc) * diff @ diff.T
    return s_w, s_b


def fisher_ratio(x, labels, direction) -> float:
    s_w, s_b = scatter_matrices(x, labels)
    v = np.asarray(direction, dtype=np.float64)
    return float(v @ s_b @ v / (v @ s_w @ v))


class LdaResult(NamedTuple):
    projection: np.ndarray
    directions: np.ndarray
    ratios: np.ndarray


def fisher_lda(x, labels, n_components: int) -> LdaResult:
    """Fisher discriminant directions from ``S_b v = lambda S_w v``.

    ``S_w`` is ridge-regularized by ``1e-6 * trace(S_w) / d``. Directions are
    unit-norm rows ordered by descending generalized eigenvalue.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    n_classes = len(np.unique(labels))
    if n_classes < 2:
        raise ValueError("fisher_lda needs at least 2 classes")
    if not 1 <= n_components <= min(n_classes - 1, x.shape[1]):
        raise ValueError(f"n_components must lie in [1, {min(n_classes - 1, x.shape[1])}]")
    s_w, s_b = scatter_matrices(x, labels)
    d = x.shape[1]
    s_w = s_w + 1e-6 * np.trace(s_w) / d * np.eye(d)
    try:
        chol = np.linalg.cholesky(s_w)
    except np.linalg.LinAlgError:
        raise ValueError("within-class scatter is singular after regularization") from None
    inv = np.linalg.inv(chol)
    values, vectors = symmetric_eigh(inv @ s_b @ inv.T)
    directions = (inv.T @ vectors[:, :n_components]).T
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return LdaResult(x @ directions.T, directions, values[:n_components])


# ---------------------------------------------------------------- t-SNE


def _squared_distances(x):
    sq = np.sum(x * x, axis=1)
    d = sq[:, None] + sq[None, :] - 2 * x @ x.T
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def conditional_affinities(x, perplexity: float, tol: float = 1e-4, max_iter: int = 200):
    """Rows ``p_{j|i}`` with each Gaussian bandwidth bisected to the target perplexity.

    Returns ``(P_cond, betas)`` where ``beta_i = 1 / (2 sigma_i^2)``.
    """
    d = _squared_distances(np.asarray(x, dtype=np.float64))
    n = len(d)
    target = math.log(perplexity)
    p = np.zeros((n, n))
    betas = np.ones(n)
    for i in range(n):
        di = np.delete(d[i], i)
        di = di - di.min()
        lo, hi, beta = 0.0, math.inf, 1.0
        for _ in range(max_iter):
            w = np.exp(-beta * di)
            total = w.sum()
            pi = w / total
            entropy = math.log(total) + beta * float(np.sum(di * pi))
            if abs(math.exp(entropy) - perplexity) < tol:
                break
            if entropy > target:
                lo = beta
                beta = beta * 2 if hi == math.inf else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
        p[i, np.arange(n) != i] = pi
        betas[i] = beta
    return p, betas


@dataclass
class TsneResult:
    embedding: np.ndarray
    kl_history: list[float]
    p: np.ndarray = field(repr=False)
    p_cond: np.ndarray = field(repr=False)
    exaggeration_iters: int = 250


def run_tsne(x, perplexity: float = 30.0, iterations: int = 1000, seed: int = 0,
             exaggeration: float = 12.0, exaggeration_iters: int = 250,
             learning_rate: float | None = None) -> TsneResult:
    """Exact O(N^2) t-SNE with momentum, gains and early exaggeration."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if n > 5000:
        raise ValueError("exact t-SNE is limited to N <= 5000")
    if not 0 < perplexity < n / 3:
        raise ValueError(f"perplexity {perplexity} infeasible for N={n} (need 0 < perplexity < N/3)")
    p_cond, _ = conditional_affinities(x, perplexity)
    p = (p_cond + p_cond.T) / (2 * n)
    p_safe = np.maximum(p, 1e-300)
    lr = learning_rate if learning_rate is not None else max(n / 12.0, 1.0)
    y = Rng(seed).split("tsne").normal((n, 2)) * 1e-4
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    history = []
    for it in range(iterations):
        exag = exaggeration if it < exaggeration_iters else 1.0
        momentum = 0.5 if it < exaggeration_iters else 0.8
        num = 1.0 / (1.0 + _squared_distances(y))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), 1e-300)
        history.append(float(np.sum(p * np.log(p_safe / q))))
        pq = (exag * p - q) * num
        grad = 4.0 * (np.diag(pq.sum(axis=1)) - pq) @ y
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, 0.01)
        update = momentum * update - lr * gains * grad
        y = y + update
        y = y - y.mean(axis=0)
    return TsneResult(y, history, p, p_cond, exaggeration_iters)


def tsne(x, perplexity: float = 30.0, iterations: int = 1000, seed: int = 0) -> np.ndarray:
    return run_tsne(x, perplexity, iterations, seed).embedding


# ---------------------------------------------------------------- Gaussians / GMM


@dataclass
class EllipseParams:
    center: np.ndarray
    axes: tuple[float, float]
    angle: float
    degenerate: bool = False
    regularized: bool = False

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "major": self.axes[0], "minor": self.axes[1],
                "angle": self.angle, "degenerate": self.degenerate, "regularized": self.regularized}


def ellipse(center, cov, n_std: float = 2.0, isotropy_tol: float = 0.05) -> EllipseParams:
    """Ellipse at ``n_std`` standard deviations; angle of the major axis in (-pi/2, pi/2]."""
    cov = np.asarray(cov, dtype=np.float64)
    values, vectors = symmetric_eigh(cov)
    regularized = False
    if values[-1] <= 0:
        values, vectors = symmetric_eigh(cov + 1e-6 * np.eye(2))
        regularized = True
    major, minor = n_std * np.sqrt(np.clip(values, 0, None))
    angle = math.atan2(vectors[1, 0], vectors[0, 0])
    if angle <= -math.pi / 2:
        angle += math.pi
    elif angle > math.pi / 2:
        angle -= math.pi
    degenerate = major <= (1 + isotropy_tol) * minor
    return EllipseParams(np.asarray(center, dtype=np.float64), (float(major), float(minor)),
                         angle, bool(degenerate), regularized)


def fit_class_gaussians(x2, labels, n_std: float = 2.0) -> dict[int, EllipseParams]:
    """Per-class mean and maximum-likelihood covariance, as ellipses."""
    x2 = np.asarray(x2, dtype=np.float64)
    labels = np.asarray(labels)
    if x2.ndim != 2 or x2.shape[1] != 2:
        raise ValueError("fit_class_gaussians expects [N x 2] points")
    out = {}
    for c in np.unique(labels):
        xc = x2[labels == c]
        if len(xc) < 3:
            raise ValueError(f"class {c} has fewer than 3 points")
        centered = xc - xc.mean(axis=0)
        out[int(c)] = ellipse(xc.mean(axis=0), centered.T @ centered / len(xc), n_std)
    return out


@dataclass
class GmmResult:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    responsibilities: np.ndarray = field(repr=False)
    log_likelihood: list[float] = field(default_factory=list)
    converged: bool = False
    regularized: bool = False


def _component_logpdf(x, mean, cov):
    d = x.shape[1]
    chol = np.linalg.cholesky(cov)
    sol = np.linalg.solve(chol, (x - mean).T)
    log_det = 2 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (np.sum(sol ** 2, axis=0) + log_det + d * math.log(2 * math.pi))


def fit_gmm(x, k: int, seed: int = 0, max_iter: int = 200, tol: float = 1e-6,
            reg: float = 1e-6) -> GmmResult:
    """Full-covariance Gaussian mixture by EM.

    Each covariance carries a weak ``exp(-reg/2 * tr(inv(cov)))`` prior, so the
    M-step is ``(S_k + reg I) / n_k`` with ``S_k`` the weighted scatter. This
    keeps collapsing components finite, and the tracked objective (mean
    log-likelihood plus the prior term) is non-decreasing every iteration.
    Means start from a k-means++ style draw. Stops when the objective changes
    by less than ``tol``. ``regularized`` is set when some component's plain
    maximum-likelihood covariance had an eigenvalue below ``reg``.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if k < 1 or k > n:
        raise ValueError("need 1 <= k <= N")
    rng = Rng(seed).split("gmm")
    idx = [int(rng.integers(n))]
    for _ in range(1, k):
        dist = np.min(_squared_distances(np.vstack([x, x[idx]]))[:n, n:], axis=1)
        probs = dist / dist.sum() if dist.sum() > 0 else np.full(n, 1.0 / n)
        idx.append(min(int(np.searchsorted(np.cumsum(probs), rng.uniform())), n - 1))
    means = x[idx].copy()
    base_cov = np.cov(x.T, bias=True).reshape(d, d) + reg * np.eye(d)
    covs = np.repeat(base_cov[None], k, axis=0)
    weights = np.full(k, 1.0 / k)
    regularized = False
    history: list[float] = []
    converged = False
    resp = np.full((n, k), 1.0 / k)
    for _ in range(max_iter):
        log_prob = np.column_stack([_component_logpdf(x, means[j], covs[j]) for j in range(k)])
        weighted = log_prob + np.log(weights)
        norm = logsumexp(weighted, axis=1)
        penalty = 0.5 * reg * sum(np.trace(np.linalg.inv(c)) for c in covs)
        objective = float(norm.mean() - penalty / n)
        resp = np.exp(weighted - norm[:, None])
        if history and abs(objective - history[-1]) < tol:
            history.append(objective)
            converged = True
            break
        history.append(objective)
        nk = resp.sum(axis=0) + 1e-300
        weights = nk / n
        means = resp.T @ x / nk[:, None]
        for j in range(k):
            centered = x - means[j]
            scatter = (resp[:, j, None] * centered).T @ centered
            if np.linalg.eigvalsh(scatter / nk[j]).min() < reg:
                regularized = True
            covs[j] = (scatter + reg * np.eye(d)) / nk[j]
    return GmmResult(weights, means, covs, resp, history, converged, regularized)


# ---------------------------------------------------------------- logit-noise sweep

DEFAULT_STDS = tuple(np.linspace(0.0, 2.0, 10).tolist())


@dataclass
class SweepResult:
    model: str
    stds: list[float]
    accuracies: list[float]


def sweep_logits(logits, labels, stds=DEFAULT_STDS, trials: int = 20, seed: int = 0,
                 model: str = "") -> SweepResult:
    """Accuracy of ``argmax(logits + std * eps)`` averaged over ``trials``.

    The ``std == 0`` entry is the clean accuracy with no sampling.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    stds = [float(s) for s in stds]
    if any(s < 0 for s in stds):
        raise ValueError("noise stds must be nonnegative")
    if any(b <= a for a, b in zip(stds, stds[1:])):
        raise ValueError("noise stds must be strictly increasing")
    rng = Rng(seed).split("sweep")
    accs = []
    for i, std in enumerate(stds):
        if std == 0:
            accs.append(float(np.mean(np.argmax(logits, axis=1) == labels)))
            continue
        r = rng.split(i)
        hits = [np.mean(np.argmax(logits + std * r.normal(logits.shape), axis=1) == labels)
                for _ in range(trials)]
        accs.append(float(np.mean(hits)))
    return SweepResult(model, stds, accs)


def noise_calibration_sweep(model, dataset, stds=DEFAULT_STDS, trials: int = 20, seed: int = 0,
                            name: str = "") -> SweepResult:
    """Noise sweep on the model's ``mu`` (Gaussian heads) or raw logits (softmax)."""
    from .backbone import infer

    mu, _ = infer(model, dataset.inputs)
    return sweep_logits(mu, dataset.labels, stds, trials, seed, model=name)


def collect_logits(model, dataset, sampled: bool = False, seed: int = 0, source: str = "") -> LogitCollection:
    """Logit vectors for analysis: ``mu`` by default, or one ``z_bar`` draw."""
    from .backbone import infer

    mu, log_var = infer(model, dataset.inputs)
    if sampled and log_var is not None:
        d = model.config.head.latent_dim
        eps = Rng(seed).split("zbar").normal(mu.shape + (d,))
        mu = mu + np.exp(0.5 * log_var) * eps.mean(axis=2)
    return LogitCollection(mu, dataset.labels, source)
