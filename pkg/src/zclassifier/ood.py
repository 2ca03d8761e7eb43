"""KL-based OOD scoring and detection metrics.

Throughout, OOD is the positive class, higher scores mean "more OOD", and a
sample is flagged OOD when ``score >= threshold``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .gaussian_head import kl_to_prototype


@dataclass
class ScoreSet:
    in_scores: np.ndarray
    out_scores: np.ndarray

    def __post_init__(self):
        self.in_scores = np.asarray(self.in_scores, dtype=np.float64).ravel()
        self.out_scores = np.asarray(self.out_scores, dtype=np.float64).ravel()

    def check(self) -> None:
        if self.in_scores.size == 0 or self.out_scores.size == 0:
            raise ValueError("score sets must both be nonempty")
        if not (np.isfinite(self.in_scores).all() and np.isfinite(self.out_scores).all()):
            raise ValueError("scores must be finite")


@dataclass
class BinaryReport:
    threshold: float
    accuracy: float
    ind_precision: float
    ind_recall: float
    ood_precision: float
    ood_recall: float
    counts: dict = field(default_factory=dict)


@dataclass
class DetectionMetrics:
    auroc: float
    aupr: float
    fpr_at_95tpr: float
    threshold: float
    binary: BinaryReport

    def to_dict(self) -> dict:
        return asdict(self)


def _scores(s, out=None) -> ScoreSet:
    if not isinstance(s, ScoreSet):
        s = ScoreSet(s, out)
    s.check()
    return s


def ood_scores(mu, log_var) -> np.ndarray:
    """Row-wise minimum over classes of the KL to each class prototype."""
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    log_var = np.atleast_2d(np.asarray(log_var, dtype=np.float64))
    protos = np.eye(mu.shape[1])
    var_terms = (np.exp(log_var) - 1.0 - log_var).sum(axis=1)
    mean_terms = ((mu[:, None, :] - protos[None]) ** 2).sum(axis=2)
    return 0.5 * (mean_terms.min(axis=1) + var_terms)


def ood_score(mu, log_var) -> float:
    mu = np.asarray(mu, dtype=np.float64)
    return min(kl_to_prototype(mu, log_var, c) for c in range(mu.shape[-1]))


def auroc(s, out=None) -> float:
    """Mann-Whitney U over ``n_in * n_out`` with ties counted one half."""
    s = _scores(s, out)
    n_in, n_out = s.in_scores.size, s.out_scores.size
    ranks = rankdata(np.concatenate([s.in_scores, s.out_scores]))
    u = ranks[n_in:].sum() - n_out * (n_out + 1) / 2.0
    return float(u / (n_in * n_out))


def _sweep(s: ScoreSet):
    """Distinct thresholds in descending order with cumulative TP/FP counts."""
    scores = np.concatenate([s.out_scores, s.in_scores])
    positive = np.concatenate([np.ones(s.out_scores.size), np.zeros(s.in_scores.size)])
    order = np.argsort(-scores, kind="stable")
    scores, positive = scores[order], positive[order]
    tp = np.cumsum(positive)
    fp = np.cumsum(1.0 - positive)
    last = np.r_[scores[1:] != scores[:-1], True]
    return scores[last], tp[last], fp[last]


def aupr(s, out=None) -> float:
    """Average precision: sum of ``(R_k - R_{k-1}) * P_k`` over a descending sweep."""
    s = _scores(s, out)
    _, tp, fp = _sweep(s)
    precision = tp / (tp + fp)
    recall = tp / s.out_scores.size
    steps = np.diff(np.r_[0.0, recall])
    return float(math.fsum(steps * precision))


def fpr_at_tpr(s, out=None, tpr_target: float = 0.95) -> float:
    """FPR at the highest threshold whose TPR reaches ``tpr_target``."""
    s = _scores(s, out)
    ranked = np.sort(s.out_scores)[::-1]
    k = max(math.ceil(tpr_target * ranked.size - 1e-9), 1)
    threshold = ranked[k - 1]
    return float(np.mean(s.in_scores >= threshold))


def balanced_accuracy(s: ScoreSet, threshold: float) -> float:
    tpr = np.mean(s.out_scores >= threshold)
    tnr = np.mean(s.in_scores < threshold)
    return float((tpr + tnr) / 2)


def candidate_thresholds(s: ScoreSet) -> np.ndarray:
    pooled = np.unique(np.concatenate([s.in_scores, s.out_scores]))
    mids = (pooled[1:] + pooled[:-1]) / 2
    return np.r_[pooled[0], mids, np.nextafter(pooled[-1], np.inf)]


def pick_threshold(s, out=None) -> float:
    """Threshold maximizing balanced accuracy; ties go to the lowest candidate.

    Candidates are the pooled minimum, midpoints between consecutive distinct
    pooled scores, and the float just above the pooled maximum.
    """
    s = _scores(s, out)
    cands = candidate_thresholds(s)
    tpr = 1.0 - np.searchsorted(np.sort(s.out_scores), cands, side="left") / s.out_scores.size
    tnr = np.searchsorted(np.sort(s.in_scores), cands, side="left") / s.in_scores.size
    ba = (tpr + tnr) / 2
    return float(cands[int(np.argmax(ba))])


def binary_report(s, threshold: float, out=None) -> BinaryReport:
    if not math.isfinite(threshold):
        raise ValueError("threshold must be finite")
    s = s if isinstance(s, ScoreSet) else ScoreSet(s, out)
    tp = int(np.sum(s.out_scores >= threshold))
    fn = s.out_scores.size - tp
    tn = int(np.sum(s.in_scores < threshold))
    fp = s.in_scores.size - tn

    def ratio(a, b):
        return a / b if b else 0.0

    total = s.in_scores.size + s.out_scores.size
    return BinaryReport(
        threshold=float(threshold),
        accuracy=ratio(tp + tn, total),
        ind_precision=ratio(tn, tn + fn),
        ind_recall=ratio(tn, tn + fp),
        ood_precision=ratio(tp, tp + fp),
        ood_recall=ratio(tp, tp + fn),
        counts={"tp": tp, "fp": fp, "tn": tn, "fn": fn},
    )


def detection_metrics(test: ScoreSet, validation: ScoreSet | None = None,
                      tpr_target: float = 0.95) -> DetectionMetrics:
    """Ranking metrics plus a binary report at a threshold tuned on ``validation``."""
    test.check()
    threshold = pick_threshold(validation if validation is not None else test)
    return DetectionMetrics(
        auroc=auroc(test),
        aupr=aupr(test),
        fpr_at_95tpr=fpr_at_tpr(test, tpr_target=tpr_target),
        threshold=threshold,
        binary=binary_report(test, threshold),
    )


REPORT_COLUMNS = ("model", "ood_source", "auroc", "aupr", "fpr95", "threshold", "acc",
                  "ind_recall", "ood_recall")


def write_report(rows, path) -> None:
    """``rows`` are ``(model, source, DetectionMetrics)`` triples."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for model, source, m in rows:
            writer.writerow([model, source, repr(m.auroc), repr(m.aupr), repr(m.fpr_at_95tpr),
                             repr(m.threshold), repr(m.binary.accuracy),
                             repr(m.binary.ind_recall), repr(m.binary.ood_recall)])


def write_scores(s: ScoreSet, path, out_domain: str = "ood") -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("score", "domain"))
        for v in s.in_scores:
            writer.writerow((repr(float(v)), "ind"))
        for v in s.out_scores:
            writer.writerow((repr(float(v)), out_domain))
