"""Binary classification metrics: ROC, AUC, EER/HTER and TPR at fixed FPR.

Conventions: label 1 (live) is the positive class, a sample is accepted as
positive when ``score >= threshold``, and tied scores always move together.
The ROC starts at ``(threshold=+inf, FPR=0, TPR=0)`` and has one further
point per distinct score, in descending score order. Areas and error rates
are computed from integer counts so that, e.g., ``auc(s) + auc(-s) == 1``
holds in rational arithmetic.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, UsageError


@dataclass
class Roc:
    thresholds: np.ndarray
    fp: np.ndarray
    tp: np.ndarray
    n_pos: int
    n_neg: int

    @property
    def fpr(self) -> np.ndarray:
        return self.fp / self.n_neg

    @property
    def tpr(self) -> np.ndarray:
        return self.tp / self.n_pos

    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.fpr.tolist(), self.tpr.tolist()))

    def __iter__(self):
        return iter(self.points())

    def __len__(self) -> int:
        return len(self.thresholds)


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise UsageError(f"{scores.size} scores but {labels.size} labels")
    if not np.isin(labels, (0, 1)).all():
        raise UsageError("labels must be 0 (spoof) or 1 (live)")
    if np.isnan(scores).any():
        raise UsageError("scores contain NaN")
    n_pos = int((labels == 1).sum())
    if n_pos == 0 or n_pos == labels.size:
        raise UsageError("both classes must be present")
    return scores, labels.astype(np.int64)


def roc(scores, labels) -> Roc:
    scores, labels = _validate(scores, labels)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    last_of_group = np.r_[s[1:] != s[:-1], True]
    return Roc(
        thresholds=np.r_[np.inf, s[last_of_group]],
        fp=np.r_[0, fp[last_of_group]].astype(np.int64),
        tp=np.r_[0, tp[last_of_group]].astype(np.int64),
        n_pos=int(labels.sum()),
        n_neg=int((1 - labels).sum()),
    )


def auc_numerator(curve: Roc) -> int:
    """Twice the trapezoidal area in count units; AUC is this over ``2 * P * N``."""
    dfp = np.diff(curve.fp)
    return int((dfp * (curve.tp[1:] + curve.tp[:-1])).sum())


def auc(curve: Roc) -> float:
    """Trapezoidal ROC area, equal to ``P(s+ > s-) + 0.5 P(s+ == s-)``."""
    return auc_numerator(curve) / (2 * curve.n_pos * curve.n_neg)


@dataclass
class EerResult:
    eer: float
    threshold: float
    hter: float
    far: float
    frr: float


def eer_hter(scores, labels, hter_threshold: float | None = None) -> EerResult:
    """Equal error rate and HTER.

    The EER operating point is the ROC point minimising ``|FAR - FRR|``.
    When two points tie (one on each side of equality), the one with the
    smaller ``FAR + FRR`` wins, then the lower threshold. EER is
    ``(FAR + FRR) / 2`` there. HTER is ``(FAR + FRR) / 2`` at the same
    threshold, or at ``hter_threshold`` when given (fixed-threshold mode).
    """
    curve = roc(scores, labels)
    p, n = curve.n_pos, curve.n_neg
    fp, fn = curve.fp, p - curve.tp
    gap = np.abs(fp * p - fn * n)
    err = fp * p + fn * n
    # lexsort: last key is primary; reversed index prefers lower thresholds
    idx_rev = np.arange(len(gap))[::-1]
    best = np.lexsort((idx_rev, err, gap))[0]
    far, frr = fp[best] / n, fn[best] / p
    eer = int(err[best]) / (2 * p * n)
    threshold = float(curve.thresholds[best])
    if hter_threshold is None:
        return EerResult(eer, threshold, eer, far, frr)
    s, y = _validate(scores, labels)
    accept = s >= hter_threshold
    fp_t, fn_t = int((accept & (y == 0)).sum()), int((~accept & (y == 1)).sum())
    return EerResult(eer, threshold, (fp_t * p + fn_t * n) / (2 * p * n), fp_t / n, fn_t / p)


def tpr_at_fpr(curve: Roc, fpr_target: float) -> float:
    """Largest TPR over ROC points with FPR <= target (no interpolation)."""
    if not 0.0 < fpr_target < 1.0:
        raise UsageError(f"fpr_target must lie in (0, 1), got {fpr_target}")
    ok = curve.fp <= fpr_target * curve.n_neg
    return float(curve.tp[ok].max() / curve.n_pos)


@dataclass
class EvalReport:
    scores: np.ndarray
    labels: np.ndarray
    auc: float
    eer: float
    eer_threshold: float
    hter: float
    tpr_at_fpr: dict[float, float] = field(default_factory=dict)
    counts: tuple[int, int] = (0, 0)

    def summary(self) -> str:
        tprs = ", ".join(f"TPR@FPR={t:g}: {v:.4f}" for t, v in self.tpr_at_fpr.items())
        return (f"n={len(self.scores)} (live={self.counts[0]}, spoof={self.counts[1]})  "
                f"AUC: {self.auc:.4f}  EER: {self.eer:.4f} (thr {self.eer_threshold:.6g})  "
                f"HTER: {self.hter:.4f}  {tprs}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerow(["auc", repr(self.auc)])
        w.writerow(["eer", repr(self.eer)])
        w.writerow(["eer_threshold", repr(self.eer_threshold)])
        w.writerow(["hter", repr(self.hter)])
        for t, v in self.tpr_at_fpr.items():
            w.writerow([f"tpr_at_fpr_{t:g}", repr(v)])
        w.writerow(["positives", self.counts[0]])
        w.writerow(["negatives", self.counts[1]])
        return buf.getvalue()


def evaluate(scores, labels, fpr_targets=(0.01,), hter_threshold: float | None = None) -> EvalReport:
    scores, labels = _validate(scores, labels)
    curve = roc(scores, labels)
    e = eer_hter(scores, labels, hter_threshold)
    return EvalReport(
        scores=scores,
        labels=labels,
        auc=auc(curve),
        eer=e.eer,
        eer_threshold=e.threshold,
        hter=e.hter,
        tpr_at_fpr={float(t): tpr_at_fpr(curve, t) for t in fpr_targets},
        counts=(curve.n_pos, curve.n_neg),
    )


def read_scores_csv(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Read ``sample_id,score,label`` rows (header required)."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    try:
        ids = [r["sample_id"] for r in rows]
        scores = np.array([float(r["score"]) for r in rows])
        labels = np.array([int(r["label"]) for r in rows])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: expected columns sample_id,score,label ({exc})") from exc
    return ids, scores, labels


def write_scores_csv(path, scores, labels, ids=None) -> None:
    ids = ids if ids is not None else [str(i) for i in range(len(scores))]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "score", "label"])
        for i, s, y in zip(ids, scores, labels):
            w.writerow([i, repr(float(s)), int(y)])
