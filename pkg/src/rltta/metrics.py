"""Frame-level AUC, partial AUC and equal error rate.

Scores are "higher = more fake"; labels are 0 (real) / 1 (fake).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class LabeledScore:
    score: float
    label: int


@dataclass(frozen=True)
class MetricReport:
    auc: float
    pauc: float
    eer: float
    eer_threshold: float
    n_real: int
    n_fake: int

    CSV_FIELDS = ("auc", "pauc", "eer", "eer_threshold", "n_real", "n_fake")

    def csv_row(self) -> list:
        return [f"{self.auc:.6f}", f"{self.pauc:.6f}", f"{self.eer:.6f}",
                f"{self.eer_threshold:.6f}", self.n_real, self.n_fake]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _arrays(scores, labels=None):
    if labels is None:
        items = list(scores)
        scores = [s.score for s in items]
        labels = [s.label for s in items]
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 (real) or 1 (fake)")
    y = y.astype(np.int64)
    n_fake = int(y.sum())
    if n_fake == 0 or n_fake == y.size:
        raise ValueError("both classes must be present")
    return s, y


def auc(scores, labels=None) -> float:
    """P(fake > real) + 0.5 P(tie), via mid-ranks."""
    s, y = _arrays(scores, labels)
    n1 = int(y.sum())
    n0 = y.size - n1
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y == 1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def roc_curve(scores, labels=None):
    """ROC vertices for a sweep over distinct thresholds, starting at (0, 0)."""
    s, y = _arrays(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]  # end of each tie group
    tp = np.cumsum(y)[last]
    fp = np.cumsum(1 - y)[last]
    tpr = np.r_[0.0, tp / tp[-1]]
    fpr = np.r_[0.0, fp / fp[-1]]
    return fpr, tpr, s[last]


def pauc_at_fpr(scores, labels=None, fpr_ceiling: float = 0.1) -> float:
    """Area under the ROC for FPR in [0, ceiling], divided by the ceiling."""
    if not 0.0 < fpr_ceiling <= 1.0:
        raise ValueError("fpr_ceiling must be in (0, 1]")
    fpr, tpr, _ = roc_curve(scores, labels)
    i = int(np.searchsorted(fpr, fpr_ceiling, side="right"))
    xs, ys = fpr[:i], tpr[:i]
    if xs[-1] < fpr_ceiling:
        t = (fpr_ceiling - fpr[i - 1]) / (fpr[i] - fpr[i - 1])
        xs = np.r_[xs, fpr_ceiling]
        ys = np.r_[ys, tpr[i - 1] + t * (tpr[i] - tpr[i - 1])]
    area = float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2.0))
    return area / fpr_ceiling


def eer(scores, labels=None):
    """Equal error rate and its threshold.

    Sweeps every distinct score as threshold (fake iff score >= t), picks the
    one minimising |FPR - FNR| (lowest threshold on ties) and reports the mean
    of FPR and FNR there.
    """
    s, y = _arrays(scores, labels)
    n1 = int(y.sum())
    n0 = y.size - n1
    thresholds = np.unique(s)
    fakes = np.sort(s[y == 1])
    reals = np.sort(s[y == 0])
    fn = np.searchsorted(fakes, thresholds, side="left")
    fp = n0 - np.searchsorted(reals, thresholds, side="left")
    # compare |fp/n0 - fn/n1| exactly in integers
    gap = np.abs(fp.astype(np.int64) * n1 - fn.astype(np.int64) * n0)
    i = int(np.argmin(gap))
    value = int(fp[i] * n1 + fn[i] * n0) / (2 * n0 * n1)
    return value, float(thresholds[i])


def evaluate(scores, labels=None, fpr_ceiling: float = 0.1) -> MetricReport:
    s, y = _arrays(scores, labels)
    e, thr = eer(s, y)
    return MetricReport(
        auc=auc(s, y),
        pauc=pauc_at_fpr(s, y, fpr_ceiling),
        eer=e,
        eer_threshold=thr,
        n_real=int((y == 0).sum()),
        n_fake=int(y.sum()),
    )
