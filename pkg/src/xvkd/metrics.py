"""Detection error trade-off analysis: DET operating points, EER, and minDCF.

Candidate thresholds are every distinct trial score plus the two infinities.
At a threshold, targets scoring exactly on it are accepted (miss counts use a
strict ``<``, false alarms use ``>=``).  The equal error rate interpolates
linearly between the two adjacent operating points that straddle the
miss/false-alarm crossing; the detection cost is normalized by the best
trivial system so it never exceeds one.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ScoreSet",
    "DcfParams",
    "DetCurve",
    "compute_det",
    "eer",
    "min_dcf",
    "det_to_csv",
]


@dataclass
class ScoreSet:
    """Trial scores split by ground-truth label."""

    target_scores: np.ndarray
    nontarget_scores: np.ndarray

    def __post_init__(self):
        self.target_scores = np.asarray(self.target_scores, dtype=np.float64).reshape(-1)
        self.nontarget_scores = np.asarray(self.nontarget_scores, dtype=np.float64).reshape(-1)
        for name, arr in (("target", self.target_scores), ("nontarget", self.nontarget_scores)):
            if arr.size and not np.isfinite(arr).all():
                raise ValueError(f"{name} scores contain non-finite values")


@dataclass(frozen=True)
class DcfParams:
    """Detection-cost prior and error costs."""

    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.p_target < 1.0:
            raise ValueError("p_target must lie strictly between 0 and 1")
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise ValueError("costs must be positive")


@dataclass
class DetCurve:
    """Miss / false-alarm rates per candidate threshold (ascending)."""

    thresholds: np.ndarray
    p_miss: np.ndarray
    p_fa: np.ndarray

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        self.p_miss = np.asarray(self.p_miss, dtype=np.float64)
        self.p_fa = np.asarray(self.p_fa, dtype=np.float64)
        if not (self.thresholds.shape == self.p_miss.shape == self.p_fa.shape):
            raise ValueError("threshold and rate arrays must be aligned")


def compute_det(scores: ScoreSet) -> DetCurve:
    """Sweep every distinct score (plus the infinities) as a threshold.

    ``p_miss`` is the fraction of targets strictly below the threshold;
    ``p_fa`` is the fraction of nontargets at or above it.
    """
    if scores.target_scores.size == 0:
        raise ValueError("no target scores")
    if scores.nontarget_scores.size == 0:
        raise ValueError("no nontarget scores")
    tar = np.sort(scores.target_scores)
    non = np.sort(scores.nontarget_scores)
    thresholds = np.concatenate(
        [[-np.inf], np.unique(np.concatenate([tar, non])), [np.inf]]
    )
    p_miss = np.searchsorted(tar, thresholds, side="left") / tar.size
    p_fa = (non.size - np.searchsorted(non, thresholds, side="left")) / non.size
    return DetCurve(thresholds=thresholds, p_miss=p_miss, p_fa=p_fa)


def eer(curve: DetCurve) -> float:
    """Equal error rate in percent, linearly interpolated at the crossing."""
    diff = curve.p_miss - curve.p_fa
    idx = int(np.argmax(diff >= 0.0))
    if diff[idx] == 0.0:
        return 100.0 * float(curve.p_miss[idx])
    lo = idx - 1
    span = diff[idx] - diff[lo]
    lam = -diff[lo] / span
    rate = curve.p_miss[lo] + lam * (curve.p_miss[idx] - curve.p_miss[lo])
    return 100.0 * float(rate)


def min_dcf(curve: DetCurve, params: DcfParams = DcfParams()) -> float:
    """Minimum normalized detection cost over all operating points."""
    miss_weight = params.p_target * params.c_miss
    fa_weight = (1.0 - params.p_target) * params.c_fa
    costs = (miss_weight * curve.p_miss + fa_weight * curve.p_fa) / min(miss_weight, fa_weight)
    return float(costs.min())


def det_to_csv(curve: DetCurve, path_or_file) -> None:
    """Write `threshold,p_miss,p_fa` rows for external plotting."""
    if hasattr(path_or_file, "write"):
        _write_det(curve, path_or_file)
        return
    with open(path_or_file, "w", encoding="utf-8", newline="") as fh:
        _write_det(curve, fh)


def _write_det(curve: DetCurve, fh: io.TextIOBase) -> None:
    fh.write("threshold,p_miss,p_fa\n")
    for thr, pm, pf in zip(curve.thresholds, curve.p_miss, curve.p_fa):
        fh.write(f"{float(thr)!r},{float(pm)!r},{float(pf)!r}\n")
