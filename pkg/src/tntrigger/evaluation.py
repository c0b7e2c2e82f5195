"""ROC curves, AUC, TPR at a fixed background rate, and metric reports."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .training import ScoreCalibration, anomaly_score, calibrate

TRIGGER_FPR = 1e-5


class ResolutionWarning(UserWarning):
    """The background sample is too small to resolve the requested FPR."""


@dataclass(frozen=True)
class RocCurve:
    """Threshold sweep in descending order of score.

    ``thresholds[0]`` is ``+inf`` so the curve starts at (0, 0).  An event
    is accepted when its score is ``>=`` the threshold.
    """

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    n_background: int
    n_signal: int


def _as_scores(x, what: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ConfigError(f"{what} scores are empty")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{what} scores contain non-finite values")
    return arr


def _accepted(sorted_scores: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    return len(sorted_scores) - np.searchsorted(sorted_scores, thresholds, side="left")


def roc(scores_bkg, scores_sig) -> RocCurve:
    bkg = np.sort(_as_scores(scores_bkg, "background"))
    sig = np.sort(_as_scores(scores_sig, "signal"))
    pooled = np.unique(np.concatenate([bkg, sig]))[::-1]
    thresholds = np.concatenate([[np.inf], pooled])
    fpr = _accepted(bkg, thresholds) / len(bkg)
    tpr = _accepted(sig, thresholds) / len(sig)
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(thresholds, fpr, tpr, auc, len(bkg), len(sig))


@dataclass(frozen=True)
class TprResult:
    tpr: float
    interpolated: float
    threshold: float
    fpr: float
    resolved: bool


def tpr_at_fpr_detail(curve: RocCurve, target_fpr: float) -> TprResult:
    """Operating point with the most signal whose FPR stays within ``target_fpr``.

    That is the lowest threshold still inside the budget.  The linear
    interpolation between neighbouring curve points is reported alongside.
    """
    if not 0.0 < target_fpr < 1.0:
        raise ConfigError(f"target FPR must lie in (0, 1), got {target_fpr}")
    resolved = curve.n_background * target_fpr >= 1.0
    if not resolved:
        warnings.warn(
            f"{curve.n_background} background events cannot resolve FPR={target_fpr:g} "
            f"(need >= {int(np.ceil(1 / target_fpr))})", ResolutionWarning, stacklevel=3)
    # fpr is nondecreasing along the descending-threshold sweep
    k = int(np.searchsorted(curve.fpr, target_fpr, side="right")) - 1
    interp = float(np.interp(target_fpr, curve.fpr, curve.tpr))
    return TprResult(float(curve.tpr[k]), interp, float(curve.thresholds[k]),
                     float(curve.fpr[k]), resolved)


def tpr_at_fpr(curve: RocCurve, target_fpr: float = TRIGGER_FPR) -> float:
    return tpr_at_fpr_detail(curve, target_fpr).tpr


@dataclass
class SignalMetrics:
    auc: float
    tpr: float
    tpr_interpolated: float
    threshold: float
    fpr_achieved: float
    fpr_resolved: bool
    count: int


@dataclass
class MetricsReport:
    target_fpr: float
    calibration: dict
    counts: dict
    signals: dict = field(default_factory=dict)
    pooled: dict = field(default_factory=dict)

    @property
    def median(self) -> float:
        return self.calibration["median_bkg"]

    def to_dict(self) -> dict:
        return {
            "target_fpr": self.target_fpr,
            "calibration": dict(self.calibration),
            "counts": dict(self.counts),
            "signals": {k: asdict(v) for k, v in self.signals.items()},
            "pooled": asdict(self.pooled) if self.pooled else {},
        }


def _signal_metrics(bkg, sig, target_fpr) -> SignalMetrics:
    curve = roc(bkg, sig)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ResolutionWarning)
        t = tpr_at_fpr_detail(curve, target_fpr)
    return SignalMetrics(curve.auc, t.tpr, t.interpolated, t.threshold, t.fpr, t.resolved, len(sig))


def metrics_from_scores(scores, labels, target_fpr: float = TRIGGER_FPR,
                        background: str = "background",
                        calibration: ScoreCalibration | None = None) -> MetricsReport:
    """Per-label and pooled metrics, each signal label against background."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(str)
    if scores.shape != labels.shape:
        raise ConfigError(f"{scores.shape[0]} scores for {labels.shape[0]} labels")
    is_bkg = labels == background
    if not is_bkg.any():
        raise ConfigError(f"no {background!r} events to measure the false-positive rate")
    names = sorted(set(labels[~is_bkg].tolist()))
    if not names:
        raise ConfigError("no signal events to evaluate")
    bkg = scores[is_bkg]
    counts = {background: int(is_bkg.sum())} | {n: int((labels == n).sum()) for n in names}
    cal = {"median_bkg": calibration.median_bkg} if calibration else {"median_bkg": float("nan")}
    rep = MetricsReport(target_fpr, cal, counts)
    for n in names:
        rep.signals[n] = _signal_metrics(bkg, scores[labels == n], target_fpr)
    rep.pooled = _signal_metrics(bkg, scores[~is_bkg], target_fpr)
    if bkg.size * target_fpr < 1.0:
        warnings.warn(f"{bkg.size} background events cannot resolve FPR={target_fpr:g}",
                      ResolutionWarning, stacklevel=2)
    return rep


def metrics_from_norms(norms, labels, target_fpr: float = TRIGGER_FPR,
                       background: str = "background",
                       calibration: ScoreCalibration | None = None) -> MetricsReport:
    """Score squared norms against a background median, then build metrics.

    Without an explicit ``calibration`` the median is taken from the
    background events in ``norms`` themselves.
    """
    norms = np.asarray(norms, dtype=np.float64)
    labels = np.asarray(labels).astype(str)
    if calibration is None:
        bkg = norms[labels == background]
        if bkg.size == 0:
            raise ConfigError(f"no {background!r} events to calibrate on")
        calibration = calibrate(bkg)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ResolutionWarning)
        return metrics_from_scores(anomaly_score(norms, calibration), labels, target_fpr,
                                   background, calibration)
