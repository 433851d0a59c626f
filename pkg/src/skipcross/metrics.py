"""Road-segmentation metrics: F-measure, MaxF sweep, 11-point AP, IoU, accuracy.

Road is the positive class. A pixel is predicted road at threshold t when its
confidence is strictly greater than t; the sweep uses t_i = i / 255.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

N_THRESHOLDS = 256
RECALL_LEVELS = np.linspace(0.0, 1.0, 11)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    def swapped(self) -> "ConfusionCounts":
        """Counts with background as the positive class."""
        return ConfusionCounts(tp=self.tn, fp=self.fn, fn=self.fp, tn=self.tp)


@dataclass
class MetricsReport:
    maxf: float
    maxf_threshold: float
    ap: float
    pre: float
    rec: float
    f1: float
    f2: float
    fpr: float
    fnr: float
    miou: float
    acc: float

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in asdict(self).items()}


def _binary(a, what: str) -> np.ndarray:
    arr = np.asarray(a)
    if arr.dtype != bool:
        if not np.all((arr == 0) | (arr == 1)):
            raise ValueError(f"{what} must be binary (0/1)")
        arr = arr.astype(bool)
    return arr


def confusion(pred_mask, gt_mask) -> ConfusionCounts:
    p = _binary(pred_mask, "prediction")
    g = _binary(gt_mask, "ground truth")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def precision(c: ConfusionCounts) -> float:
    d = c.tp + c.fp
    return c.tp / d if d else 0.0


def recall(c: ConfusionCounts) -> float:
    d = c.tp + c.fn
    return c.tp / d if d else 0.0


def fpr(c: ConfusionCounts) -> float:
    d = c.fp + c.tn
    return c.fp / d if d else 0.0


def fnr(c: ConfusionCounts) -> float:
    d = c.fn + c.tp
    return c.fn / d if d else 0.0


def specificity(c: ConfusionCounts) -> float:
    d = c.fp + c.tn
    return c.tn / d if d else 1.0


def fbeta_from(pre: float, rec: float, beta: float) -> float:
    if beta <= 0:
        raise ValueError("beta must be positive")
    if pre + rec == 0:
        return 0.0
    b2 = beta * beta
    return (1 + b2) * pre * rec / (b2 * pre + rec)


def fbeta(c: ConfusionCounts, beta: float = 1.0) -> float:
    return fbeta_from(precision(c), recall(c), beta)


def _iou(c: ConfusionCounts) -> float:
    d = c.tp + c.fp + c.fn
    return c.tp / d if d else 1.0


def miou(counts_road: ConfusionCounts, counts_background: ConfusionCounts | None = None) -> float:
    """Mean IoU over road and background. Background counts default to the swapped road counts."""
    bg = counts_road.swapped() if counts_background is None else counts_background
    return 0.5 * (_iou(counts_road) + _iou(bg))


def accuracy(c: ConfusionCounts) -> float:
    return (c.tp + c.tn) / c.total if c.total else 0.0


# -- threshold sweep --------------------------------------------------------


def thresholds(n: int = N_THRESHOLDS) -> np.ndarray:
    return np.arange(n) / (n - 1)


def sweep_counts(confidence, gt_mask, n_thresholds: int = N_THRESHOLDS) -> np.ndarray:
    """(n_thresholds, 4) array of tp, fp, fn, tn for each threshold."""
    conf = np.asarray(confidence, dtype=np.float64).ravel()
    g = _binary(gt_mask, "ground truth").ravel()
    if conf.shape != g.shape:
        raise ValueError("confidence and ground truth differ in size")
    t = thresholds(n_thresholds)
    pos = np.sort(conf[g])
    neg = np.sort(conf[~g])
    tp = pos.size - np.searchsorted(pos, t, side="right")
    fp = neg.size - np.searchsorted(neg, t, side="right")
    fn = pos.size - tp
    tn = neg.size - fp
    return np.stack([tp, fp, fn, tn], axis=1).astype(np.int64)


def _pr_curve(sweep: np.ndarray):
    tp, fp, fn = sweep[:, 0].astype(np.float64), sweep[:, 1].astype(np.float64), sweep[:, 2].astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        pre = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        rec = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
    return pre, rec


def _f1_curve(sweep: np.ndarray) -> np.ndarray:
    pre, rec = _pr_curve(sweep)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(pre + rec > 0, 2 * pre * rec / (pre + rec), 0.0)


def maxf_from_sweep(sweep: np.ndarray) -> tuple[float, float]:
    f1 = _f1_curve(sweep)
    i = int(np.argmax(f1))  # first index = smallest threshold on ties
    return float(f1[i]), float(thresholds(len(sweep))[i])


def maxf(confidence, gt_mask, n_thresholds: int = N_THRESHOLDS) -> tuple[float, float]:
    return maxf_from_sweep(sweep_counts(confidence, gt_mask, n_thresholds))


def ap_from_sweep(sweep: np.ndarray) -> float:
    pre, rec = _pr_curve(sweep)
    vals = []
    for r in RECALL_LEVELS:
        ok = rec >= r - 1e-12
        vals.append(pre[ok].max() if ok.any() else 0.0)
    return float(np.mean(vals))


def average_precision(confidence, gt_mask, n_thresholds: int = N_THRESHOLDS) -> float:
    """11-point interpolated AP over the threshold sweep."""
    return ap_from_sweep(sweep_counts(confidence, gt_mask, n_thresholds))


def report_from_sweep(sweep: np.ndarray) -> MetricsReport:
    mf, thr = maxf_from_sweep(sweep)
    i = int(round(thr * (len(sweep) - 1)))
    c = ConfusionCounts(*(int(v) for v in sweep[i]))
    return MetricsReport(
        maxf=mf,
        maxf_threshold=thr,
        ap=ap_from_sweep(sweep),
        pre=precision(c),
        rec=recall(c),
        f1=fbeta(c, 1.0),
        f2=fbeta(c, 2.0),
        fpr=fpr(c),
        fnr=fnr(c),
        miou=miou(c),
        acc=accuracy(c),
    )


def evaluate(confidence, gt_mask, n_thresholds: int = N_THRESHOLDS) -> MetricsReport:
    """Full report; PRE/REC/F/FPR/FNR/MIOU/ACC are taken at the MaxF threshold."""
    return report_from_sweep(sweep_counts(confidence, gt_mask, n_thresholds))


def evaluate_dataset(confidences, gt_masks, n_thresholds: int = N_THRESHOLDS):
    """Aggregate report (counts summed over images before ratios) and per-image reports."""
    total = None
    per_image = []
    for conf, gt in zip(confidences, gt_masks):
        sw = sweep_counts(conf, gt, n_thresholds)
        per_image.append(report_from_sweep(sw))
        total = sw if total is None else total + sw
    if total is None:
        raise ValueError("no images to evaluate")
    return report_from_sweep(total), per_image


def pixel_accuracy(confidence, gt_mask, threshold: float = 0.5) -> float:
    pred = np.asarray(confidence) > threshold
    return float(np.mean(pred == _binary(gt_mask, "ground truth")))
