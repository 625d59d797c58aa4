"""Lesion-wise detection metrics.

Predicted lesions are the connected components of ``prob > 0.5``; each
carries a certainty equal to its maximum probability.  A predicted and a
ground-truth lesion *hit* each other when they share at least one voxel
(pairwise Dice > 0).  Sweeping a certainty threshold ``tau`` (keep
predictions with certainty ``> tau``) yields a lesion-wise
precision-recall curve.

Counting rules at a threshold:

* a gt lesion is detected when at least one surviving prediction hits it,
  so one prediction touching two lesions detects both;
* a surviving prediction is a true positive when it hits any gt lesion,
  else a false positive, so two predictions on one lesion are two TPs;
* precision is 1 when no prediction survives.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .exceptions import ValidationError
from .labeling import DEFAULT_CONNECTIVITY, LabelMap, binarize, label_components
from .validation import check_same_shape

BASE_THRESHOLD = 0.5
#: sphere-equivalent diameter below which a lesion counts as small
SMALL_CUT_MM = 10.0

CSV_COLUMNS = ("threshold", "tp", "fp", "fn", "precision", "recall")
BAND_COLUMNS = ("recall_lo", "recall_hi", "precision_lo", "precision_hi")


def thread_cap() -> int:
    """Worker cap from ``LESION_EVAL_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("LESION_EVAL_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn, items):
    """Ordered map over ``items`` using at most ``thread_cap()`` threads."""
    items = list(items)
    workers = min(thread_cap(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def equivalent_diameter_mm(n_voxels, voxel_volume: float):
    """Diameter of the sphere with the same physical volume."""
    volume = np.asarray(n_voxels, dtype=np.float64) * voxel_volume
    return 2.0 * np.cbrt(3.0 * volume / (4.0 * np.pi))


@dataclass(frozen=True, eq=False)
class PredictedLesion:
    label: int
    certainty: float
    size: int
    label_map: LabelMap = field(repr=False)

    @property
    def voxels(self) -> np.ndarray:
        return self.label_map.labels == self.label


def extract_predicted_lesions(prob, connectivity: int = DEFAULT_CONNECTIVITY) -> list[PredictedLesion]:
    values = np.asarray(getattr(prob, "values", prob))
    labels = label_components(binarize(prob, BASE_THRESHOLD), connectivity)
    k = labels.n_components
    if k == 0:
        return []
    cert = ndimage.maximum(values.astype(np.float64), labels.labels, index=np.arange(1, k + 1))
    return [
        PredictedLesion(i, float(cert[i - 1]), int(labels.sizes[i]), labels)
        for i in range(1, k + 1)
    ]


@dataclass(frozen=True, eq=False)
class MatchTable:
    """Per-case lesion inventory and the (gt_id, pred_id) overlap pairs."""

    gt_ids: np.ndarray
    gt_sizes: np.ndarray
    gt_diameters_mm: np.ndarray
    pred_ids: np.ndarray
    pred_certainties: np.ndarray
    pairs: np.ndarray
    case_id: str = ""

    @property
    def n_gt(self) -> int:
        return len(self.gt_ids)

    def detection_certainty(self) -> np.ndarray:
        """Per gt lesion, the best certainty among predictions hitting it (-inf if none)."""
        best = np.full(self.n_gt, -np.inf)
        if len(self.pairs):
            cert = dict(zip(self.pred_ids.tolist(), self.pred_certainties.tolist()))
            gt_index = {g: i for i, g in enumerate(self.gt_ids.tolist())}
            for g, p in self.pairs.tolist():
                best[gt_index[g]] = max(best[gt_index[g]], cert[p])
        return best

    def pred_is_hit(self) -> np.ndarray:
        return np.isin(self.pred_ids, self.pairs[:, 1]) if len(self.pairs) else np.zeros(len(self.pred_ids), bool)


def match_lesions(pred: list[PredictedLesion], gt: LabelMap, case_id: str = "") -> MatchTable:
    """Enumerate every (gt, pred) pair sharing at least one voxel."""
    gt_ids = np.arange(1, gt.n_components + 1)
    gt_sizes = np.asarray(gt.sizes[1:], dtype=np.int64)
    diam = equivalent_diameter_mm(gt_sizes, gt.voxel_volume)
    pred_ids = np.array([p.label for p in pred], dtype=np.int64)
    certs = np.array([p.certainty for p in pred], dtype=np.float64)
    pairs = np.zeros((0, 2), dtype=np.int64)
    if pred:
        pred_labels = pred[0].label_map.labels
        check_same_shape(pred_labels, gt.labels, names=["pred", "gt"])
        if any(p.label_map is not pred[0].label_map for p in pred):
            raise ValidationError("predicted lesions must share one label map")
        both = (gt.labels > 0) & np.isin(pred_labels, pred_ids)
        if np.any(both):
            pairs = np.unique(
                np.stack([gt.labels[both], pred_labels[both]], axis=1).astype(np.int64), axis=0
            )
    return MatchTable(gt_ids, gt_sizes, diam, pred_ids, certs, pairs, case_id)


def match_case(prob, gt_mask, connectivity: int = DEFAULT_CONNECTIVITY, case_id: str = "") -> MatchTable:
    """Extract predictions from ``prob`` and match them against ``gt_mask``."""
    check_same_shape(prob, gt_mask, names=["prob", "gt"])
    gt_labels = label_components(gt_mask, connectivity)
    return match_lesions(extract_predicted_lesions(prob, connectivity), gt_labels, case_id)


@dataclass(frozen=True, eq=False)
class LesionPRC:
    """Lesion-wise PR curve, thresholds ascending.

    ``tp`` counts detected gt lesions (so ``tp + fn`` is the lesion total)
    while ``tp_pred`` counts surviving predictions that hit a lesion;
    precision is ``tp_pred / (tp_pred + fp)``.
    """

    thresholds: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tp_pred: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    band: dict | None = None

    @property
    def n_gt(self) -> int:
        return int(self.tp[0] + self.fn[0])

    def rows(self):
        for i in range(len(self.thresholds)):
            row = {
                "threshold": float(self.thresholds[i]),
                "tp": int(self.tp[i]),
                "fp": int(self.fp[i]),
                "fn": int(self.fn[i]),
                "precision": float(self.precision[i]),
                "recall": float(self.recall[i]),
            }
            if self.band is not None:
                row.update({k: float(self.band[k][i]) for k in BAND_COLUMNS})
            yield row

    def to_csv(self) -> str:
        cols = CSV_COLUMNS + (BAND_COLUMNS if self.band is not None else ())
        lines = [",".join(cols)]
        for row in self.rows():
            lines.append(",".join(_fmt(row[c]) for c in cols))
        return "\n".join(lines) + "\n"


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".10g")


def sweep_thresholds(cases) -> np.ndarray:
    """The base cut 0.5 plus every distinct certainty, ascending."""
    certs = [c.pred_certainties for c in cases if len(c.pred_certainties)]
    allc = np.concatenate(certs) if certs else np.zeros(0)
    return np.unique(np.concatenate([[BASE_THRESHOLD], allc]))


def _gt_filter(case: MatchTable, max_diameter_mm):
    if max_diameter_mm is None:
        return np.ones(case.n_gt, dtype=bool)
    return case.gt_diameters_mm < max_diameter_mm


def curve_counts(cases, thresholds, max_diameter_mm=None):
    """tp, fp, fn, tp_pred at each threshold, summed over ``cases``.

    With ``max_diameter_mm`` only gt lesions smaller than the cut enter
    tp/fn; predictions are still counted against all gt lesions.
    """
    thresholds = np.asarray(thresholds, dtype=np.float64)
    tp = np.zeros(len(thresholds), dtype=np.int64)
    fp = np.zeros_like(tp)
    fn = np.zeros_like(tp)
    tp_pred = np.zeros_like(tp)
    for case in cases:
        keep = _gt_filter(case, max_diameter_mm)
        best = np.sort(case.detection_certainty()[keep])
        # number of gt lesions whose best hit certainty is > tau
        detected = len(best) - np.searchsorted(best, thresholds, side="right")
        tp += detected
        fn += len(best) - detected
        hit = case.pred_is_hit()
        hit_c = np.sort(case.pred_certainties[hit])
        miss_c = np.sort(case.pred_certainties[~hit])
        tp_pred += len(hit_c) - np.searchsorted(hit_c, thresholds, side="right")
        fp += len(miss_c) - np.searchsorted(miss_c, thresholds, side="right")
    return tp, fp, fn, tp_pred


def _finish(thresholds, tp, fp, fn, tp_pred, band=None) -> LesionPRC:
    n_gt = tp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        n_pred = tp_pred + fp
        precision = np.where(n_pred > 0, tp_pred / np.maximum(n_pred, 1), 1.0)
        recall = np.where(n_gt > 0, tp / np.maximum(n_gt, 1), np.nan)
    return LesionPRC(np.asarray(thresholds, dtype=np.float64), tp, fp, fn, tp_pred,
                     precision.astype(np.float64), recall.astype(np.float64), band)


def lesion_prc(cases, max_diameter_mm: float | None = None, thresholds=None) -> LesionPRC:
    """Lesion-wise PRC aggregated over ``cases`` (a sequence of MatchTable)."""
    cases = list(cases)
    if not cases:
        raise ValidationError("lesion_prc needs at least one case")
    if thresholds is None:
        thresholds = sweep_thresholds(cases)
    tp, fp, fn, tp_pred = curve_counts(cases, thresholds, max_diameter_mm)
    if tp[0] + fn[0] == 0:
        raise ValidationError("no ground-truth lesions in the case set; recall is undefined")
    return _finish(thresholds, tp, fp, fn, tp_pred)


def bootstrap_prc(cases, iterations: int = 100, fraction: float = 0.8,
                  rng: np.random.Generator | None = None,
                  max_diameter_mm: float | None = None,
                  percentiles=(2.5, 97.5)) -> LesionPRC:
    """Full-sample curve plus a percentile band over case subsamples.

    Each iteration draws ``ceil(fraction * n_cases)`` cases without
    replacement and re-evaluates the curve on the full-sample threshold
    grid.  Subsamples without any gt lesion contribute no recall value.
    """
    cases = list(cases)
    if len(cases) < 2:
        raise ValidationError("bootstrap needs at least 2 cases")
    if not 0.0 < fraction <= 1.0:
        raise ValidationError(f"fraction must lie in (0, 1], got {fraction!r}")
    if iterations < 1:
        raise ValidationError(f"iterations must be positive, got {iterations!r}")
    rng = np.random.default_rng(0) if rng is None else rng
    full = lesion_prc(cases, max_diameter_mm)
    m = math.ceil(round(fraction * len(cases), 9))
    recalls = np.empty((iterations, len(full.thresholds)))
    precisions = np.empty_like(recalls)
    for it in range(iterations):
        idx = np.sort(rng.choice(len(cases), size=m, replace=False))
        counts = curve_counts([cases[i] for i in idx], full.thresholds, max_diameter_mm)
        sub = _finish(full.thresholds, *counts)
        recalls[it] = sub.recall
        precisions[it] = sub.precision
    lo, hi = percentiles
    with np.errstate(all="ignore"):
        band = {
            "recall_lo": np.nanpercentile(recalls, lo, axis=0),
            "recall_hi": np.nanpercentile(recalls, hi, axis=0),
            "precision_lo": np.nanpercentile(precisions, lo, axis=0),
            "precision_hi": np.nanpercentile(precisions, hi, axis=0),
        }
    return _finish(full.thresholds, full.tp, full.fp, full.fn, full.tp_pred, band)


def operating_point(curve: LesionPRC, target_precision: float) -> int | None:
    """Index of the lowest threshold whose precision reaches ``target_precision``.

    Recall never increases with the threshold, so this is the
    highest-recall point meeting the precision target.
    """
    ok = np.flatnonzero(curve.precision >= target_precision)
    return int(ok[0]) if len(ok) else None


def volumetric_dice(a, b) -> float:
    """``2|a & b| / (|a| + |b|)``; two empty masks agree perfectly (1.0)."""
    check_same_shape(a, b, names=["a", "b"])
    a = np.asarray(getattr(a, "values", a)) != 0
    b = np.asarray(getattr(b, "values", b)) != 0
    total = int(np.count_nonzero(a)) + int(np.count_nonzero(b))
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / total


def lesion_dice(pred_mask, gt: LabelMap, connectivity: int = DEFAULT_CONNECTIVITY):
    """Per gt lesion, Dice against the union of predicted components touching it.

    Returns a list of ``(gt_id, dice)``; missed lesions score 0.
    """
    pred_values = np.asarray(getattr(pred_mask, "values", pred_mask))
    check_same_shape(pred_values, gt.labels, names=["pred", "gt"])
    pred_labels = label_components(pred_values, connectivity).labels
    out = []
    for g in range(1, gt.n_components + 1):
        g_mask = gt.labels == g
        touching = np.unique(pred_labels[g_mask])
        touching = touching[touching > 0]
        if len(touching) == 0:
            out.append((g, 0.0))
            continue
        union = np.isin(pred_labels, touching)
        inter = int(np.count_nonzero(union & g_mask))
        out.append((g, 2.0 * inter / (int(gt.sizes[g]) + int(np.count_nonzero(union)))))
    return out
