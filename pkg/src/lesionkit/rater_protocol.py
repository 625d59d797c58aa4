"""Multi-rater contour comparison, sign test and delineation timing.

Three comparison settings pit one rater against the consensus of the
others:

``1v3``
    the rater's manual contour vs the consensus of the others' manual contours;
``1p_v3``
    the rater's CNN-initialized contour vs that same manual consensus;
``1p_v3p``
    the rater's CNN-initialized contour vs the consensus of the others'
    CNN-initialized contours.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .exceptions import DataError, DegenerateInputError, ValidationError
from .lesion_metrics import volumetric_dice
from .validation import check_same_shape

SETTINGS = ("1v3", "1p_v3", "1p_v3p")
SIGN_TEST_PAIRS = (("1v3", "1p_v3"), ("1v3", "1p_v3p"))


@dataclass(frozen=True, eq=False)
class RaterRecord:
    manual_mask: np.ndarray | None
    cnn_init_mask: np.ndarray | None
    manual_time: float
    adjust_time: float


@dataclass(frozen=True, eq=False)
class CaseStudy:
    """One case delineated by every rater, manually and from a CNN initialization.

    Times are in seconds.
    """

    case_id: str
    raters: tuple[RaterRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "raters", tuple(self.raters))
        masks = [m for r in self.raters for m in (r.manual_mask, r.cnn_init_mask) if m is not None]
        if masks:
            check_same_shape(*masks)
        for u, r in enumerate(self.raters, start=1):
            for name in ("manual_time", "adjust_time"):
                t = getattr(r, name)
                if t is not None and not t > 0:
                    raise ValidationError(f"case {self.case_id} rater {u}: {name} must be > 0, got {t}")

    @property
    def n_raters(self) -> int:
        return len(self.raters)


def consensus(masks) -> np.ndarray:
    """Per-voxel mean of binary masks thresholded at 0.5, ties positive.

    For three raters this is a 2-of-3 majority vote.
    """
    arrays = [np.asarray(getattr(m, "values", m)) for m in masks]
    if len(arrays) < 2:
        raise ValidationError("consensus needs at least 2 masks")
    check_same_shape(*arrays)
    votes = np.zeros(arrays[0].shape, dtype=np.int32)
    for a in arrays:
        votes += a != 0
    # mean >= 1/2  <=>  2 * votes >= n, kept in integers to avoid ties drifting
    return (2 * votes >= len(arrays)).astype(np.uint8)


def _mask(study: CaseStudy, u: int, kind: str) -> np.ndarray:
    record = study.raters[u]
    mask = record.manual_mask if kind == "manual" else record.cnn_init_mask
    if mask is None:
        raise DataError(f"case {study.case_id!r}, rater {u + 1}: missing {kind} mask")
    return np.asarray(getattr(mask, "values", mask))


def evaluate_setting(study, setting: str) -> dict[tuple[str, int], float]:
    """Dice per (case_id, rater number) for one comparison setting.

    Rater numbers start at 1.
    """
    if setting not in SETTINGS:
        raise ValidationError(f"setting must be one of {SETTINGS}, got {setting!r}")
    own_kind = "manual" if setting == "1v3" else "cnn_init"
    ref_kind = "cnn_init" if setting == "1p_v3p" else "manual"
    out = {}
    for case in study:
        if case.n_raters < 2:
            raise ValidationError(f"case {case.case_id!r} needs at least 2 raters")
        for u in range(case.n_raters):
            others = [_mask(case, v, ref_kind) for v in range(case.n_raters) if v != u]
            ref = others[0] if len(others) == 1 else consensus(others)
            out[(case.case_id, u + 1)] = volumetric_dice(_mask(case, u, own_kind), ref)
    return out


def sign_test(diffs) -> float:
    """Exact two-sided sign test; zero differences are dropped."""
    diffs = np.asarray(list(diffs), dtype=np.float64)
    nonzero = diffs[diffs != 0]
    if diffs.size == 0:
        raise DegenerateInputError("sign test needs at least one difference")
    if nonzero.size == 0:
        raise DegenerateInputError("all differences are zero; the sign test is undefined")
    n = int(nonzero.size)
    s = int(np.count_nonzero(nonzero > 0))
    lower = sum(math.comb(n, i) for i in range(s + 1))
    upper = sum(math.comb(n, i) for i in range(s, n + 1))
    return float(min(Fraction(1), 2 * Fraction(min(lower, upper), 2**n)))


def median(values) -> float:
    """Middle order statistic; mean of the two middle ones for even counts."""
    v = np.sort(np.asarray(list(values), dtype=np.float64))
    if v.size == 0:
        raise ValidationError("median of an empty sequence")
    mid = v.size // 2
    if v.size % 2:
        return float(v[mid])
    return float((v[mid - 1] + v[mid]) / 2.0)


@dataclass(frozen=True)
class ComparisonReport:
    """Median Dice per rater (and pooled under key ``"all"``) for every setting,
    plus sign-test p-values for the setting pairs in ``SIGN_TEST_PAIRS``.

    A p-value is ``None`` when every paired difference was zero.
    """

    medians: dict
    p_values: dict
    dice: dict

    def rows(self):
        for key in sorted(k for k in self.medians if k != "all") + ["all"]:
            label = "All data" if key == "all" else f"User {key}"
            yield {
                "rater": label,
                **{s: self.medians[key][s] for s in SETTINGS},
                "p_I": self.p_values[key]["I"],
                "p_II": self.p_values[key]["II"],
            }


def compare_settings(study) -> ComparisonReport:
    """Table-style comparison; the pooled row uses every (case, rater) pair."""
    study = list(study)
    dice = {s: evaluate_setting(study, s) for s in SETTINGS}
    keys = list(dice["1v3"])
    raters = sorted({u for _, u in keys})
    groups = {u: [k for k in keys if k[1] == u] for u in raters}
    groups["all"] = keys
    medians, p_values = {}, {}
    for g, ks in groups.items():
        medians[g] = {s: median(dice[s][k] for k in ks) for s in SETTINGS}
        p_values[g] = {}
        for tag, (a, b) in zip(("I", "II"), SIGN_TEST_PAIRS):
            diffs = [dice[b][k] - dice[a][k] for k in ks]
            try:
                p_values[g][tag] = sign_test(diffs)
            except DegenerateInputError:
                p_values[g][tag] = None
    return ComparisonReport(medians, p_values, dice)


def timing_summary(study) -> dict:
    """Median/range of manual time and of time reduction, and the speed-up.

    Reduction is ``manual - adjust`` per (case, rater) and may be negative.
    Speed-up is the ratio of medians
    ``median(manual) / (median(manual) - median(reduction))``; the median of
    per-case ratios is reported alongside as ``speedup_per_case``.
    """
    per_rater: dict = {}
    for case in study:
        for u, r in enumerate(case.raters, start=1):
            if r.manual_time is None or r.adjust_time is None:
                raise DataError(f"case {case.case_id!r}, rater {u}: missing delineation time")
            per_rater.setdefault(u, []).append((float(r.manual_time), float(r.adjust_time)))
    if not per_rater:
        raise ValidationError("timing summary of an empty study")
    groups = dict(per_rater)
    groups["all"] = [t for u in sorted(per_rater) for t in per_rater[u]]
    return {g: _summarize_times(ts) for g, ts in groups.items()}


def speedup(median_manual: float, median_reduction: float) -> float:
    remaining = median_manual - median_reduction
    if remaining <= 0:
        return math.inf
    return median_manual / remaining


def _summarize_times(times) -> dict:
    manual = [m for m, _ in times]
    reduction = [m - a for m, a in times]
    med_manual = median(manual)
    med_reduction = median(reduction)
    return {
        "n": len(times),
        "median_manual": med_manual,
        "manual_range": (min(manual), max(manual)),
        "median_reduction": med_reduction,
        "reduction_range": (min(reduction), max(reduction)),
        "speedup": speedup(med_manual, med_reduction),
        "speedup_per_case": median(m / a for m, a in times),
    }


def mmss(seconds: float) -> str:
    """Render seconds as ``mm:ss`` (rounded to the nearest second)."""
    total = int(round(seconds))
    sign = "-" if total < 0 else ""
    m, s = divmod(abs(total), 60)
    return f"{sign}{m:02d}:{s:02d}"
