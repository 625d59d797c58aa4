"""Synthetic multi-lesion phantoms, simulated raters and simulated predictors.

Lesions are axis-aligned ellipsoids centred on a voxel.  A lesion's
boundary may carry a smooth radial offset, a low-order expansion in the
direction ``u`` from the centre::

    offset(u) = sum_k c_k * b_k(u)        (mm)

with the nine basis functions below, each scaled to unit RMS over the
sphere.  Raters and CNN-initialized contours are produced by perturbing
these coefficients, so every simulated contour is a rasterization of a
catalog entry.  The centre voxel of a rendered lesion is always set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .exceptions import GenerationError, ValidationError
from .rater_protocol import CaseStudy, RaterRecord
from .validation import check_probability, check_spacing
from .volgrid import Mask, ProbabilityMap, VoxelGrid

N_BOUNDARY_TERMS = 9
# mean of b_k(u)**2 over the unit sphere for 1, x, y, z, xy, yz, xz, x^2-y^2, 3z^2-1
_BASIS_MEAN_SQ = np.array([1.0, 1 / 3, 1 / 3, 1 / 3, 1 / 15, 1 / 15, 1 / 15, 4 / 15, 4 / 5])
_BASIS_SCALE = 1.0 / np.sqrt(_BASIS_MEAN_SQ * N_BOUNDARY_TERMS)
_BASIS_MAX_ABS = _BASIS_SCALE * np.array([1, 1, 1, 1, 0.5, 0.5, 0.5, 1, 2])

MAX_PLACEMENT_ATTEMPTS = 1000


def _basis(ux, uy, uz) -> np.ndarray:
    b = np.stack([
        np.ones_like(ux), ux, uy, uz, ux * uy, uy * uz, ux * uz,
        ux * ux - uy * uy, 3 * uz * uz - 1,
    ])
    return b * _BASIS_SCALE[:, None, None, None]


@dataclass(frozen=True, eq=False)
class Lesion:
    center: tuple[int, int, int]
    diameter_mm: float
    semi_axes_mm: tuple[float, float, float]
    boundary: np.ndarray = field(default_factory=lambda: np.zeros(N_BOUNDARY_TERMS))

    def to_dict(self) -> dict:
        return {
            "center": [int(c) for c in self.center],
            "diameter_mm": float(self.diameter_mm),
            "semi_axes_mm": [float(a) for a in self.semi_axes_mm],
            "boundary_mm": [float(c) for c in self.boundary],
        }

    @classmethod
    def from_dict(cls, doc) -> "Lesion":
        boundary = np.asarray(doc.get("boundary_mm", np.zeros(N_BOUNDARY_TERMS)), dtype=np.float64)
        return cls(tuple(doc["center"]), float(doc["diameter_mm"]), tuple(doc["semi_axes_mm"]), boundary)


def render_lesion(dims, spacing, lesion: Lesion):
    """Rasterize one lesion; returns ``(slices, local_bool_mask)``."""
    a = np.asarray(lesion.semi_axes_mm, dtype=np.float64)
    c = np.asarray(lesion.center)
    spacing = np.asarray(spacing)
    perturbed = bool(np.any(lesion.boundary != 0))
    reach = a.max() + (np.abs(lesion.boundary) @ _BASIS_MAX_ABS if perturbed else 0.0)
    half = np.ceil(reach / spacing).astype(int) + 1
    lo = np.maximum(c - half, 0)
    hi = np.minimum(c + half + 1, dims)
    slices = tuple(slice(int(l), int(h)) for l, h in zip(lo, hi))
    dx, dy, dz = np.meshgrid(
        *[(np.arange(l, h) - ci) * s for l, h, ci, s in zip(lo, hi, c, spacing)], indexing="ij"
    )
    if not perturbed:
        inside = (dx / a[0]) ** 2 + (dy / a[1]) ** 2 + (dz / a[2]) ** 2 <= 1.0
    else:
        r = np.sqrt(dx * dx + dy * dy + dz * dz)
        safe = np.where(r > 0, r, 1.0)
        # the centre voxel has no direction; give it +x (it is forced inside below)
        ux, uy, uz = np.where(r > 0, dx / safe, 1.0), dy / safe, dz / safe
        radius = 1.0 / np.sqrt((ux / a[0]) ** 2 + (uy / a[1]) ** 2 + (uz / a[2]) ** 2)
        offset = np.tensordot(lesion.boundary, _basis(ux, uy, uz), axes=1)
        inside = r <= radius + offset
    inside[tuple(int(ci - l) for ci, l in zip(c, lo))] = True
    return slices, inside


def render_catalog(dims, spacing, catalog) -> np.ndarray:
    out = np.zeros(dims, dtype=np.uint8)
    for lesion in catalog:
        sl, inside = render_lesion(dims, spacing, lesion)
        out[sl] |= inside.astype(np.uint8)
    return out


@dataclass(frozen=True)
class PhantomParams:
    dims: tuple[int, int, int] = (96, 96, 96)
    spacing: tuple[float, float, float] = (0.94, 0.94, 1.0)
    count_mean: float = 4.5
    min_count: int = 1
    max_count: int | None = 12
    diameter_range: tuple[float, float] = (1.3, 42.0)
    axis_ratio_range: tuple[float, float] = (0.7, 1.3)
    background: float = 0.0
    contrast: float = 1.0
    noise_sigma: float = 0.25
    seed: int = 0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValidationError(f"dims must be 3 positive ints, got {self.dims}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", check_spacing(self.spacing))
        if not self.count_mean > 0:
            raise ValidationError("count_mean must be positive")
        if self.min_count < 0 or (self.max_count is not None and self.max_count < self.min_count):
            raise ValidationError("need 0 <= min_count <= max_count")
        dlo, dhi = self.diameter_range
        extent = min(d * s for d, s in zip(dims, self.spacing))
        if not 0 < dlo <= dhi:
            raise ValidationError(f"bad diameter range {self.diameter_range}")
        if dhi * max(self.axis_ratio_range) > extent:
            raise ValidationError(
                f"max lesion extent {dhi * max(self.axis_ratio_range):.1f} mm exceeds grid extent {extent:.1f} mm"
            )
        rlo, rhi = self.axis_ratio_range
        if not 0 < rlo <= rhi:
            raise ValidationError(f"bad axis ratio range {self.axis_ratio_range}")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")


def gen_case(params: PhantomParams, rng: np.random.Generator | None = None):
    """One phantom: ``(image, gt, catalog)``.

    Lesions are placed largest first, fully inside the volume, and never
    within one voxel (26-neighbourhood) of another lesion.
    """
    rng = np.random.default_rng(params.seed) if rng is None else rng
    dims, spacing = params.dims, np.asarray(params.spacing)
    n = max(params.min_count, int(rng.poisson(params.count_mean)))
    if params.max_count is not None:
        n = min(n, params.max_count)
    lo, hi = np.log(params.diameter_range[0]), np.log(params.diameter_range[1])
    diameters = np.sort(np.exp(rng.uniform(lo, hi, size=n)))[::-1]
    gt = np.zeros(dims, dtype=np.uint8)
    catalog = []
    structure = ndimage.generate_binary_structure(3, 3)
    for d in diameters:
        ratios = rng.uniform(*params.axis_ratio_range, size=3)
        axes = tuple(float(x) for x in d / 2.0 * ratios)
        half = np.ceil(np.asarray(axes) / spacing).astype(int)
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            center = tuple(
                int(rng.integers(h, dd - h)) if 2 * h < dd else dd // 2
                for h, dd in zip(half, dims)
            )
            lesion = Lesion(center, float(d), axes)
            sl, inside = render_lesion(dims, spacing, lesion)
            grown = ndimage.binary_dilation(np.pad(inside, 1), structure)
            padded = np.pad(gt, 1)[tuple(slice(s.start, s.stop + 2) for s in sl)]
            if not np.any(grown & (padded != 0)):
                gt[sl] |= inside.astype(np.uint8)
                catalog.append(lesion)
                break
        else:
            raise GenerationError(
                f"could not place a {d:.1f} mm lesion after {MAX_PLACEMENT_ATTEMPTS} attempts"
            )
    noise = rng.normal(0.0, params.noise_sigma, size=dims) if params.noise_sigma > 0 else 0.0
    image = params.background + params.contrast * gt + noise
    return VoxelGrid(image.astype(np.float32), params.spacing), Mask(gt, params.spacing), catalog


@dataclass(frozen=True)
class RaterModel:
    """Boundary jitter (RMS of the random radial offset, mm), signed
    dilation bias (mm), and the chance of missing a lesion smaller than
    ``miss_below_mm``."""

    jitter_sigma_mm: float = 1.0
    bias_mm: float = 0.0
    miss_prob: float = 0.0
    miss_below_mm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.jitter_sigma_mm < 0:
            raise ValidationError("jitter_sigma_mm must be >= 0")
        check_probability(self.miss_prob, "miss_prob")


def perturb_catalog(catalog, model: RaterModel, rng: np.random.Generator):
    """Rater-perturbed copy of ``catalog`` (missed lesions are dropped)."""
    out = []
    for lesion in catalog:
        if lesion.diameter_mm < model.miss_below_mm and rng.random() < model.miss_prob:
            continue
        delta = model.jitter_sigma_mm * rng.normal(size=N_BOUNDARY_TERMS)
        # the constant basis term has value 1/3, so the bias enters scaled by 3
        delta[0] += model.bias_mm / _BASIS_SCALE[0]
        out.append(replace(lesion, boundary=lesion.boundary + delta))
    return out


def simulate_rater(gt: Mask, catalog, model: RaterModel, rng: np.random.Generator | None = None) -> Mask:
    """A rater's contour of the lesions in ``catalog`` on the grid of ``gt``."""
    rng = np.random.default_rng(model.seed) if rng is None else rng
    return Mask(render_catalog(gt.dims, gt.spacing, perturb_catalog(catalog, model, rng)), gt.spacing)


@dataclass(frozen=True)
class PredictorModel:
    """Per-lesion detection follows a logistic curve in the lesion diameter.

    Detected lesions are rendered as blobs whose peak (the certainty) is
    drawn around ``certainty_mean``; false positives are small spheres,
    Poisson-distributed in number per volume.
    """

    detect_midpoint_mm: float = 5.0
    detect_slope: float = 1.0
    blur_sigma_mm: float = 0.0
    fp_rate: float = 0.0
    fp_diameter_range: tuple[float, float] = (1.3, 6.0)
    certainty_mean: float = 0.85
    certainty_noise: float = 0.08
    fp_certainty_mean: float = 0.65
    background: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.detect_slope < 0:
            raise ValidationError("detect_slope must be >= 0 so detection is non-decreasing in diameter")
        if self.fp_rate < 0 or self.blur_sigma_mm < 0 or self.certainty_noise < 0:
            raise ValidationError("fp_rate, blur_sigma_mm and certainty_noise must be >= 0")
        if not 0 <= self.background < 0.5:
            raise ValidationError("background probability must lie in [0, 0.5)")

    def detection_probability(self, diameter_mm):
        z = self.detect_slope * (np.asarray(diameter_mm, dtype=np.float64) - self.detect_midpoint_mm)
        with np.errstate(over="ignore"):
            return 1.0 / (1.0 + np.exp(-z))


def _certainty(rng, mean, noise):
    c = mean + noise * rng.normal() if noise > 0 else mean
    return float(np.clip(c, 0.51, 1.0))


def _blob(dims, spacing, lesion, certainty, blur_sigma_mm):
    sl, inside = render_lesion(dims, spacing, lesion)
    if blur_sigma_mm <= 0:
        return sl, inside * certainty
    sigma = blur_sigma_mm / np.asarray(spacing)
    pad = np.ceil(3 * sigma).astype(int)
    lo = [max(s.start - p, 0) for s, p in zip(sl, pad)]
    hi = [min(s.stop + p, d) for s, p, d in zip(sl, pad, dims)]
    big = np.zeros([h - l for l, h in zip(lo, hi)])
    big[tuple(slice(s.start - l, s.stop - l) for s, l in zip(sl, lo))] = inside
    blurred = ndimage.gaussian_filter(big, sigma, mode="constant")
    return tuple(slice(l, h) for l, h in zip(lo, hi)), blurred / blurred.max() * certainty


def simulate_predictor(gt: Mask, catalog, model: PredictorModel,
                       rng: np.random.Generator | None = None) -> ProbabilityMap:
    """A synthetic network output for the lesions in ``catalog``."""
    rng = np.random.default_rng(model.seed) if rng is None else rng
    dims, spacing = gt.dims, gt.spacing
    prob = np.full(dims, model.background, dtype=np.float64)
    for lesion in catalog:
        if rng.random() >= model.detection_probability(lesion.diameter_mm):
            continue
        c = _certainty(rng, model.certainty_mean, model.certainty_noise)
        sl, blob = _blob(dims, spacing, lesion, c, model.blur_sigma_mm)
        prob[sl] = np.maximum(prob[sl], blob)
    n_fp = int(rng.poisson(model.fp_rate)) if model.fp_rate > 0 else 0
    lo, hi = np.log(model.fp_diameter_range[0]), np.log(model.fp_diameter_range[1])
    for _ in range(n_fp):
        d = float(np.exp(rng.uniform(lo, hi)))
        center = tuple(int(rng.integers(n)) for n in dims)
        fp = Lesion(center, d, (d / 2,) * 3)
        c = _certainty(rng, model.fp_certainty_mean, model.certainty_noise)
        sl, blob = _blob(dims, spacing, fp, c, model.blur_sigma_mm)
        prob[sl] = np.maximum(prob[sl], blob)
    return ProbabilityMap(prob.astype(np.float32), spacing)


@dataclass(frozen=True)
class StudyParams:
    """Simulated multi-rater clinical study.

    Manual contours jitter independently around the truth; CNN-initialized
    contours jitter (less) around one shared seed contour, itself a
    perturbation of the truth.  Manual times are log-normal around
    ``manual_time_median_s`` and adjustment takes a uniform fraction of the
    manual time.
    """

    n_cases: int = 12
    n_raters: int = 4
    manual: RaterModel = RaterModel(jitter_sigma_mm=1.0)
    seed_contour: RaterModel = RaterModel(jitter_sigma_mm=0.5)
    cnn_adjust: RaterModel = RaterModel(jitter_sigma_mm=0.3)
    manual_time_median_s: float = 605.0
    manual_time_log_sigma: float = 0.6
    adjust_fraction_range: tuple[float, float] = (0.25, 0.65)

    def __post_init__(self):
        if self.n_cases < 1 or self.n_raters < 2:
            raise ValidationError("a study needs >= 1 case and >= 2 raters")
        if self.manual_time_median_s <= 0:
            raise ValidationError("manual_time_median_s must be positive")
        flo, fhi = self.adjust_fraction_range
        if not 0 < flo <= fhi:
            raise ValidationError("adjust_fraction_range must be positive and ordered")


def simulate_study(phantom: PhantomParams, study: StudyParams, rng: np.random.Generator):
    """Cases with per-rater manual and CNN-initialized contours and times.

    Returns ``(cases, truths)`` where ``truths`` lists each case's gt Mask.
    """
    cases, truths = [], []
    for i in range(study.n_cases):
        _, gt, catalog = gen_case(phantom, rng)
        seed_catalog = perturb_catalog(catalog, study.seed_contour, rng)
        records = []
        for _ in range(study.n_raters):
            manual = render_catalog(gt.dims, gt.spacing, perturb_catalog(catalog, study.manual, rng))
            cnn = render_catalog(gt.dims, gt.spacing, perturb_catalog(seed_catalog, study.cnn_adjust, rng))
            t_manual = study.manual_time_median_s * math.exp(study.manual_time_log_sigma * rng.normal())
            t_adjust = t_manual * rng.uniform(*study.adjust_fraction_range)
            records.append(RaterRecord(manual, cnn, round(t_manual, 3), round(t_adjust, 3)))
        cases.append(CaseStudy(f"case{i:03d}", tuple(records)))
        truths.append(gt)
    return cases, truths
