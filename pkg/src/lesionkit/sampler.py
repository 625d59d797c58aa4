"""Training patch extraction with Tumor Sampling.

A patch centre is drawn from the positive ground-truth voxels with
probability ``tumor_prob`` and uniformly from the whole volume otherwise.
The window is centred there and then shifted the minimum amount needed to
fit inside the volume (no padding).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ValidationError
from .imbalance import WeightGrid, build_weight_grid
from .labeling import label_components
from .validation import check_probability, check_same_shape, values_of
from .volgrid import check_same_geometry, positive_fraction, read_volume


@dataclass(frozen=True)
class PatchSpec:
    size: tuple[int, int, int] = (64, 64, 64)
    tumor_prob: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        size = tuple(int(s) for s in self.size)
        if len(size) != 3 or min(size) < 1:
            raise ValidationError(f"patch size must be 3 positive ints, got {self.size}")
        object.__setattr__(self, "size", size)
        check_probability(self.tumor_prob, "tumor_prob")
        if not 0 <= int(self.rng_seed) < 2**64:
            raise ValidationError("rng_seed must be an unsigned 64-bit integer")

    def check_fits(self, dims) -> None:
        if any(p > d for p, d in zip(self.size, dims)):
            raise ValidationError(f"patch size {self.size} exceeds volume dims {tuple(dims)}")


@dataclass(frozen=True, eq=False)
class Patch:
    """Congruent crops of one training case.

    ``center`` is the drawn centre voxel; ``center_positive`` says whether
    it lies on the ground truth (before the window shift) and
    ``shifted_center_positive`` the same for the centre of the final window.
    """

    origin: tuple[int, int, int]
    image: np.ndarray
    gt: np.ndarray
    weights: np.ndarray | None
    center: tuple[int, int, int]
    center_positive: bool
    shifted_center_positive: bool
    tumor_draw: bool
    case_index: int = 0
    features: np.ndarray | None = None

    @property
    def size(self):
        return self.gt.shape


@dataclass(frozen=True, eq=False)
class TrainingCase:
    """Everything the sampler needs from one case, as float64/uint8 arrays.

    ``positive_flat`` caches the Fortran-order indices of positive voxels.
    ``features`` (optional) has shape ``(n_features, nx, ny, nz)`` and is
    cropped alongside the other grids.
    """

    image: np.ndarray
    gt: np.ndarray
    weights: np.ndarray | None = None
    features: np.ndarray | None = None
    case_id: str = ""

    def __post_init__(self):
        arrays = [self.image, self.gt] + ([self.weights] if self.weights is not None else [])
        check_same_shape(*arrays, names=["image", "gt", "weights"][: len(arrays)])
        if self.features is not None and self.features.shape[1:] != self.gt.shape:
            raise ValidationError(
                f"features shape {self.features.shape} does not match volume {self.gt.shape}"
            )
        object.__setattr__(
            self, "positive_flat", np.flatnonzero(np.asarray(self.gt).ravel(order="F"))
        )

    @property
    def dims(self):
        return self.gt.shape


def window_origin(center, size, dims) -> tuple[int, int, int]:
    """Origin of a window of ``size`` centred on ``center``, shifted to fit ``dims``."""
    origin = []
    for c, p, d in zip(center, size, dims):
        lo = int(c) - p // 2
        origin.append(min(max(lo, 0), d - p))
    return tuple(origin)


def _draw_center(case: TrainingCase, tumor_prob: float, rng: np.random.Generator):
    dims = case.dims
    tumor_draw = bool(rng.random() < tumor_prob)
    if tumor_draw and case.positive_flat.size:
        flat = case.positive_flat[rng.integers(case.positive_flat.size)]
    else:
        # empty ground truth falls back to a uniform draw
        tumor_draw = tumor_draw and case.positive_flat.size > 0
        flat = rng.integers(int(np.prod(dims)))
    center = np.unravel_index(int(flat), dims, order="F")
    return tuple(int(c) for c in center), tumor_draw


def _crop(arr, origin, size):
    if arr is None:
        return None
    x0, y0, z0 = origin
    px, py, pz = size
    return arr[..., x0:x0 + px, y0:y0 + py, z0:z0 + pz]


def crop_case(case: TrainingCase, center, size, tumor_draw=False, case_index=0) -> Patch:
    origin = window_origin(center, size, case.dims)
    shifted = tuple(o + p // 2 for o, p in zip(origin, size))
    return Patch(
        origin=origin,
        image=_crop(case.image, origin, size),
        gt=_crop(case.gt, origin, size),
        weights=_crop(case.weights, origin, size),
        center=tuple(center),
        center_positive=bool(case.gt[center]),
        shifted_center_positive=bool(case.gt[shifted]),
        tumor_draw=tumor_draw,
        case_index=case_index,
        features=_crop(case.features, origin, size),
    )


def sample_patch(image, gt, w, spec: PatchSpec, rng: np.random.Generator, features=None) -> Patch:
    """Draw one patch from a single volume.

    ``w`` may be a :class:`WeightGrid`, a weight array, or ``None`` when
    the loss needs no weights.
    """
    if isinstance(w, WeightGrid):
        w = w.values
    case = TrainingCase(
        values_of(image),
        np.asarray(getattr(gt, "values", gt)),
        None if w is None else values_of(w),
        features,
    )
    return _sample_from_case(case, spec, rng, 0)


def _sample_from_case(case, spec, rng, case_index):
    spec.check_fits(case.dims)
    center, tumor_draw = _draw_center(case, spec.tumor_prob, rng)
    return crop_case(case, center, spec.size, tumor_draw, case_index)


def sample_batch(cases, spec: PatchSpec, batch_size: int, rng: np.random.Generator) -> list[Patch]:
    """``batch_size`` patches, each from a case drawn uniformly with replacement."""
    cases = list(cases)
    if not cases:
        raise ValidationError("cannot sample from an empty set of cases")
    if batch_size < 1:
        raise ValidationError(f"batch_size must be positive, got {batch_size}")
    patches = []
    for _ in range(batch_size):
        idx = int(rng.integers(len(cases)))
        patches.append(_sample_from_case(cases[idx], spec, rng, idx))
    return patches


def stream_rngs(base_seed: int, n_streams: int) -> list[np.random.Generator]:
    """Independent generators for parallel sampling, seeded ``base_seed + i``."""
    return [np.random.default_rng(base_seed + i) for i in range(n_streams)]


def load_training_cases(manifest, weighted: bool = True, connectivity: int = 26,
                        beta: float | None = None) -> list[TrainingCase]:
    """Read every case of ``manifest`` into memory.

    With ``weighted`` the inverse-volume weight grid of each case is built
    from its full ground truth, using ``beta`` or, by default, the positive
    fraction pooled over the whole manifest.
    """
    if len(manifest) == 0:
        raise ValidationError("manifest has no cases")
    loaded = []
    for entry in manifest.cases:
        image = read_volume(manifest.resolve(entry.image))
        gt = read_volume(manifest.resolve(entry.gt))
        check_same_geometry(image, gt, names=[f"{entry.case_id}:image", f"{entry.case_id}:gt"])
        loaded.append((entry.case_id, image, gt))
    if weighted and beta is None:
        beta = positive_fraction([gt for _, _, gt in loaded])
    cases = []
    for case_id, image, gt in loaded:
        weights = None
        if weighted and beta > 0:
            weights = build_weight_grid(label_components(gt, connectivity), beta).values
        elif weighted:
            weights = np.ones(gt.dims)
        cases.append(TrainingCase(values_of(image), np.asarray(gt.values), weights, None, case_id))
    return cases
