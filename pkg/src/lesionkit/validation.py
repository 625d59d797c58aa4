"""Input validation helpers shared by every module."""

from __future__ import annotations

import numbers

import numpy as np

from .exceptions import ValidationError


def check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3:
        raise ValidationError(f"spacing must have 3 components, got {len(spacing)}")
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ValidationError(f"spacing components must be positive, got {spacing}")
    return spacing


def check_volume_array(values, dtype=None, name: str = "values") -> np.ndarray:
    """Return ``values`` as a 3D array, optionally cast to ``dtype``."""
    arr = np.asarray(values) if dtype is None else np.asarray(values, dtype=dtype)
    if arr.ndim != 3:
        raise ValidationError(f"{name} must be 3D, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ValidationError(f"{name} dims must be positive, got {arr.shape}")
    return arr


def check_binary(arr: np.ndarray, name: str = "mask") -> np.ndarray:
    if arr.dtype == bool:
        return arr.astype(np.uint8)
    if not np.all((arr == 0) | (arr == 1)):
        bad = np.unique(arr[(arr != 0) & (arr != 1)])[:5]
        raise ValidationError(f"{name} must contain only 0/1, found {bad.tolist()}")
    return arr.astype(np.uint8)


def check_same_shape(*arrays, names=None) -> tuple[int, int, int]:
    """Raise unless every array (or grid) has the same dims."""
    shapes = [tuple(np.shape(getattr(a, "values", a))) for a in arrays]
    if len(set(shapes)) > 1:
        names = names or [f"arg{i}" for i in range(len(arrays))]
        detail = ", ".join(f"{n}={s}" for n, s in zip(names, shapes))
        raise ValidationError(f"dims mismatch: {detail}")
    return shapes[0]


def check_probability(p: float, name: str) -> float:
    if not isinstance(p, numbers.Real) or not 0.0 <= float(p) <= 1.0:
        raise ValidationError(f"{name} must lie in [0, 1], got {p!r}")
    return float(p)


def check_connectivity(connectivity: int) -> int:
    if connectivity not in (6, 26):
        raise ValidationError(f"connectivity must be 6 or 26, got {connectivity!r}")
    return int(connectivity)


def values_of(x, dtype=np.float64) -> np.ndarray:
    """Raw voxel array of a grid or array-like, cast to ``dtype``."""
    return np.asarray(getattr(x, "values", x), dtype=dtype)
