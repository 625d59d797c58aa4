"""Inverse-volume lesion weights and the BCE / iwBCE / Dice losses.

All losses take probabilities (not logits) and return the loss value with
its analytic gradient with respect to every voxel probability.  Arithmetic
is float64; reductions use ``numpy.sum``, whose pairwise summation runs in
a fixed order, so results are reproducible bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ValidationError
from .labeling import LabelMap
from .validation import check_same_shape, values_of
from .volgrid import VoxelGrid

#: probabilities are clamped to [EPS, 1 - EPS] before taking logs
EPS = 1e-7
#: additive smoothing of the Dice loss numerator and denominator
DICE_SMOOTH = 1.0

LOSS_KINDS = ("bce", "iwbce", "dice")


@dataclass(frozen=True, eq=False)
class WeightGrid:
    """Per-voxel weights, the ``beta`` used, and the per-component weights.

    ``component_weights[0]`` is the background weight, always 1.
    """

    grid: VoxelGrid
    beta: float
    component_weights: np.ndarray
    # float64 copy of the voxel weights; the VoxelGrid stores float32 for I/O
    values: np.ndarray

    @property
    def dims(self):
        return self.grid.dims

    def crop(self, origin, size) -> np.ndarray:
        x0, y0, z0 = origin
        px, py, pz = size
        return self.values[x0:x0 + px, y0:y0 + py, z0:z0 + pz]


def component_weights(sizes, beta: float) -> np.ndarray:
    """``w_0 = 1`` and ``w_i = beta * sum_k |C_k| / |C_i|`` for lesions i >= 1.

    The sum runs over all components, background included.
    """
    beta = float(beta)
    if not beta > 0 or beta > 1:
        raise ValidationError(f"beta must lie in (0, 1], got {beta!r}")
    sizes = np.asarray(sizes, dtype=np.int64)
    total = float(sizes.sum())
    weights = np.ones(len(sizes), dtype=np.float64)
    weights[1:] = beta * total / sizes[1:].astype(np.float64)
    return weights


def build_weight_grid(labels: LabelMap, beta: float) -> WeightGrid:
    """Broadcast the per-component weights of ``labels`` to its voxels."""
    weights = component_weights(labels.sizes, beta)
    values = weights[labels.labels]
    values.flags.writeable = False
    return WeightGrid(
        grid=VoxelGrid(values.astype(np.float32), labels.spacing),
        beta=float(beta),
        component_weights=weights,
        values=values,
    )


@dataclass(frozen=True, eq=False)
class LossReport:
    loss_kind: str
    value: float
    gradient: np.ndarray | None = None

    def to_dict(self) -> dict:
        doc = {"loss_kind": self.loss_kind, "value": self.value}
        if self.gradient is not None:
            g = self.gradient
            doc["gradient"] = {
                "dims": list(g.shape),
                "min": float(g.min()),
                "max": float(g.max()),
                "l2_norm": float(np.sqrt(np.sum(g * g))),
            }
        return doc


def _bce_terms(p, y, weights, kind):
    """Shared body of bce/iwbce so unit weights reproduce BCE exactly."""
    n = p.size
    clamped = np.clip(p, EPS, 1.0 - EPS)
    inside = (p > EPS) & (p < 1.0 - EPS)
    log_lik = y * np.log(clamped) + (1.0 - y) * np.log1p(-clamped)
    dlog = y / clamped - (1.0 - y) / (1.0 - clamped)
    if weights is not None:
        log_lik = weights * log_lik
        dlog = weights * dlog
    value = -np.sum(log_lik) / n
    grad = np.where(inside, -dlog / n, 0.0)
    return LossReport(kind, float(value), grad)


def bce(p, y) -> LossReport:
    """Mean binary cross-entropy over all voxels."""
    check_same_shape(p, y, names=["p", "y"])
    return _bce_terms(values_of(p), values_of(y), None, "bce")


def iwbce(p, y, w) -> LossReport:
    """Binary cross-entropy with per-voxel weights ``w``.

    ``w`` may be a :class:`WeightGrid` or a plain array, e.g. a patch crop
    of the full-volume weights.
    """
    w_values = w.values if isinstance(w, WeightGrid) else values_of(w)
    check_same_shape(p, y, w_values, names=["p", "y", "w"])
    return _bce_terms(values_of(p), values_of(y), w_values, "iwbce")


def dice_loss(p, y) -> LossReport:
    """Soft Dice loss ``1 - (2 sum(p y) + s) / (sum(p^2) + sum(y^2) + s)``, s = 1."""
    check_same_shape(p, y, names=["p", "y"])
    p = values_of(p)
    y = values_of(y)
    num = 2.0 * np.sum(p * y) + DICE_SMOOTH
    den = np.sum(p * p) + np.sum(y * y) + DICE_SMOOTH
    value = 1.0 - num / den
    grad = -(2.0 * y * den - num * 2.0 * p) / (den * den)
    return LossReport("dice", float(value), grad)


def compute_loss(kind: str, p, y, w=None) -> LossReport:
    if kind == "bce":
        return bce(p, y)
    if kind == "iwbce":
        if w is None:
            raise ValidationError("iwbce needs a weight grid")
        return iwbce(p, y, w)
    if kind == "dice":
        return dice_loss(p, y)
    raise ValidationError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
