"""Connected-component decomposition of binary masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .validation import check_connectivity, check_probability
from .volgrid import Mask, ProbabilityMap, VoxelGrid

DEFAULT_CONNECTIVITY = 26

_STRUCTURES = {
    6: ndimage.generate_binary_structure(3, 1),
    26: ndimage.generate_binary_structure(3, 3),
}


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Component labels of a mask.

    ``labels[x, y, z]`` is 0 for background (component C_0) and 1..K for
    lesions; ``sizes[i]`` is the voxel count of component i, so
    ``len(sizes) == K + 1`` and ``sizes.sum()`` equals the voxel count.
    """

    labels: np.ndarray
    sizes: np.ndarray
    spacing: tuple[float, float, float]
    connectivity: int

    @property
    def n_components(self) -> int:
        return len(self.sizes) - 1

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.labels.shape)

    @property
    def voxel_volume(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def component_mask(self, label: int) -> np.ndarray:
        return self.labels == label

    def to_grid(self) -> VoxelGrid:
        """Labels as float32 values (exact for K < 2**24)."""
        return VoxelGrid(self.labels.astype(np.float32), self.spacing)


def label_components(mask: Mask, connectivity: int = DEFAULT_CONNECTIVITY) -> LabelMap:
    """Label the connected components of ``mask``.

    Labels follow the x-fastest scan order of the volume: the component
    holding the first positive voxel met in that scan gets label 1, and so
    on.  ``connectivity`` is 6 (faces) or 26 (faces, edges and corners).
    """
    connectivity = check_connectivity(connectivity)
    values = np.asarray(getattr(mask, "values", mask))
    raw, k = ndimage.label(values != 0, structure=_STRUCTURES[connectivity])
    labels = _relabel_scan_order(raw, k)
    sizes = np.bincount(labels.ravel(), minlength=k + 1).astype(np.int64)
    spacing = getattr(mask, "spacing", (1.0, 1.0, 1.0))
    labels.flags.writeable = False
    sizes.flags.writeable = False
    return LabelMap(labels, sizes, tuple(spacing), connectivity)


def _relabel_scan_order(raw: np.ndarray, k: int) -> np.ndarray:
    if k == 0:
        return np.zeros(raw.shape, dtype=np.int32)
    flat = raw.ravel(order="F")
    present, first = np.unique(flat, return_index=True)
    # drop the background label 0 (absent when the mask is all positive)
    if present[0] == 0:
        present, first = present[1:], first[1:]
    order = np.argsort(first, kind="stable")
    lut = np.zeros(k + 1, dtype=np.int32)
    lut[present[order]] = np.arange(1, k + 1, dtype=np.int32)
    return lut[raw]


def binarize(prob: ProbabilityMap, threshold: float = 0.5) -> Mask:
    """Voxels strictly above ``threshold``; a voxel at exactly 0.5 stays background."""
    threshold = check_probability(threshold, "threshold")
    values = np.asarray(getattr(prob, "values", prob))
    spacing = getattr(prob, "spacing", (1.0, 1.0, 1.0))
    return Mask((values > threshold).astype(np.uint8), spacing)
