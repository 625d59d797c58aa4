"""Volumetric containers, dataset manifests and RVOL file I/O.

Arrays are indexed ``[x, y, z]``.  On disk voxels are stored x-fastest,
which is Fortran order for an ``(nx, ny, nz)`` array.

RVOL layout (little-endian)::

    offset  size  field
    0       6     magic b"RVOL1\\0"
    6       1     dtype code (0 = mask byte, 1 = float32)
    7       12    dims nx, ny, nz as u32
    19      24    spacing sx, sy, sz as f64 (mm)
    43      ...   payload, nx*ny*nz items x-fastest
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import FormatError, TruncationError, ValidationError
from .validation import check_binary, check_spacing, check_volume_array

MAGIC = b"RVOL1\x00"
HEADER = struct.Struct("<6sB3I3d")
DTYPE_MASK = 0
DTYPE_FLOAT32 = 1
_PAYLOAD_DTYPES = {DTYPE_MASK: np.dtype("u1"), DTYPE_FLOAT32: np.dtype("<f4")}

SPLITS = ("train", "holdout", "clinical")


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Dense float32 scalar field over a voxel lattice with spacing in mm."""

    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        values = check_volume_array(self.values, dtype=np.float32)
        object.__setattr__(self, "values", _freeze(values))
        object.__setattr__(self, "spacing", check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.values.shape)

    @property
    def n_voxels(self) -> int:
        return int(self.values.size)

    @property
    def voxel_volume(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )

    __hash__ = None

    def __repr__(self):
        return f"{type(self).__name__}(dims={self.dims}, spacing={self.spacing})"


class ProbabilityMap(VoxelGrid):
    """A VoxelGrid whose values all lie in [0, 1]."""

    def __post_init__(self):
        super().__post_init__()
        v = self.values
        if not (np.all(v >= 0.0) and np.all(v <= 1.0)):
            raise ValidationError("probability map values must lie in [0, 1]")


class Mask(VoxelGrid):
    """Binary ground truth; values are uint8 in {0, 1}."""

    def __post_init__(self):
        values = check_binary(check_volume_array(self.values), name="mask")
        object.__setattr__(self, "values", _freeze(values))
        object.__setattr__(self, "spacing", check_spacing(self.spacing))

    @property
    def n_positive(self) -> int:
        return int(np.count_nonzero(self.values))


def check_same_geometry(*grids: VoxelGrid, names=None) -> None:
    """Paired grids must share dims; spacing must agree to float precision."""
    names = names or [f"grid{i}" for i in range(len(grids))]
    dims = {g.dims for g in grids}
    if len(dims) > 1:
        detail = ", ".join(f"{n}={g.dims}" for n, g in zip(names, grids))
        raise ValidationError(f"dims mismatch: {detail}")
    ref = np.asarray(grids[0].spacing)
    for n, g in zip(names, grids):
        if not np.allclose(ref, g.spacing, rtol=1e-9, atol=0):
            raise ValidationError(f"spacing mismatch: {names[0]}={grids[0].spacing}, {n}={g.spacing}")


def write_volume(grid: VoxelGrid, path) -> None:
    """Write ``grid`` as RVOL; identical grids give identical bytes."""
    if not isinstance(grid, VoxelGrid):
        raise ValidationError(f"expected a VoxelGrid or Mask, got {type(grid).__name__}")
    # re-run invariants; the arrays are frozen but spacing could come from anywhere
    check_spacing(grid.spacing)
    code = DTYPE_MASK if isinstance(grid, Mask) else DTYPE_FLOAT32
    header = HEADER.pack(MAGIC, code, *grid.dims, *grid.spacing)
    payload = grid.values.astype(_PAYLOAD_DTYPES[code]).tobytes(order="F")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_volume(path) -> VoxelGrid | Mask:
    """Read an RVOL file; dtype code 0 yields a ``Mask``, 1 a ``VoxelGrid``."""
    data = Path(path).read_bytes()
    if len(data) < HEADER.size:
        if not data.startswith(MAGIC[: len(data)]) or len(data) < len(MAGIC):
            raise FormatError(f"{path}: missing RVOL magic")
        raise FormatError(f"{path}: header truncated ({len(data)} < {HEADER.size} bytes)")
    magic, code, nx, ny, nz, sx, sy, sz = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: missing RVOL magic")
    if code not in _PAYLOAD_DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    if min(nx, ny, nz) < 1:
        raise FormatError(f"{path}: dims must be positive, got {(nx, ny, nz)}")
    dtype = _PAYLOAD_DTYPES[code]
    expected = nx * ny * nz * dtype.itemsize
    payload = data[HEADER.size:]
    if len(payload) != expected:
        raise TruncationError(
            f"{path}: payload has {len(payload)} bytes, header implies {expected}"
        )
    values = np.frombuffer(payload, dtype=dtype).reshape((nx, ny, nz), order="F")
    try:
        spacing = check_spacing((sx, sy, sz))
    except ValidationError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if code == DTYPE_MASK:
        return Mask(values, spacing)
    return VoxelGrid(values.astype(np.float32), spacing)


def positive_fraction(masks) -> float:
    """Fraction of positive voxels pooled over ``masks``."""
    masks = list(masks)
    if not masks:
        raise ValidationError("positive_fraction needs at least one mask")
    positives = sum(int(np.count_nonzero(getattr(m, "values", m))) for m in masks)
    total = sum(int(np.size(getattr(m, "values", m))) for m in masks)
    return positives / total


@dataclass(frozen=True)
class CaseEntry:
    case_id: str
    image: str
    gt: str
    prob: str | None = None


@dataclass(frozen=True)
class DatasetManifest:
    """A split of cases, each naming its image, ground truth and optional probability map.

    Relative paths are resolved against ``root`` (the manifest's directory
    when loaded from disk).
    """

    split: str
    cases: tuple[CaseEntry, ...]
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"split must be one of {SPLITS}, got {self.split!r}")
        object.__setattr__(self, "cases", tuple(self.cases))
        ids = [c.case_id for c in self.cases]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise ValidationError(f"duplicate case ids in manifest: {dupes}")

    def __len__(self):
        return len(self.cases)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else Path(self.root) / p

    def to_dict(self) -> dict:
        cases = []
        for c in self.cases:
            entry = {"id": c.case_id, "image": c.image, "gt": c.gt}
            if c.prob is not None:
                entry["prob"] = c.prob
            cases.append(entry)
        return {"split": self.split, "cases": cases}

    @classmethod
    def from_dict(cls, doc: dict, root=".") -> "DatasetManifest":
        try:
            cases = [
                CaseEntry(str(c["id"]), str(c["image"]), str(c["gt"]), c.get("prob"))
                for c in doc["cases"]
            ]
            return cls(doc["split"], tuple(cases), Path(root))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed manifest: {exc!r}") from None

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc, root=path.parent)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    def relative_to(self, root) -> "DatasetManifest":
        """Same manifest with paths rewritten relative to ``root``."""
        def rel(p):
            return None if p is None else os.path.relpath(self.resolve(p), root)

        cases = tuple(
            CaseEntry(c.case_id, rel(c.image), rel(c.gt), rel(c.prob)) for c in self.cases
        )
        return DatasetManifest(self.split, cases, Path(root))
