import json
import struct

import numpy as np
import pytest

from lesionkit.exceptions import FormatError, TruncationError, ValidationError
from lesionkit.volgrid import (
    HEADER,
    DatasetManifest,
    Mask,
    ProbabilityMap,
    VoxelGrid,
    check_same_geometry,
    positive_fraction,
    read_volume,
    write_volume,
)


def test_header_is_43_bytes():
    assert HEADER.size == 43


def test_roundtrip_float(tmp_path, rng):
    v = rng.standard_normal((5, 4, 3)).astype(np.float32)
    g = VoxelGrid(v, (0.94, 0.94, 1.0))
    write_volume(g, tmp_path / "a.rvol")
    back = read_volume(tmp_path / "a.rvol")
    assert type(back) is VoxelGrid
    assert back == g
    assert back.dims == (5, 4, 3)


def test_roundtrip_mask(tmp_path, rng):
    m = Mask((rng.random((6, 2, 7)) > 0.5).astype(np.uint8), (1.0, 2.0, 3.0))
    write_volume(m, tmp_path / "m.rvol")
    back = read_volume(tmp_path / "m.rvol")
    assert isinstance(back, Mask)
    assert back == m


def test_disk_layout_is_x_fastest(tmp_path):
    v = np.arange(24, dtype=np.float32).reshape((2, 3, 4))
    write_volume(VoxelGrid(v), tmp_path / "a.rvol")
    data = (tmp_path / "a.rvol").read_bytes()
    payload = np.frombuffer(data[43:], dtype="<f4")
    # second value on disk is voxel (1, 0, 0)
    assert payload[1] == v[1, 0, 0]
    assert payload[2] == v[0, 1, 0]
    np.testing.assert_array_equal(payload, v.ravel(order="F"))


def test_single_voxel_file_size(tmp_path):
    write_volume(Mask(np.ones((1, 1, 1), np.uint8)), tmp_path / "a.rvol")
    assert (tmp_path / "a.rvol").stat().st_size == 43 + 1
    write_volume(VoxelGrid(np.ones((1, 1, 1), np.float32)), tmp_path / "b.rvol")
    assert (tmp_path / "b.rvol").stat().st_size == 43 + 4


def test_identical_grids_identical_bytes(tmp_path, rng):
    v = rng.random((4, 4, 4)).astype(np.float32)
    write_volume(VoxelGrid(v), tmp_path / "a.rvol")
    write_volume(VoxelGrid(v.copy()), tmp_path / "b.rvol")
    assert (tmp_path / "a.rvol").read_bytes() == (tmp_path / "b.rvol").read_bytes()


def test_bad_magic(tmp_path):
    (tmp_path / "x.rvol").write_bytes(b"NOPE" + bytes(60))
    with pytest.raises(FormatError, match="magic"):
        read_volume(tmp_path / "x.rvol")


def test_truncated_payload(tmp_path):
    write_volume(VoxelGrid(np.zeros((3, 3, 3), np.float32)), tmp_path / "a.rvol")
    data = (tmp_path / "a.rvol").read_bytes()
    (tmp_path / "a.rvol").write_bytes(data[:-1])
    with pytest.raises(TruncationError):
        read_volume(tmp_path / "a.rvol")
    (tmp_path / "a.rvol").write_bytes(data + b"\0")
    with pytest.raises(TruncationError):
        read_volume(tmp_path / "a.rvol")


def test_truncated_header(tmp_path):
    (tmp_path / "a.rvol").write_bytes(b"RVOL1\0\x01\x02")
    with pytest.raises(FormatError, match="header"):
        read_volume(tmp_path / "a.rvol")


def test_unknown_dtype_and_bad_header_fields(tmp_path):
    bad = struct.pack("<6sB3I3d", b"RVOL1\0", 7, 1, 1, 1, 1.0, 1.0, 1.0) + b"\0"
    (tmp_path / "a.rvol").write_bytes(bad)
    with pytest.raises(FormatError, match="dtype"):
        read_volume(tmp_path / "a.rvol")
    zero = struct.pack("<6sB3I3d", b"RVOL1\0", 0, 0, 1, 1, 1.0, 1.0, 1.0)
    (tmp_path / "b.rvol").write_bytes(zero)
    with pytest.raises(FormatError, match="dims"):
        read_volume(tmp_path / "b.rvol")
    neg = struct.pack("<6sB3I3d", b"RVOL1\0", 0, 1, 1, 1, -1.0, 1.0, 1.0) + b"\0"
    (tmp_path / "c.rvol").write_bytes(neg)
    with pytest.raises(FormatError):
        read_volume(tmp_path / "c.rvol")


def test_mask_rejects_non_binary():
    with pytest.raises(ValidationError):
        Mask(np.full((2, 2, 2), 2, np.uint8))


def test_probability_map_range():
    with pytest.raises(ValidationError):
        ProbabilityMap(np.full((2, 2, 2), 1.5, np.float32))
    ProbabilityMap(np.full((2, 2, 2), 1.0, np.float32))


def test_grid_is_frozen():
    g = VoxelGrid(np.zeros((2, 2, 2), np.float32))
    with pytest.raises(ValueError):
        g.values[0, 0, 0] = 1.0


def test_rejects_bad_shapes_and_spacing():
    with pytest.raises(ValidationError):
        VoxelGrid(np.zeros((2, 2), np.float32))
    with pytest.raises(ValidationError):
        VoxelGrid(np.zeros((2, 2, 2), np.float32), (1.0, 0.0, 1.0))


def test_check_same_geometry():
    a = VoxelGrid(np.zeros((2, 2, 2), np.float32))
    b = VoxelGrid(np.zeros((2, 2, 3), np.float32))
    c = VoxelGrid(np.zeros((2, 2, 2), np.float32), (1.0, 1.0, 2.0))
    check_same_geometry(a, a)
    with pytest.raises(ValidationError, match="dims"):
        check_same_geometry(a, b)
    with pytest.raises(ValidationError, match="spacing"):
        check_same_geometry(a, c)


def test_positive_fraction():
    m1 = np.zeros((2, 2, 2), np.uint8)
    m1[0, 0, 0] = 1
    m2 = np.ones((2, 2, 2), np.uint8)
    assert positive_fraction([m1, m2]) == 9 / 16


def test_manifest_roundtrip(tmp_path):
    doc = {"split": "holdout", "cases": [
        {"id": "a", "image": "a_img.rvol", "gt": "a_gt.rvol"},
        {"id": "b", "image": "b_img.rvol", "gt": "b_gt.rvol", "prob": "b_p.rvol"},
    ]}
    m = DatasetManifest.from_dict(doc, tmp_path)
    m.save(tmp_path / "m.json")
    back = DatasetManifest.load(tmp_path / "m.json")
    assert back == m
    assert back.resolve("a_img.rvol") == tmp_path / "a_img.rvol"
    assert json.loads((tmp_path / "m.json").read_text()) == doc


def test_manifest_validation(tmp_path):
    with pytest.raises(ValidationError, match="split"):
        DatasetManifest.from_dict({"split": "test", "cases": []})
    with pytest.raises(ValidationError, match="duplicate"):
        DatasetManifest.from_dict({"split": "train", "cases": [
            {"id": "a", "image": "x", "gt": "y"}, {"id": "a", "image": "x", "gt": "y"}]})
    with pytest.raises(ValidationError, match="malformed"):
        DatasetManifest.from_dict({"split": "train", "cases": [{"id": "a"}]})
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ValidationError, match="JSON"):
        DatasetManifest.load(tmp_path / "bad.json")
