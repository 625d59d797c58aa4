from collections import deque
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from skimage import measure

from lesionkit.exceptions import ValidationError
from lesionkit.labeling import binarize, label_components
from lesionkit.volgrid import Mask, ProbabilityMap

from .conftest import random_blob_mask

OFFSETS = {
    6: [d for d in product((-1, 0, 1), repeat=3) if sum(map(abs, d)) == 1],
    26: [d for d in product((-1, 0, 1), repeat=3) if d != (0, 0, 0)],
}


def bfs_labels(mask, connectivity):
    """Flood fill in x-fastest scan order; labels numbered by first voxel met."""
    nx, ny, nz = mask.shape
    labels = np.zeros(mask.shape, dtype=np.int64)
    k = 0
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                if not mask[x, y, z] or labels[x, y, z]:
                    continue
                k += 1
                labels[x, y, z] = k
                todo = deque([(x, y, z)])
                while todo:
                    cx, cy, cz = todo.popleft()
                    for dx, dy, dz in OFFSETS[connectivity]:
                        q = (cx + dx, cy + dy, cz + dz)
                        if all(0 <= q[i] < mask.shape[i] for i in range(3)) and mask[q] and not labels[q]:
                            labels[q] = k
                            todo.append(q)
    return labels, k


@pytest.mark.parametrize("connectivity", [6, 26])
def test_matches_bfs_oracle(connectivity):
    rng = np.random.default_rng(connectivity)
    for _ in range(20):
        shape = tuple(rng.integers(3, 12, size=3))
        mask = (rng.random(shape) < rng.uniform(0.05, 0.5)).astype(np.uint8)
        lm = label_components(mask, connectivity)
        ref, k = bfs_labels(mask, connectivity)
        assert lm.n_components == k
        np.testing.assert_array_equal(lm.labels, ref)
        assert lm.sizes.sum() == mask.size
        np.testing.assert_array_equal(lm.sizes, np.bincount(ref.ravel(), minlength=k + 1))


@pytest.mark.parametrize("connectivity,sk_conn", [(6, 1), (26, 3)])
def test_component_partition_matches_skimage(connectivity, sk_conn):
    rng = np.random.default_rng(7)
    for _ in range(10):
        mask = random_blob_mask(rng, (20, 18, 16), density=0.1, smooth=0.7)
        ours = label_components(mask, connectivity).labels
        theirs = measure.label(mask, connectivity=sk_conn)
        assert ours.max() == theirs.max()
        # same partition: the label pairs form a bijection
        pairs = np.unique(np.stack([ours.ravel(), theirs.ravel()]), axis=1)
        assert pairs.shape[1] == ours.max() + 1


def test_diagonal_neighbours():
    m = np.zeros((3, 3, 3), np.uint8)
    m[0, 0, 0] = m[1, 1, 1] = 1
    assert label_components(m, 26).n_components == 1
    assert label_components(m, 6).n_components == 2
    m2 = np.zeros((3, 3, 3), np.uint8)
    m2[0, 0, 0] = m2[1, 1, 0] = 1
    assert label_components(m2, 26).n_components == 1
    assert label_components(m2, 6).n_components == 2


def test_empty_and_full():
    lm = label_components(np.zeros((4, 4, 4), np.uint8))
    assert lm.n_components == 0 and lm.sizes.tolist() == [64]
    lm = label_components(np.ones((4, 4, 4), np.uint8))
    assert lm.n_components == 1 and lm.sizes.tolist() == [0, 64]


def test_scan_order_numbering():
    m = np.zeros((5, 5, 1), np.uint8)
    m[4, 0, 0] = 1   # first in x-fastest order
    m[0, 2, 0] = 1
    m[2, 4, 0] = 1
    lm = label_components(m)
    assert lm.labels[4, 0, 0] == 1
    assert lm.labels[0, 2, 0] == 2
    assert lm.labels[2, 4, 0] == 3


def test_spacing_carried_over_and_bad_connectivity():
    m = Mask(np.ones((2, 2, 2), np.uint8), (0.5, 0.5, 2.0))
    lm = label_components(m)
    assert lm.spacing == (0.5, 0.5, 2.0) and lm.voxel_volume == 0.5
    with pytest.raises(ValidationError):
        label_components(m, 18)


def test_binarize_is_strict():
    v = np.array([0.49, 0.5, 0.5000001, 1.0], np.float32).reshape(4, 1, 1)
    out = binarize(ProbabilityMap(v)).values.ravel().tolist()
    assert out == [0, 0, 1, 1]
    with pytest.raises(ValidationError):
        binarize(ProbabilityMap(v), 1.5)


@settings(max_examples=60, deadline=None)
@given(arrays(np.uint8, st.tuples(*[st.integers(1, 6)] * 3), elements=st.integers(0, 1)),
       st.sampled_from([6, 26]))
def test_label_properties(mask, connectivity):
    lm = label_components(mask, connectivity)
    # every positive voxel labelled, background untouched
    assert np.array_equal(lm.labels > 0, mask > 0)
    assert lm.sizes.sum() == mask.size
    assert np.all(lm.sizes[1:] > 0)
    # 26-connectivity never splits more than 6-connectivity
    assert label_components(mask, 26).n_components <= label_components(mask, 6).n_components
    # labels are a deterministic function of the mask
    assert np.array_equal(label_components(mask.copy(), connectivity).labels, lm.labels)
