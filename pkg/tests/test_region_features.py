from __future__ import annotations

import numpy as np
import pytest

from objdiscover.geometry import Box
from objdiscover.proposals import Proposal, ProposalSet
from objdiscover.region_features import (
    RegionDescriptor,
    build_region_descriptors,
    cosine,
    load_descriptor_cache,
    roi_pool,
    save_descriptor_cache,
)
from objdiscover.tensor_store import FeatureTensor


def tensor_from(values) -> FeatureTensor:
    return FeatureTensor.from_array(np.asarray(values, dtype=np.float32))


def test_single_cell_box_replicates(rng):
    vals = rng.normal(size=(8, 8, 5)).astype(np.float32)
    # Box covering exactly grid cell (2, 3) on an 80x80 image with an 8x8 grid.
    box = Box(30, 20, 40, 30)
    desc = roi_pool(tensor_from(vals), box, (80, 80), pool_grid=2)
    expected = np.tile(vals[2, 3], 4)
    np.testing.assert_array_equal(desc.vector, expected)


def test_constant_tensor_constant_descriptor():
    vals = np.tile(np.array([1.0, -2.0, 0.5], dtype=np.float32), (6, 6, 1))
    desc = roi_pool(tensor_from(vals), Box(0, 0, 60, 60), (60, 60), pool_grid=3)
    np.testing.assert_array_equal(desc.vector.reshape(9, 3), np.tile([1.0, -2.0, 0.5], (9, 1)))


def test_full_image_box_matches_naive_oracle(rng):
    h, w, d, grid = 9, 7, 6, 3
    vals = rng.normal(size=(h, w, d)).astype(np.float32)
    desc = roi_pool(tensor_from(vals), Box(0, 0, 70, 90), (70, 90), pool_grid=grid)
    # Naive loop: split rows/cols into floor-spaced bins, max within each.
    expected = []
    for a in range(grid):
        r_lo, r_hi = (a * h) // grid, ((a + 1) * h) // grid
        for b in range(grid):
            c_lo, c_hi = (b * w) // grid, ((b + 1) * w) // grid
            block = vals[r_lo:r_hi, c_lo:c_hi]
            expected.append(block.reshape(-1, d).max(axis=0))
    np.testing.assert_array_equal(desc.vector, np.concatenate(expected))


def test_positive_scaling_commutes(rng):
    vals = rng.normal(size=(10, 10, 4)).astype(np.float32)
    box = Box(5, 5, 77, 64)
    base = roi_pool(tensor_from(vals), box, (100, 100))
    scaled = roi_pool(tensor_from(2.5 * vals), box, (100, 100))
    np.testing.assert_allclose(scaled.vector, 2.5 * base.vector, rtol=1e-5)


def test_clamping_is_noop_for_valid_boxes(rng):
    vals = rng.normal(size=(6, 6, 3)).astype(np.float32)
    inside = roi_pool(tensor_from(vals), Box(10, 10, 50, 50), (60, 60))
    np.testing.assert_array_equal(
        inside.vector, roi_pool(tensor_from(vals), Box(10, 10, 50, 50), (60, 60)).vector
    )


def test_tiny_box_never_empty(rng):
    vals = rng.normal(size=(8, 8, 3)).astype(np.float32)
    desc = roi_pool(tensor_from(vals), Box(41, 41, 43, 43), (80, 80), pool_grid=3)
    # Sub-cell box borrows the cell containing its center, replicated 9 times.
    np.testing.assert_array_equal(desc.vector, np.tile(vals[4, 4], 9))


def test_cosine_self_and_orthogonal():
    a = RegionDescriptor.from_vector(np.array([1.0, 2.0, 3.0]))
    b = RegionDescriptor.from_vector(np.array([0.0, 0.0, 0.0]))
    c = RegionDescriptor.from_vector(np.array([-2.0, 1.0, 0.0]))
    assert cosine(a, a) == pytest.approx(1.0, abs=1e-12)
    assert cosine(a, b) == 0.0
    assert cosine(a, c) == pytest.approx(0.0, abs=1e-12)


def test_cosine_matches_extended_precision(rng):
    import mpmath

    for _ in range(50):
        u = rng.normal(size=24).astype(np.float32)
        v = rng.normal(size=24).astype(np.float32)
        got = cosine(RegionDescriptor.from_vector(u), RegionDescriptor.from_vector(v))
        with mpmath.workdps(50):
            uu = [mpmath.mpf(float(x)) for x in u]
            vv = [mpmath.mpf(float(x)) for x in v]
            dot = mpmath.fsum(a * b for a, b in zip(uu, vv))
            expected = dot / (mpmath.sqrt(mpmath.fsum(a * a for a in uu)) *
                              mpmath.sqrt(mpmath.fsum(b * b for b in vv)))
        assert got == pytest.approx(float(expected), abs=1e-6)
        assert -1.0 - 1e-9 <= got <= 1.0 + 1e-9


def test_normalized_descriptor(rng):
    d = RegionDescriptor.from_vector(rng.normal(size=10).astype(np.float32))
    n = d.normalized()
    assert n.norm == pytest.approx(1.0, rel=1e-5)
    assert d.norm == pytest.approx(float(np.linalg.norm(d.vector.astype(np.float64))), rel=1e-5)


def test_build_descriptors_and_cache(tmp_path, rng):
    vals = np.abs(rng.normal(size=(8, 8, 4))).astype(np.float32)
    pset = ProposalSet(
        image_id="img",
        proposals=[
            Proposal(Box(0, 0, 40, 40), 0, "feat", 0),
            Proposal(Box(20, 20, 80, 80), 1, "feat", 0),
        ],
        group_count=2,
    )
    descs = build_region_descriptors(tensor_from(vals), pset, (80, 80), pool_grid=2)
    assert len(descs) == 2
    assert all(d.norm == pytest.approx(1.0, rel=1e-4) for d in descs)
    assert descs[0].image_id == "img" and descs[1].proposal_index == 1
    save_descriptor_cache(descs, tmp_path / "cache.npy")
    back = load_descriptor_cache(tmp_path / "cache.npy", "img")
    assert len(back) == 2
    np.testing.assert_array_equal(back[1].vector, descs[1].vector)
