import numpy as np
import pytest

from vidattack.partition import PartitionSpec, build_basis, project_onto_basis, rectify
from vidattack.tensor import Shape


def test_uniform_patch_counts_and_supports():
    h = np.ones((2, 32, 32, 3), dtype=np.float32)
    basis = build_basis(h, PartitionSpec.uniform(8, 8))
    assert basis.M == 2 * 64
    counts = np.diff(basis.ptr)
    assert np.all(counts == 4 * 4 * 3)
    # constant tentative: every stored value is 1/sqrt(48)
    assert np.allclose(basis.values, 1.0 / np.sqrt(48.0))


def test_uniform_remainder_rule():
    h = np.ones((1, 10, 8, 1), dtype=np.float32)
    basis = build_basis(h, PartitionSpec.uniform(4, 2))
    counts = np.diff(basis.ptr).reshape(4, 2)
    # last row of blocks absorbs the two remainder rows: 4 rows tall instead of 2
    assert counts[:3].flatten().tolist() == [2 * 4] * 6
    assert counts[3].tolist() == [4 * 4, 4 * 4]


def test_random_partition_seeded_and_covering():
    h = np.ones((1, 6, 6, 2), dtype=np.float32)
    spec = PartitionSpec.random(7)
    b1 = build_basis(h, spec, np.random.default_rng(42))
    b2 = build_basis(h, spec, np.random.default_rng(42))
    assert np.array_equal(b1.indices, b2.indices)
    assert np.array_equal(b1.ptr, b2.ptr)
    covered = np.sort(b1.indices)
    assert np.array_equal(covered, np.arange(h.size))
    b3 = build_basis(h, spec, np.random.default_rng(43))
    assert not np.array_equal(b1.indices, b3.indices)


def test_random_partition_requires_rng():
    h = np.ones((1, 4, 4, 1), dtype=np.float32)
    with pytest.raises(ValueError):
        build_basis(h, PartitionSpec.random(4))


def test_per_pixel_identity_basis():
    rng = np.random.default_rng(0)
    h = np.ones((1, 4, 4, 2), dtype=np.float32)
    basis = build_basis(h, PartitionSpec.per_pixel())
    assert basis.M == h.size
    g = rng.normal(size=h.shape)
    weights, proj = project_onto_basis(g, basis)
    assert np.allclose(proj, g, atol=1e-12)
    assert np.allclose(weights, g.ravel())


def test_zero_entries_excluded_and_degenerate_patches_kept():
    h = np.ones((1, 8, 8, 1), dtype=np.float32)
    h[0, :4, :4, 0] = 0.0  # first block entirely zero
    basis = build_basis(h, PartitionSpec.uniform(2, 2))
    assert basis.M == 4
    assert basis.degenerate.tolist() == [True, False, False, False]
    assert basis.ptr[1] - basis.ptr[0] == 0
    # degenerate patches contribute nothing to rectification or projection
    out = rectify(np.ones(4), basis)
    assert np.all(out[0, :4, :4, 0] == 0.0)
    w, _ = project_onto_basis(np.ones(h.shape), basis)
    assert w[0] == 0.0


def test_rectify_one_hot_zero_linearity():
    rng = np.random.default_rng(1)
    h = rng.normal(size=(2, 8, 8, 1)).astype(np.float32)
    basis = build_basis(h, PartitionSpec.uniform(2, 2))
    one_hot = np.zeros(basis.M)
    one_hot[3] = 1.0
    assert np.allclose(rectify(one_hot, basis), basis.dense_direction(3))
    assert np.all(rectify(np.zeros(basis.M), basis) == 0.0)
    v1 = rng.normal(size=basis.M)
    v2 = rng.normal(size=basis.M)
    combined = rectify(2.0 * v1 - 3.0 * v2, basis)
    split = 2.0 * rectify(v1, basis) - 3.0 * rectify(v2, basis)
    assert np.allclose(combined, split, atol=1e-6)


def test_rectify_length_mismatch():
    h = np.ones((1, 4, 4, 1), dtype=np.float32)
    basis = build_basis(h, PartitionSpec.uniform(2, 2))
    with pytest.raises(ValueError):
        rectify(np.zeros(basis.M + 1), basis)


def test_orthonormality():
    rng = np.random.default_rng(2)
    h = np.sign(rng.normal(size=(2, 12, 12, 3))).astype(np.float32)
    for spec in (PartitionSpec.uniform(3, 4), PartitionSpec.random(17), PartitionSpec.per_pixel()):
        basis = build_basis(h, spec, np.random.default_rng(9))
        # disjoint supports make cross terms exactly zero
        assert len(np.unique(basis.indices)) == len(basis.indices)
        norms = np.sqrt(np.bincount(basis.patch_of_index,
                                    weights=basis.values ** 2, minlength=basis.M))
        live = ~basis.degenerate
        assert np.all(np.abs(norms[live] - 1.0) <= 1e-6)
        assert np.all(norms[~live] == 0.0)


def test_projection_reproduces_in_span_vectors():
    rng = np.random.default_rng(3)
    h = rng.normal(size=(1, 8, 8, 2)).astype(np.float32)
    basis = build_basis(h, PartitionSpec.uniform(4, 4))
    v = rng.normal(size=basis.M)
    g = rectify(v, basis)
    w, proj = project_onto_basis(g, basis)
    assert np.linalg.norm(proj - g) <= 1e-5
    assert np.allclose(w, v, atol=1e-6)


def test_projection_is_closest_point():
    rng = np.random.default_rng(4)
    h = np.sign(rng.normal(size=(1, 8, 8, 2))).astype(np.float32)
    basis = build_basis(h, PartitionSpec.uniform(2, 2))
    g = rng.normal(size=h.shape)
    _, proj = project_onto_basis(g, basis)
    best = np.linalg.norm((g - proj).ravel())
    for _ in range(100):
        w = rng.normal(size=basis.M)
        other = np.linalg.norm((g - rectify(w, basis)).ravel())
        assert best <= other + 1e-9


def test_projection_null_on_degenerate_support():
    h = np.zeros((1, 4, 4, 1), dtype=np.float32)
    h[0, 0, 0, 0] = 1.0
    basis = build_basis(h, PartitionSpec.uniform(2, 2))
    g = np.zeros(h.shape)
    g[0, 3, 3, 0] = 5.0  # supported only where tentative is zero
    w, proj = project_onto_basis(g, basis)
    assert np.all(proj == 0.0)
    assert np.all(w == 0.0)


def test_patch_ordering_frame_major():
    shape = Shape(2, 4, 4, 1)
    h = np.ones(shape.as_tuple(), dtype=np.float32)
    basis = build_basis(h, PartitionSpec.uniform(2, 2))
    # patch 0 must sit in frame 0, top-left block
    idx0, _ = basis.patch_support(0)
    assert np.all(idx0 < shape.frame_size)
    unravel = np.unravel_index(idx0, shape.as_tuple())
    assert np.all(unravel[1] < 2) and np.all(unravel[2] < 2)
    # patch M/2 is the first patch of frame 1
    idx_mid, _ = basis.patch_support(basis.M // 2)
    assert np.all(idx_mid >= shape.frame_size)
