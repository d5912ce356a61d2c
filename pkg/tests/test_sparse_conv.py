import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxdet.engine import Tape, Tensor, gradient_check, tsum
from voxdet.sparse_conv import (
    STRIDED,
    SUBMANIFOLD,
    build_rulebook,
    from_dense,
    sparse_conv,
    sparse_conv_forward,
    squeeze_height,
    to_dense,
)
from voxdet.voxelizer import SparseVoxelTensor
from oracles import dense_conv3d


def make_sparse(coords, feats, shape):
    return SparseVoxelTensor(np.asarray(coords), Tensor(np.asarray(feats, dtype=np.float64)), shape)


def densify(sp):
    """(C, nx, ny, nz) volume indexed like the coords, for the dense oracle."""
    c = sp.num_channels
    vol = np.zeros((c,) + tuple(sp.spatial_shape))
    for coord, f in zip(sp.coords, sp.features.data):
        vol[:, coord[0], coord[1], coord[2]] = f
    return vol


def random_pattern(rng, n, shape):
    total = shape[0] * shape[1] * shape[2]
    flat = rng.choice(total, size=min(n, total), replace=False)
    nx, ny, nz = shape
    coords = np.column_stack([flat // (ny * nz), (flat // nz) % ny, flat % nz])
    keys = (coords[:, 0] * ny + coords[:, 1]) * nz + coords[:, 2]
    return coords[np.argsort(keys)]


# ---------------------------------------------------------------------------
# rulebook construction


def test_single_voxel_submanifold():
    rb = build_rulebook(np.array([[2, 2, 1]]), (5, 5, 3), 3)
    assert len(rb.out_coords) == 1
    assert rb.num_pairs == 1  # only the center tap lands on an active site
    center = 13  # tap (1,1,1) in 3x3x3 nested order
    assert len(rb.taps[center][0]) == 1


def test_two_adjacent_voxels_submanifold():
    rb = build_rulebook(np.array([[1, 1, 1], [2, 1, 1]]), (5, 5, 3), 3)
    assert len(rb.out_coords) == 2
    assert rb.num_pairs == 4  # two center taps plus one cross pair each way


def test_submanifold_output_coords_equal_input():
    rng = np.random.default_rng(0)
    coords = random_pattern(rng, 30, (8, 8, 4))
    rb = build_rulebook(coords, (8, 8, 4), 3)
    np.testing.assert_array_equal(rb.out_coords, coords)
    assert rb.num_pairs <= len(coords) * 27


def test_rulebook_errors():
    coords = np.array([[0, 0, 0]])
    with pytest.raises(ValueError, match="odd"):
        build_rulebook(coords, (4, 4, 4), 2, mode=SUBMANIFOLD)
    with pytest.raises(ValueError, match="stride"):
        build_rulebook(coords, (4, 4, 4), 3, stride=0, mode=STRIDED)
    with pytest.raises(ValueError, match="stride 1"):
        build_rulebook(coords, (4, 4, 4), 3, stride=2, mode=SUBMANIFOLD)
    with pytest.raises(ValueError, match="mode"):
        build_rulebook(coords, (4, 4, 4), 3, mode="banana")


def test_strided_support_matches_occupancy_oracle():
    rng = np.random.default_rng(1)
    shape = (8, 8, 4)
    coords = random_pattern(rng, 30, shape)
    rb = build_rulebook(coords, shape, 3, stride=2, mode=STRIDED)
    occ = np.zeros((1,) + shape)
    occ[0, coords[:, 0], coords[:, 1], coords[:, 2]] = 1.0
    support = dense_conv3d(occ, np.ones((1, 1, 3, 3, 3)), None, (2, 2, 2), (1, 1, 1))[0]
    want = np.argwhere(support > 0)
    got = {tuple(c) for c in rb.out_coords}
    assert got == {tuple(c) for c in want}
    assert rb.out_spatial_shape == (4, 4, 2)


# ---------------------------------------------------------------------------
# forward semantics


def test_identity_center_tap():
    rng = np.random.default_rng(2)
    shape = (6, 6, 3)
    coords = random_pattern(rng, 12, shape)
    sp = make_sparse(coords, rng.uniform(-1, 1, (12, 4)), shape)
    rb = build_rulebook(coords, shape, 3)
    w = np.zeros((4, 4, 3, 3, 3))
    for c in range(4):
        w[c, c, 1, 1, 1] = 1.0
    out = sparse_conv(sp, Tensor(w), None, rb)
    np.testing.assert_array_equal(out.features.data, sp.features.data)
    np.testing.assert_array_equal(out.coords, sp.coords)


def test_zero_weight_gives_bias():
    rng = np.random.default_rng(3)
    shape = (6, 6, 3)
    coords = random_pattern(rng, 9, shape)
    sp = make_sparse(coords, rng.uniform(-1, 1, (9, 2)), shape)
    rb = build_rulebook(coords, shape, 3)
    bias = np.array([0.5, -1.25])
    out = sparse_conv(sp, Tensor(np.zeros((2, 2, 3, 3, 3))), Tensor(bias), rb)
    np.testing.assert_array_equal(out.features.data, np.tile(bias, (9, 1)))


@pytest.mark.parametrize("kernel", [1, 3])
def test_submanifold_matches_dense_oracle(kernel):
    rng = np.random.default_rng(4)
    shape = (7, 6, 4)
    coords = random_pattern(rng, 25, shape)
    feats = rng.uniform(-1, 1, (25, 3))
    sp = make_sparse(coords, feats, shape)
    rb = build_rulebook(coords, shape, kernel)
    w = rng.uniform(-1, 1, (5, 3, kernel, kernel, kernel))
    b = rng.uniform(-1, 1, 5)
    out = sparse_conv(sp, Tensor(w), Tensor(b), rb)
    p = kernel // 2
    dense = dense_conv3d(densify(sp), w, b, (1, 1, 1), (p, p, p))
    for coord, f in zip(out.coords, out.features.data):
        np.testing.assert_allclose(f, dense[:, coord[0], coord[1], coord[2]], atol=1e-12)


def test_strided_matches_dense_oracle():
    rng = np.random.default_rng(5)
    shape = (8, 8, 4)
    coords = random_pattern(rng, 30, shape)
    feats = rng.uniform(-1, 1, (30, 2))
    sp = make_sparse(coords, feats, shape)
    rb = build_rulebook(coords, shape, 3, stride=2, mode=STRIDED)
    w = rng.uniform(-1, 1, (4, 2, 3, 3, 3))
    b = rng.uniform(-1, 1, 4)
    out = sparse_conv(sp, Tensor(w), Tensor(b), rb)
    dense = dense_conv3d(densify(sp), w, b, (2, 2, 2), (1, 1, 1))
    for coord, f in zip(out.coords, out.features.data):
        np.testing.assert_allclose(f, dense[:, coord[0], coord[1], coord[2]], atol=1e-12)


def test_z_collapse_configuration():
    # kernel (1,1,3), stride (1,1,2), no padding: the height-flattening layer
    rng = np.random.default_rng(6)
    shape = (4, 4, 5)
    coords = random_pattern(rng, 20, shape)
    feats = rng.uniform(-1, 1, (20, 2))
    sp = make_sparse(coords, feats, shape)
    rb = build_rulebook(coords, shape, (1, 1, 3), stride=(1, 1, 2), padding=(0, 0, 0), mode=STRIDED)
    assert rb.out_spatial_shape == (4, 4, 2)
    w = rng.uniform(-1, 1, (3, 2, 1, 1, 3))
    out = sparse_conv(sp, Tensor(w), None, rb)
    dense = dense_conv3d(densify(sp), w, None, (1, 1, 2), (0, 0, 0))
    for coord, f in zip(out.coords, out.features.data):
        np.testing.assert_allclose(f, dense[:, coord[0], coord[1], coord[2]], atol=1e-12)


def test_linearity_without_bias():
    rng = np.random.default_rng(7)
    shape = (6, 6, 3)
    coords = random_pattern(rng, 10, shape)
    fx = rng.uniform(-1, 1, (10, 3))
    fy = rng.uniform(-1, 1, (10, 3))
    rb = build_rulebook(coords, shape, 3)
    w = Tensor(rng.uniform(-1, 1, (2, 3, 3, 3, 3)))
    a, b = 2.5, -1.25
    out_combo = sparse_conv_forward(Tensor(a * fx + b * fy), w, None, rb)
    out_x = sparse_conv_forward(Tensor(fx), w, None, rb)
    out_y = sparse_conv_forward(Tensor(fy), w, None, rb)
    np.testing.assert_allclose(out_combo.data, a * out_x.data + b * out_y.data, atol=1e-12)


def test_empty_input_flows_through():
    rb = build_rulebook(np.zeros((0, 3)), (4, 4, 4), 3, stride=2, mode=STRIDED)
    out = sparse_conv_forward(Tensor(np.zeros((0, 2))), Tensor(np.zeros((3, 2, 3, 3, 3))),
                              Tensor(np.zeros(3)), rb)
    assert out.data.shape == (0, 3)
    sp = make_sparse(np.zeros((0, 3)), np.zeros((0, 2)), (4, 4, 4))
    dense = to_dense(sp)
    assert dense.data.shape == (2, 4, 4, 4)
    assert not dense.data.any()


def test_forward_errors():
    coords = np.array([[1, 1, 1]])
    rb = build_rulebook(coords, (4, 4, 4), 3)
    with pytest.raises(ValueError, match="channel mismatch"):
        sparse_conv_forward(Tensor(np.zeros((1, 3))), Tensor(np.zeros((2, 4, 3, 3, 3))), None, rb)
    with pytest.raises(ValueError, match="kernel"):
        sparse_conv_forward(Tensor(np.zeros((1, 3))), Tensor(np.zeros((2, 3, 1, 1, 1))), None, rb)
    with pytest.raises(ValueError, match="rulebook built for"):
        sparse_conv_forward(Tensor(np.zeros((5, 3))), Tensor(np.zeros((2, 3, 3, 3, 3))), None, rb)


# ---------------------------------------------------------------------------
# backward


def test_single_pair_chain_rule():
    coords = np.array([[1, 1, 1]])
    rb = build_rulebook(coords, (4, 4, 4), 1)
    feat = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
    w = Tensor(np.arange(6.0).reshape(3, 2, 1, 1, 1), requires_grad=True)
    with Tape() as tape:
        out = sparse_conv_forward(feat, w, None, rb)
        g = np.array([[1.0, -2.0, 0.5]])
        tape.backward(out, seed=g)
    np.testing.assert_allclose(feat.grad, g @ w.data.reshape(3, 2))
    np.testing.assert_allclose(w.grad.reshape(3, 2), g.T @ feat.data)


def test_zero_grad_out_gives_zero_grads():
    rng = np.random.default_rng(8)
    shape = (6, 6, 3)
    coords = random_pattern(rng, 8, shape)
    feat = Tensor(rng.uniform(-1, 1, (8, 2)), requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, (2, 2, 3, 3, 3)), requires_grad=True)
    rb = build_rulebook(coords, shape, 3)
    with Tape() as tape:
        out = sparse_conv_forward(feat, w, None, rb)
        tape.backward(out, seed=np.zeros_like(out.data))
    assert not feat.grad.any()
    assert not w.grad.any()


@pytest.mark.parametrize("mode,stride", [(SUBMANIFOLD, 1), (STRIDED, 2)])
def test_backward_gradient_check(mode, stride):
    rng = np.random.default_rng(9)
    shape = (6, 6, 4)
    coords = random_pattern(rng, 10, shape)
    rb = build_rulebook(coords, shape, 3, stride=stride, mode=mode)
    feat = Tensor(rng.uniform(-1, 1, (10, 2)), requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, (2, 2, 3, 3, 3)), requires_grad=True)
    b = Tensor(rng.uniform(-1, 1, 2), requires_grad=True)

    def f(feat, w, b):
        out = sparse_conv_forward(feat, w, b, rb)
        return tsum(out * out)

    assert gradient_check(f, [feat, w, b]) < 1e-5


# ---------------------------------------------------------------------------
# densify / squeeze


def test_to_dense_and_roundtrip():
    rng = np.random.default_rng(10)
    shape = (5, 4, 3)
    coords = random_pattern(rng, 9, shape)
    feats = rng.uniform(0.5, 1.0, (9, 2))  # nonzero so occupancy is detectable
    sp = make_sparse(coords, feats, shape)
    dense = to_dense(sp)
    assert dense.data.shape == (2, 3, 4, 5)  # (C, Z, Y, X)
    for coord, f in zip(coords, feats):
        np.testing.assert_array_equal(dense.data[:, coord[2], coord[1], coord[0]], f)
    assert np.count_nonzero(dense.data) == 9 * 2
    back_coords, back_feats = from_dense(dense.data)
    np.testing.assert_array_equal(back_coords, coords)
    np.testing.assert_allclose(back_feats, feats)


def test_to_dense_gradient_flows():
    rng = np.random.default_rng(11)
    shape = (4, 4, 2)
    coords = random_pattern(rng, 5, shape)
    feat = Tensor(rng.uniform(0.1, 1, (5, 2)), requires_grad=True)

    def f(feat):
        sp = SparseVoxelTensor(coords, feat, shape)
        d = to_dense(sp)
        return tsum(d * d)

    assert gradient_check(f, [feat]) < 1e-6


def test_squeeze_height_z1_identity():
    x = Tensor(np.random.default_rng(12).uniform(-1, 1, (3, 1, 4, 5)))
    out = squeeze_height(x)
    np.testing.assert_array_equal(out.data, x.data[:, 0])


def test_squeeze_height_channel_order():
    x = np.zeros((2, 2, 2, 2))
    for c in range(2):
        for z in range(2):
            x[c, z] = 10 * c + z
    out = squeeze_height(Tensor(x))
    assert out.data.shape == (4, 2, 2)
    np.testing.assert_array_equal(out.data[:, 0, 0], [0, 1, 10, 11])


def test_squeeze_height_exhaustive_bijection():
    rng = np.random.default_rng(13)
    x = rng.uniform(-1, 1, (3, 2, 4, 5))
    out = squeeze_height(Tensor(x)).data
    for c in range(3):
        for z in range(2):
            for y in range(4):
                for xx in range(5):
                    assert out[c * 2 + z, y, xx] == x[c, z, y, xx]


@settings(max_examples=20, deadline=None, derandomize=True)
@given(n=st.integers(1, 40), seed=st.integers(0, 1000), k=st.sampled_from([1, 3]))
def test_pair_count_bound_property(n, seed, k):
    rng = np.random.default_rng(seed)
    shape = (7, 7, 4)
    coords = random_pattern(rng, n, shape)
    rb = build_rulebook(coords, shape, k)
    assert rb.num_pairs <= len(coords) * k ** 3
    # center tap always pairs every site with itself
    assert rb.num_pairs >= len(coords)
