import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fmocc.autodiff import Tensor, grad_check, ops
from fmocc.errors import ContractError, DimensionError
from fmocc.tpv import LabelEmbedding, TpvTriplet, encode_labels, tpv_aggregate, tpv_reduce


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# --- label encoding -----------------------------------------------------------------


def test_zero_table_gives_minus_three_quarters():
    emb = LabelEmbedding(4, 3, scale=1.0)
    emb.table.data = np.zeros((4, 3))
    out = encode_labels(np.array([[[0, 3]]]), emb).data
    assert np.all(out == -0.75)


def test_encode_matches_scalar_loop():
    emb = LabelEmbedding(5, 4, seed=3, scale=2.0)
    labels = np.random.default_rng(0).integers(0, 5, (3, 3, 2))
    out = encode_labels(labels, emb).data
    table = emb.table.data
    for idx in np.ndindex(labels.shape):
        for c in range(4):
            s = 1.0 / (1.0 + math.exp(-table[labels[idx], c]))
            assert abs(out[idx + (c,)] - (s * s - 1.0) * 2.0) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
def test_encode_range(seed, scale):
    # table entries in [-15, 600]: the range where (-scale, 0) is representable in float64
    emb = LabelEmbedding(3, 4, seed=seed, scale=scale)
    emb.table.data = np.random.default_rng(seed).uniform(-15, 600, (3, 4))
    out = encode_labels(np.arange(3).reshape(3, 1, 1), emb).data
    assert np.all(out < 0) and np.all(out > -scale)


@pytest.mark.parametrize("bad", [-1, 4])
def test_encode_label_out_of_range(bad):
    with pytest.raises(ContractError):
        encode_labels(np.array([[[0, bad]]]), LabelEmbedding(4, 2))


def test_non_positive_scale_rejected():
    with pytest.raises(ContractError):
        LabelEmbedding(3, 2, scale=0.0)


def test_frozen_embedding_has_no_parameters():
    assert LabelEmbedding(3, 2, trainable=False).parameters() == []
    assert len(LabelEmbedding(3, 2, trainable=True).parameters()) == 1


def test_encode_gradient():
    emb = LabelEmbedding(4, 3, seed=1, scale=1.5)
    labels = np.random.default_rng(1).integers(0, 4, (3, 2, 2))
    R = np.random.default_rng(2).standard_normal((3, 2, 2, 3))
    assert grad_check(lambda: ops.sum(ops.mul(encode_labels(labels, emb), R)),
                      [emb.table]) < 1e-6


# --- reduce / aggregate -----------------------------------------------------------------


def test_reduce_constant_grid():
    T = tpv_reduce(np.full((3, 4, 2, 5), 1.25))
    for p in T.planes():
        assert np.all(p.data == 1.25)
    assert T.plane_xy.shape == (3, 4, 5)
    assert T.plane_yz.shape == (4, 2, 5)
    assert T.plane_zx.shape == (2, 3, 5)


def test_reduce_single_spike():
    X, Y, Z = 4, 3, 2
    V = np.zeros((X, Y, Z, 1))
    i, j, k, v = 2, 1, 1, 6.0
    V[i, j, k, 0] = v
    T = tpv_reduce(V)
    exp_xy = np.zeros((X, Y, 1))
    exp_xy[i, j] = v / Z
    exp_yz = np.zeros((Y, Z, 1))
    exp_yz[j, k] = v / X
    exp_zx = np.zeros((Z, X, 1))
    exp_zx[k, i] = v / Y
    np.testing.assert_allclose(T.plane_xy.data, exp_xy, atol=1e-15)
    np.testing.assert_allclose(T.plane_yz.data, exp_yz, atol=1e-15)
    np.testing.assert_allclose(T.plane_zx.data, exp_zx, atol=1e-15)


def test_reduce_against_triple_loop():
    V = np.random.default_rng(3).standard_normal((5, 4, 3, 2))
    X, Y, Z, C = V.shape
    xy = np.zeros((X, Y, C))
    yz = np.zeros((Y, Z, C))
    zx = np.zeros((Z, X, C))
    for x in range(X):
        for y in range(Y):
            for z in range(Z):
                xy[x, y] += V[x, y, z] / Z
                yz[y, z] += V[x, y, z] / X
                zx[z, x] += V[x, y, z] / Y
    T = tpv_reduce(V)
    np.testing.assert_allclose(T.plane_xy.data, xy, atol=1e-12)
    np.testing.assert_allclose(T.plane_yz.data, yz, atol=1e-12)
    np.testing.assert_allclose(T.plane_zx.data, zx, atol=1e-12)


def planes(rng, X, Y, Z, C, lead=()):
    return (rng.standard_normal(lead + (X, Y, C)), rng.standard_normal(lead + (Y, Z, C)),
            rng.standard_normal(lead + (Z, X, C)))


def test_aggregate_constant_planes():
    T = TpvTriplet(*(Tensor(np.full(s, 2.0)) for s in [(4, 3, 2), (3, 2, 2), (2, 4, 2)]))
    assert np.all(tpv_aggregate(T).data == 6.0)


def test_aggregate_single_plane_broadcasts():
    rng = np.random.default_rng(4)
    xy = rng.standard_normal((4, 3, 2))
    T = TpvTriplet(Tensor(xy), Tensor(np.zeros((3, 5, 2))), Tensor(np.zeros((5, 4, 2))))
    V = tpv_aggregate(T).data
    for z in range(5):
        assert np.array_equal(V[:, :, z], xy)


def test_aggregate_against_triple_loop():
    rng = np.random.default_rng(5)
    xy, yz, zx = planes(rng, 4, 3, 2, 3)
    V = tpv_aggregate(TpvTriplet(Tensor(xy), Tensor(yz), Tensor(zx))).data
    for x in range(4):
        for y in range(3):
            for z in range(2):
                np.testing.assert_allclose(V[x, y, z], xy[x, y] + yz[y, z] + zx[z, x],
                                           atol=1e-12)


def test_aggregate_rejects_inconsistent_planes():
    T = TpvTriplet(Tensor(np.zeros((4, 3, 2))), Tensor(np.zeros((3, 2, 2))),
                   Tensor(np.zeros((2, 5, 2))))
    with pytest.raises(DimensionError):
        tpv_aggregate(T)
    with pytest.raises(ContractError):
        tpv_aggregate(T)


def test_constant_field_round_trip():
    V = np.full((3, 4, 2, 2), -0.3)
    np.testing.assert_allclose(tpv_aggregate(tpv_reduce(V)).data, 3 * V, atol=1e-12)


def test_batched_leading_axis_matches_per_item():
    rng = np.random.default_rng(6)
    V = rng.standard_normal((2, 4, 3, 2, 3))
    out = tpv_aggregate(tpv_reduce(V)).data
    for b in range(2):
        np.testing.assert_array_equal(out[b], tpv_aggregate(tpv_reduce(V[b])).data)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(-3, 3), st.floats(-3, 3))
def test_reduce_and_aggregate_are_linear(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((3, 4, 2, 2))
    B = rng.standard_normal((3, 4, 2, 2))
    mix = tpv_reduce(alpha * A + beta * B)
    ra, rb = tpv_reduce(A), tpv_reduce(B)
    for m, a, b in zip(mix.planes(), ra.planes(), rb.planes()):
        np.testing.assert_allclose(m.data, alpha * a.data + beta * b.data, atol=1e-10)
    pa, pb = planes(rng, 3, 4, 2, 2), planes(rng, 3, 4, 2, 2)
    agg = tpv_aggregate(TpvTriplet(*(Tensor(alpha * x + beta * y) for x, y in zip(pa, pb))))
    lin = alpha * tpv_aggregate(TpvTriplet(*map(Tensor, pa))).data + \
        beta * tpv_aggregate(TpvTriplet(*map(Tensor, pb))).data
    np.testing.assert_allclose(agg.data, lin, atol=1e-10)


def test_reduce_gradient():
    rng = np.random.default_rng(7)
    V = leaf(rng.standard_normal((3, 4, 2, 2)))
    Rs = [rng.standard_normal(s) for s in [(3, 4, 2), (4, 2, 2), (2, 3, 2)]]

    def f():
        T = tpv_reduce(V)
        parts = [ops.sum(ops.mul(p, R)) for p, R in zip(T.planes(), Rs)]
        return ops.add(ops.add(parts[0], parts[1]), parts[2])

    assert grad_check(f, [V]) < 1e-6


def test_aggregate_gradient():
    rng = np.random.default_rng(8)
    ps = [leaf(p) for p in planes(rng, 3, 4, 2, 2)]
    R = rng.standard_normal((3, 4, 2, 2))
    assert grad_check(lambda: ops.sum(ops.mul(tpv_aggregate(TpvTriplet(*ps)), R)), ps) < 1e-6
