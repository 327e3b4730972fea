import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from volformer import autodiff as ad
from volformer.autodiff import Tape, Tensor
from volformer.errors import GraphError, NumericError, ShapeError
from volformer.gradcheck import check_gradients, finite_diff_grad, relative_error

SEEDS = range(20)


def t64(rng, *shape):
    return Tensor(rng.standard_normal(shape), dtype=np.float64)


# ------------------------------------------------------------------ matmul


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(a, b).data, [[1, 2], [3, 4]])


def test_matmul_hand_case():
    out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[5.0], [6.0]])
    np.testing.assert_array_equal(out.data, [[17], [39]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_sum_grad_matches_fd():
    rng = np.random.default_rng(0)
    a, b = t64(rng, 3, 4), t64(rng, 4, 2)
    errs = check_gradients(lambda x, y: ad.matmul(x, y).sum(), [a, b], h=1e-5)
    assert max(errs) < 1e-6


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_batched_broadcast_grad(seed):
    rng = np.random.default_rng(seed)
    a, b = t64(rng, 2, 3, 4, 5), t64(rng, 5, 2)
    w = rng.standard_normal((2, 3, 4, 2))
    errs = check_gradients(lambda x, y: (ad.matmul(x, y) * w).sum(), [a, b])
    assert max(errs) < 1e-4


# ----------------------------------------------------------------- softmax


def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax(Tensor(np.zeros(4))).data, [0.25] * 4)


def test_softmax_closed_form():
    out = ad.softmax(Tensor([0.0, math.log(2.0)], dtype=np.float64)).data
    np.testing.assert_allclose(out, [1 / 3, 2 / 3], rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(
    x=hnp.arrays(np.float64, (3, 5), elements=st.floats(-30, 30)),
    c=st.floats(-50, 50),
)
def test_softmax_shift_invariance_and_rows(x, c):
    y = ad.softmax(Tensor(x, dtype=np.float64), axis=-1).data
    y2 = ad.softmax(Tensor(x + c, dtype=np.float64), axis=-1).data
    np.testing.assert_allclose(y, y2, atol=1e-12)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)
    assert ((y >= 0) & (y <= 1)).all()


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_grad(seed):
    rng = np.random.default_rng(seed)
    x = t64(rng, 3, 6)
    w = rng.standard_normal((3, 6))
    assert check_gradients(lambda v: (ad.softmax(v, axis=0) * w).sum(), [x])[0] < 1e-4


# -------------------------------------------------------------- layer norm


def test_layer_norm_constant_row_is_zero():
    x = Tensor(np.full((2, 4), 3.0))
    out = ad.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_layer_norm_hand_case():
    x = Tensor([[1.0, 3.0]], dtype=np.float64)
    one, zero = Tensor(np.ones(2), dtype=np.float64), Tensor(np.zeros(2), dtype=np.float64)
    np.testing.assert_allclose(ad.layer_norm(x, one, zero, eps=0.0).data, [[-1.0, 1.0]])


def test_layer_norm_zero_mean():
    rng = np.random.default_rng(1)
    x = t64(rng, 10, 7)
    out = ad.layer_norm(x, Tensor(np.ones(7), dtype=np.float64), Tensor(np.zeros(7), dtype=np.float64))
    assert np.abs(out.data.mean(axis=-1)).max() < 1e-6


@pytest.mark.parametrize("seed", SEEDS)
def test_layer_norm_grad(seed):
    rng = np.random.default_rng(seed)
    x, g, b = t64(rng, 4, 5), t64(rng, 5), t64(rng, 5)
    w = rng.standard_normal((4, 5))
    errs = check_gradients(lambda *a: (ad.layer_norm(*a) * w).sum(), [x, g, b])
    assert max(errs) < 1e-4


# ------------------------------------------------------------------ conv3d


def test_conv3d_pointwise_scale():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((1, 3, 4, 5)).astype(np.float32))
    w = Tensor(np.full((1, 1, 1, 1, 1), 2.0, dtype=np.float32))
    np.testing.assert_array_equal(ad.conv3d(x, w).data, 2 * x.data)


def test_conv3d_one_hot_all_ones_kernel():
    # every output voxel of a 3^3 grid overlaps the centre voxel once
    x = np.zeros((1, 3, 3, 3))
    x[0, 1, 1, 1] = 1.0
    w = np.ones((1, 1, 3, 3, 3))
    out = ad.conv3d(Tensor(x), Tensor(w), Tensor(np.zeros(1)), padding=1)
    np.testing.assert_array_equal(out.data, np.ones((1, 3, 3, 3)))


def _naive_conv3d(x, w, b, stride, pad):
    xp = np.pad(x, ((0, 0),) + ((pad, pad),) * 3)
    co, _, k = w.shape[0], w.shape[1], w.shape[2]
    dims = [(n + 2 * pad - k) // stride + 1 for n in x.shape[1:]]
    out = np.zeros([co] + dims)
    for o in range(co):
        for i in range(dims[0]):
            for j in range(dims[1]):
                for l in range(dims[2]):
                    blk = xp[:, i * stride : i * stride + k, j * stride : j * stride + k, l * stride : l * stride + k]
                    out[o, i, j, l] = (blk * w[o]).sum() + b[o]
    return out


@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (1, 1, 0), (2, 2, 0), (3, 2, 1)])
def test_conv3d_matches_naive_loops(k, stride, pad):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 6, 5, 4))
    w = rng.standard_normal((3, 2, k, k, k))
    b = rng.standard_normal(3)
    out = ad.conv3d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
    np.testing.assert_allclose(out, _naive_conv3d(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (2, 2, 0)])
def test_conv3d_grad(seed, k, stride, pad):
    rng = np.random.default_rng(seed)
    x, w, b = t64(rng, 2, 4, 4, 4), t64(rng, 3, 2, k, k, k), t64(rng, 3)
    out_shape = ad.conv3d(x, w, b, stride=stride, padding=pad).shape
    r = rng.standard_normal(out_shape)
    errs = check_gradients(lambda *a: (ad.conv3d(*a, stride=stride, padding=pad) * r).sum(), [x, w, b])
    assert max(errs) < 1e-5


def test_conv3d_channel_mismatch():
    with pytest.raises(ShapeError):
        ad.conv3d(Tensor(np.ones((2, 4, 4, 4))), Tensor(np.ones((1, 3, 3, 3, 3))))


# ---------------------------------------------------------- elementwise suite


def test_leaky_relu_definition():
    out = ad.leaky_relu(Tensor([-1.0, 0.0, 2.0], dtype=np.float64), 0.2).data
    np.testing.assert_allclose(out, [-0.2, 0.0, 2.0])


@settings(max_examples=30, deadline=None)
@given(
    x=hnp.arrays(np.float32, (4, 5, 6, 3), elements=st.floats(-1e3, 1e3, width=32)),
    shifts=st.tuples(st.integers(-7, 7), st.integers(-7, 7), st.integers(-7, 7)),
)
def test_roll3d_roundtrip_bit_exact(x, shifts):
    t = Tensor(x)
    back = ad.roll3d(ad.roll3d(t, shifts), tuple(-s for s in shifts))
    assert np.array_equal(back.data, x)


@settings(max_examples=30, deadline=None)
@given(
    x=hnp.arrays(np.float32, (2, 3, 4, 5), elements=st.floats(-1e3, 1e3, width=32)),
    perm=st.permutations(range(4)),
)
def test_permute_and_reshape_roundtrips(x, perm):
    t = Tensor(x)
    inv = np.argsort(perm)
    assert np.array_equal(ad.permute(ad.permute(t, perm), inv).data, x)
    assert np.array_equal(ad.reshape(ad.reshape(t, (6, 20)), x.shape).data, x)
    assert sorted(ad.permute(t, perm).data.ravel()) == sorted(x.ravel())


@pytest.mark.parametrize("seed", SEEDS)
def test_elementwise_grads(seed):
    rng = np.random.default_rng(seed)
    a, b, c = t64(rng, 3, 4), t64(rng, 3, 4), t64(rng, 4)
    w = rng.standard_normal((3, 4))
    cases = [
        (lambda x, y: ((x + y) * w).sum(), [a, b]),
        (lambda x, y: ((x - y) * w).sum(), [a, b]),
        (lambda x, y: (x * y * w).sum(), [a, b]),
        (lambda x, y: ((x + y) * w).sum(), [a, c]),
        (lambda x: ad.mean(x * w), [a]),
        (lambda x: (ad.mean(x, axis=0) * c).sum(), [a]),
        (lambda x: (ad.gelu(x) * w).sum(), [a]),
        (lambda x: (ad.leaky_relu(x, 0.2) * w).sum(), [a]),
        (lambda x: (ad.reshape(x, (4, 3)) * w.T).sum(), [a]),
        (lambda x: (ad.permute(x, (1, 0)) * w.T).sum(), [a]),
        (lambda x: (x[1:, ::2] * w[1:, ::2]).sum(), [a]),
        (lambda x, y: (ad.concat([x, y], axis=0) * np.vstack([w, w])).sum(), [a, b]),
        (lambda x: (ad.gather_rows(x, np.array([[0, 2], [2, 1]])) * rng_w).sum(), [a]),
    ]
    rng_w = rng.standard_normal((2, 2, 4))
    for f, inputs in cases:
        assert max(check_gradients(f, inputs)) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_roll_and_upsample_grads(seed):
    rng = np.random.default_rng(seed)
    x = t64(rng, 2, 3, 4, 2)
    w = rng.standard_normal((2, 3, 4, 2))
    assert check_gradients(lambda v: (ad.roll3d(v, (1, -2, 1), axes=(1, 2, 3)) * w).sum(), [x])[0] < 1e-4
    w2 = rng.standard_normal((2, 6, 8, 4))
    assert check_gradients(lambda v: (ad.upsample_trilinear(v, (6, 8, 4)) * w2).sum(), [x])[0] < 1e-4


def test_upsample_reproduces_interior_linear_ramp():
    # a linear function sampled at voxel centres is reproduced exactly
    # wherever the sample positions stay inside the source extent
    ramp = np.arange(4.0)[:, None, None] + 2 * np.arange(4.0)[None, :, None] + np.zeros((1, 1, 4))
    out = ad.upsample_trilinear(Tensor(ramp[None], dtype=np.float64), (8, 8, 8)).data[0]
    pos = np.clip((np.arange(8) + 0.5) / 2 - 0.5, 0, 3)
    expected = pos[:, None, None] + 2 * pos[None, :, None] + np.zeros((1, 1, 8))
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_gather_rows_accumulates_repeats():
    table = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        loss = ad.gather_rows(table, np.array([0, 0, 2])).sum()
    tape.backward(loss)
    np.testing.assert_array_equal(table.grad, [[2, 2], [0, 0], [1, 1]])


def test_broadcast_beyond_leading_dims_rejected():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 1))))


# ---------------------------------------------------------------- backward


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(5.0), requires_grad=True)
    with Tape() as tape:
        loss = x.sum()
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones(5))


def test_backward_quadratic():
    x = Tensor(np.array([1.0, -2.0, 3.5]), requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_accumulates_across_calls():
    x = Tensor(np.ones(3), requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            loss = x.sum()
        tape.backward(loss)
    np.testing.assert_array_equal(x.grad, 2 * np.ones(3))


def test_backward_rejects_non_scalar_and_detached():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(GraphError, match="scalar"):
        tape.backward(y)
    detached = (x * 2.0).sum()
    with pytest.raises(GraphError, match="detached"):
        tape.backward(detached)
    with Tape() as other:
        z = x.sum()
    with pytest.raises(GraphError):
        tape.backward(z)
    other.backward(z)


def test_tape_is_topologically_ordered():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        ((x * x) + x).sum()
    seen = set()
    for node in tape.nodes:
        for p in node.parents:
            if p._node is not None:
                assert id(p._node) in seen
        seen.add(id(node))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_forward_is_an_error():
    with pytest.raises(NumericError):
        ad.mul(Tensor([1e30], dtype=np.float32), Tensor([1e30], dtype=np.float32))


def test_forward_backward_bit_deterministic():
    def run():
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal((2, 6, 6, 6)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 2, 3, 3, 3)).astype(np.float32), requires_grad=True)
        with Tape() as tape:
            y = ad.softmax(ad.conv3d(x, w, padding=1), axis=0)
            loss = (y * y).sum()
        tape.backward(loss)
        return loss.data.copy(), x.grad.copy(), w.grad.copy()

    for a, b in zip(run(), run()):
        assert np.array_equal(a, b)


# ------------------------------------------------------- finite differences


def test_finite_diff_of_sum_is_ones():
    x = Tensor(np.random.default_rng(0).standard_normal(6), dtype=np.float64)
    np.testing.assert_allclose(finite_diff_grad(lambda v: v.sum(), x), np.ones(6), atol=1e-9)


def test_finite_diff_polynomial():
    x = Tensor(np.array([3.0]), dtype=np.float64)
    g = finite_diff_grad(lambda v: (v * v).sum(), x, h=1e-5)
    assert abs(g[0] - 6.0) < 1e-8


@pytest.mark.parametrize("seed", SEEDS)
def test_finite_diff_agrees_with_backward_on_attention_composite(seed):
    rng = np.random.default_rng(seed)
    q, k, v = t64(rng, 4, 3), t64(rng, 5, 3), t64(rng, 5, 2)
    r = rng.standard_normal((4, 2))

    def f(q, k, v):
        return (ad.matmul(ad.softmax(ad.matmul(q, ad.permute(k, (1, 0))), -1), v) * r).sum()

    assert max(check_gradients(f, [q, k, v])) < 1e-5


def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
