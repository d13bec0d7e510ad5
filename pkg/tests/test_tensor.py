import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gradsuite
from yoloam import tensor as T
from yoloam.tensor import Tensor, kernels


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


# -- hand examples ---------------------------------------------------------------
def test_conv2d_all_ones_sums_to_nine():
    out = T.conv2d(t64(np.ones((1, 1, 3, 3))), t64(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


def test_conv2d_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 1, 5, 4))
    out = T.conv2d(t64(x), t64(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(1)
    x, w, b = rng.standard_normal((2, 3, 7, 6)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    out = T.conv2d(t64(x), t64(w), t64(b), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 4, 3))
    for i in range(4):
        for j in range(3):
            patch = xp[:, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
            ref[:, :, i, j] = np.einsum("nchw,ochw->no", patch, w) + b
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv2d_shape_errors():
    with pytest.raises(ValueError, match="channel"):
        T.conv2d(t64(np.ones((1, 2, 5, 5))), t64(np.ones((1, 3, 3, 3))))
    with pytest.raises(ValueError, match="odd"):
        T.conv2d(t64(np.ones((1, 1, 5, 5))), t64(np.ones((1, 1, 2, 2))))


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), k=st.sampled_from([1, 3, 5]), s=st.integers(1, 3), p=st.integers(0, 2))
def test_conv_output_shape_formula(h, w, k, s, p):
    oh, ow = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
    x, wt = t64(np.ones((1, 1, h, w))), t64(np.ones((2, 1, k, k)))
    if oh < 1 or ow < 1:
        with pytest.raises(ValueError):
            T.conv2d(x, wt, stride=s, padding=p)
        return
    assert T.conv2d(x, wt, stride=s, padding=p).shape == (1, 2, oh, ow)
    if (h + 2 * p - k) // s + 1 >= 1 and k <= h + 2 * p:
        assert T.maxpool2d(x, k, s, min(p, k // 2)).shape[2] == (h + 2 * min(p, k // 2) - k) // s + 1


def test_conv1d_examples():
    x = t64([[[1.0, 2.0, 3.0]]])
    np.testing.assert_array_equal(T.conv1d(x, t64([[[1.0]]])).data, [[[1, 2, 3]]])
    np.testing.assert_array_equal(T.conv1d(x, t64([[[1.0, 1.0, 1.0]]])).data, [[[3, 6, 5]]])
    with pytest.raises(ValueError, match="odd"):
        T.conv1d(x, t64([[[1.0, 1.0]]]))


def test_gap_gmp():
    x = t64([[[[1.0, 2.0], [3.0, 4.0]]]])
    assert T.gap(x).item() == 2.5
    assert T.gmp(x).item() == 4.0
    c = t64(np.full((1, 1, 3, 2), 7.0))
    assert T.gap(c).item() == T.gmp(c).item() == 7.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_gap_gmp_spatial_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 4, 5))
    perm = rng.permutation(20)
    xp = x.reshape(2, 3, 20)[:, :, perm].reshape(2, 3, 4, 5)
    np.testing.assert_allclose(T.gap(t64(x)).data, T.gap(t64(xp)).data, atol=1e-14)
    np.testing.assert_array_equal(T.gmp(t64(x)).data, T.gmp(t64(xp)).data)


def test_sigmoid_softmax_symmetry_points():
    assert T.sigmoid(t64(0.0)).item() == 0.5
    np.testing.assert_array_equal(T.softmax(t64([0.0, 0.0])).data, [0.5, 0.5])


def test_sigmoid_and_softmax_are_stable_at_extremes():
    s = T.sigmoid(t64([-1000.0, 1000.0])).data
    assert np.all(np.isfinite(s)) and s[0] == 0.0 and s[1] == 1.0
    sm = T.softmax(t64([1000.0, 0.0])).data
    assert np.all(np.isfinite(sm))


def test_groupnorm_statistics():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 6, 4, 4)) * 3 + 1
    out = T.groupnorm(t64(x), 3, t64(np.ones(6)), t64(np.zeros(6))).data.reshape(2, 3, -1)
    np.testing.assert_allclose(out.mean(axis=2), 0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=2), 1, atol=1e-5)
    with pytest.raises(ValueError, match="divide"):
        T.groupnorm(t64(x), 4, t64(np.ones(6)), t64(np.zeros(6)))


def test_batchnorm_modes_and_running_stats():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((4, 2, 3, 3)) * 2 + 5
    rm, rv = np.zeros(2), np.ones(2)
    out = T.batchnorm2d(t64(x), t64(np.ones(2)), t64(np.zeros(2)), rm, rv, True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-10)
    np.testing.assert_allclose(rm, 0.03 * x.mean(axis=(0, 2, 3)))
    m = x[:, 0].size
    np.testing.assert_allclose(rv, 0.97 + 0.03 * x.var(axis=(0, 2, 3)) * m / (m - 1))
    # eval mode uses the stored statistics and leaves them alone
    before = rm.copy()
    ev = T.batchnorm2d(t64(x), t64(np.ones(2)), t64(np.zeros(2)), rm, rv, False).data
    np.testing.assert_array_equal(rm, before)
    np.testing.assert_allclose(ev, (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5))


def test_backward_examples():
    x = t64([1.0, 2.0], grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [1, 1])
    y = t64([1.0, 2.0], grad=True)
    (y * y).sum().backward()
    np.testing.assert_array_equal(y.grad, [2, 4])


def test_backward_errors():
    x = t64([1.0, 2.0], grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * 2).backward()
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(RuntimeError):
        loss.backward()
    with pytest.raises(RuntimeError):
        t64([1.0]).backward()


def test_no_grad_records_nothing():
    x = t64([1.0, 2.0], grad=True)
    with T.no_grad():
        y = (x * x).sum()
    with pytest.raises(RuntimeError):
        y.backward()


def test_gradient_accumulates_over_shared_use():
    x = t64([3.0], grad=True)
    (x * x + x).sum().backward()
    np.testing.assert_array_equal(x.grad, [7.0])


def test_broadcasting_is_restricted():
    with pytest.raises(ValueError):
        t64(np.ones((2, 3))) + t64(np.ones(3))
    out = t64(np.ones((2, 3, 4, 4))) * t64(np.full((2, 3, 1, 1), 2.0))
    assert out.shape == (2, 3, 4, 4) and np.all(out.data == 2)


def test_axis_out_of_range():
    with pytest.raises(ValueError):
        T.softmax(t64(np.ones((2, 2))), axis=3)


def test_deep_chain_backward_is_iterative():
    x = t64([1.0], grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0
    y.sum().backward()
    assert x.grad[0] == 1.0


def test_upsample_nearest():
    x = t64([[[[1.0, 2.0], [3.0, 4.0]]]])
    out = T.upsample_nearest2x(x).data[0, 0]
    np.testing.assert_array_equal(out, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])


def test_maxpool_padding_ignores_pad():
    x = t64(-np.ones((1, 1, 3, 3)))
    out = T.maxpool2d(x, 3, 1, 1)
    assert np.all(out.data == -1)


def test_eval_forward_is_bitwise_deterministic():
    rng = np.random.default_rng(9)
    x, w = rng.standard_normal((2, 3, 9, 9)), rng.standard_normal((4, 3, 3, 3))
    a = T.conv2d(t64(x), t64(w), padding=1).data
    b = T.conv2d(t64(x), t64(w), padding=1).data
    assert a.tobytes() == b.tobytes()


# -- compiled vs fallback kernels -----------------------------------------------
@pytest.mark.skipif(kernels.BACKEND != "compiled", reason="extension not built")
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("k,s", [(1, 1), (3, 1), (3, 2), (5, 2), (7, 1)])
def test_compiled_kernels_match_fallback(dtype, k, s):
    from yoloam.tensor import _kernels, _kernels_py

    rng = np.random.default_rng(k * 10 + s)
    rtol = 1e-5 if dtype == np.float32 else 1e-12  # overlapping windows sum in a different order
    xp = rng.standard_normal((2, 3, 11, 10)).astype(dtype)
    oh, ow = (11 - k) // s + 1, (10 - k) // s + 1
    a = _kernels.im2col(xp, k, k, s, s, oh, ow)
    b = _kernels_py.im2col(xp, k, k, s, s, oh, ow)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(
        _kernels.col2im(a, 3, 11, 10, k, k, s, s, oh, ow), _kernels_py.col2im(b, 3, 11, 10, k, k, s, s, oh, ow), rtol=rtol, atol=rtol
    )
    if k > 1:
        pa, ia = _kernels.maxpool_forward(xp, k, s, oh, ow)
        pb, ib = _kernels_py.maxpool_forward(xp, k, s, oh, ow)
        np.testing.assert_array_equal(pa, pb)
        np.testing.assert_array_equal(ia, ib)
        g = rng.standard_normal(pa.shape).astype(dtype)
        np.testing.assert_allclose(
            _kernels.maxpool_backward(g, ia, 11, 10, k, s), _kernels_py.maxpool_backward(g, ib, 11, 10, k, s), rtol=rtol, atol=rtol
        )


def test_backend_switch_roundtrip():
    before = kernels.BACKEND
    rng = np.random.default_rng(2)
    x, w = t64(rng.standard_normal((1, 2, 6, 6))), t64(rng.standard_normal((3, 2, 3, 3)))
    kernels.use("python")
    try:
        ref = T.conv2d(x, w, padding=1).data
    finally:
        kernels.use(before)
    np.testing.assert_allclose(T.conv2d(x, w, padding=1).data, ref, atol=1e-12)
    with pytest.raises(ValueError):
        kernels.use("gpu")


# -- gradient checks (ops) -------------------------------------------------------
@pytest.mark.parametrize("name", sorted(k for k in gradsuite.ALL if k.startswith("op:")))
def test_op_gradients(name):
    worst = max(gradsuite.run_case(name, s) for s in gradsuite.SEEDS)
    assert worst < gradsuite.TOL, f"{name}: {worst:.2e}"


def test_gradcheck_catches_a_wrong_backward():
    x = t64(np.random.default_rng(0).standard_normal(5), grad=True)

    def bad_square():
        return T.core._make(x.data**2, (x,), lambda g: (g * 2.02 * x.data,), "bad_square")

    assert T.gradcheck(bad_square, [x]) > 1e-3
