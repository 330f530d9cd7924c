import numpy as np
import pytest

from segrr.tensor import Tensor, finite_diff_check


def test_elementwise_mul():
    out = Tensor([1.0, 2.0, 3.0]) * Tensor([4.0, 5.0, 6.0])
    np.testing.assert_array_equal(out.data, [4.0, 10.0, 18.0])


def test_mul_identity():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4, 4)).astype(np.float32))
    out = x * Tensor(np.ones_like(x.data))
    np.testing.assert_array_equal(out.data, x.data)


def test_mul_per_channel_broadcast_matches_loop():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((1, 3, 4, 4)).astype(np.float32))
    s = Tensor(rng.standard_normal((1, 3, 1, 1)).astype(np.float32))
    out = x * s
    expected = np.empty_like(x.data)
    for c in range(3):
        for i in range(4):
            for j in range(4):
                expected[0, c, i, j] = x.data[0, c, i, j] * s.data[0, c, 0, 0]
    np.testing.assert_allclose(out.data, expected, rtol=1e-6)


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 4\)"):
        Tensor(np.zeros((2, 3))) * Tensor(np.zeros((2, 4)))


def test_rank_promotion_rejected():
    with pytest.raises(ValueError):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros((1, 2, 3)))


def test_broadcast_repeats_channel_constants():
    x = Tensor(np.arange(4, dtype=np.float32).reshape(1, 4, 1, 1))
    out = x.broadcast_to((1, 4, 8, 8))
    for c in range(4):
        assert np.all(out.data[0, c] == float(c))


def test_broadcast_identity():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4, 4)))
    np.testing.assert_array_equal(x.broadcast_to(x.shape).data, x.data)


def test_broadcast_backward_is_axis_sum():
    err = finite_diff_check(lambda t: t.broadcast_to((2, 3, 4, 4)).square().mean(),
                            Tensor(np.random.default_rng(2).standard_normal((2, 3, 1, 1))),
                            step=1e-3)
    assert err < 1e-4


def test_backward_of_sum_is_ones():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 5)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 5)))


def test_backward_of_half_square_sum_is_x():
    x = Tensor(np.random.default_rng(1).standard_normal((4, 4)), requires_grad=True)
    (x.square().sum() * 0.5).backward()
    np.testing.assert_allclose(x.grad, x.data, rtol=1e-6)


def test_backward_rejects_non_scalar():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * 2.0).backward()


def test_repeated_backward_accumulates():
    x = Tensor(np.ones(3), requires_grad=True)
    x.sum().backward()
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, 2 * np.ones(3))


def test_gradient_linearity():
    rng = np.random.default_rng(3)
    base = rng.standard_normal((3, 4))

    def grad_of(fn):
        x = Tensor(base.copy(), requires_grad=True)
        fn(x).backward()
        return x.grad

    gf = grad_of(lambda x: x.square().sum())
    gg = grad_of(lambda x: x.exp().sum())
    combined = grad_of(lambda x: x.square().sum() * 2.0 + x.exp().sum() * 3.0)
    np.testing.assert_allclose(combined, 2.0 * gf + 3.0 * gg, atol=1e-6)


def test_finite_diff_linear_function_near_exact():
    x = Tensor(np.random.default_rng(4).standard_normal((2, 3)))
    assert finite_diff_check(lambda t: t.sum(), x, step=1e-3) < 1e-10


def test_finite_diff_sigmoid_self_test():
    x = Tensor(np.random.default_rng(5).uniform(-2, 2, (3, 3)))
    assert finite_diff_check(lambda t: t.sigmoid().sum(), x, step=1e-3) < 1e-6


def test_finite_diff_rejects_non_scalar():
    x = Tensor(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        finite_diff_check(lambda t: t * 1.0, x)


def test_finite_diff_detects_wrong_backward():
    # sign-flipped backward rule must be caught
    def broken_square_sum(t):
        out = Tensor((t.data ** 2).sum(), requires_grad=True, _parents=(t,))

        def _bw(g):
            t._accumulate(-2.0 * t.data * g)  # wrong sign
        out._backward = _bw
        return out

    x = Tensor(np.random.default_rng(6).uniform(0.5, 1.5, (2, 2)))
    assert finite_diff_check(broken_square_sum, x, step=1e-3) > 0.1


def test_kink_skip_does_not_mask_wrong_backward():
    def broken_relu_sum(t):
        out = Tensor(np.maximum(t.data, 0).sum(), requires_grad=True, _parents=(t,))

        def _bw(g):
            t._accumulate(-(t.data > 0).astype(t.data.dtype) * g)
        out._backward = _bw
        return out

    x = Tensor(np.random.default_rng(7).uniform(0.5, 1.5, (3, 3)))
    assert finite_diff_check(broken_relu_sum, x, step=1e-3, skip_kinks=True) > 0.1


def test_determinism_same_seed_bit_identical():
    def run():
        rng = np.random.default_rng(99)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)).astype(np.float32), requires_grad=True)
        y = (x.sigmoid() * x.relu()).sum()
        y.backward()
        return y.data.copy(), x.grad.copy()

    (y1, g1), (y2, g2) = run(), run()
    assert np.array_equal(y1, y2)
    assert np.array_equal(g1, g2)
