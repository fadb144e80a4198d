import numpy as np
import pytest

from ffe import autodiff as ad
from ffe.autodiff import Tensor
from ffe.errors import GradientError


def fd_scalar(fn, x, step=1e-6):
    """Central differences of fn (ndarray -> float) at x, entrywise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(x)
        flat[i] = orig - step
        lo = fn(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * step)
    return g


def test_sum_of_squares_gradient():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    ad.backward(ad.tsum(ad.mul(x, x)))
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0], rtol=1e-15)


def test_matmul_gradient_structure():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    ad.backward(ad.tsum(ad.matmul(a, b)))
    # d/dA_ij sum(AB) = sum_l B_jl, independent of i
    expect_a = np.tile(b.data.sum(axis=1), (2, 1))
    expect_b = np.tile(a.data.sum(axis=0)[:, None], (1, 2))
    np.testing.assert_allclose(a.grad, expect_a, rtol=1e-14)
    np.testing.assert_allclose(b.grad, expect_b, rtol=1e-14)


def test_gradient_accumulates_on_reuse():
    x = Tensor([1.0, 2.0], requires_grad=True)
    ad.backward(ad.tsum(x + x))
    np.testing.assert_allclose(x.grad, [2.0, 2.0])
    # second backward without reset keeps accumulating
    ad.backward(ad.tsum(x + x))
    np.testing.assert_allclose(x.grad, [4.0, 4.0])
    x.zero_grad()
    ad.backward(ad.tsum(x))
    np.testing.assert_allclose(x.grad, [1.0, 1.0])


def test_duplicated_input_doubles_contribution():
    x = Tensor([3.0], requires_grad=True)
    y = ad.mul(x, x)  # x used twice
    ad.backward(y)
    np.testing.assert_allclose(x.grad, [6.0])


def test_non_scalar_backward_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(GradientError):
        ad.backward(ad.mul(x, x))


def test_constant_graph_backward_is_noop():
    x = Tensor([1.0, 2.0])
    out = ad.tsum(ad.mul(x, x))
    ad.backward(out)
    assert x.grad is None


@pytest.mark.parametrize(
    "name,build",
    [
        ("exp", lambda x: ad.tsum(ad.exp(x))),
        ("log", lambda x: ad.tsum(ad.log(x))),
        ("sqrt", lambda x: ad.tsum(ad.sqrt(x))),
        ("power", lambda x: ad.tsum(ad.power(x, 3.0))),
        ("div", lambda x: ad.tsum(ad.div(Tensor([1.0, 2.0, 3.0, 4.0]), x))),
        ("leaky", lambda x: ad.tsum(ad.leaky_relu(x - 1.0))),
        ("softmax", lambda x: ad.tsum(ad.mul(ad.softmax(x, axis=0), Tensor([0.3, -0.2, 0.9, 0.1])))),
        ("lse", lambda x: ad.logsumexp(ad.reshape(x, (1, 4)), axis=1)),
        ("mean", lambda x: ad.tmean(ad.mul(x, x))),
    ],
)
def test_elementwise_ops_match_fd(name, build):
    x0 = np.array([0.5, 1.25, 2.0, 0.8])
    x = Tensor(x0.copy(), requires_grad=True)
    out = build(x)
    ad.backward(out)
    numeric = fd_scalar(lambda v: build(Tensor(v)).item(), x0.copy())
    np.testing.assert_allclose(x.grad, numeric, rtol=1e-6, atol=1e-9)


def test_abs_subgradient_zero_at_zero():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    ad.backward(ad.tsum(ad.absolute(x)))
    np.testing.assert_allclose(x.grad, [-1.0, 0.0, 1.0])


def test_amax_ties_route_to_lowest_index():
    x = Tensor([[1.0, 3.0, 3.0]], requires_grad=True)
    ad.backward(ad.tsum(ad.amax(x, axis=1)))
    np.testing.assert_allclose(x.grad, [[0.0, 1.0, 0.0]])


def test_amin_matches_fd():
    x0 = np.array([[0.5, 1.25], [2.0, 0.8]])
    x = Tensor(x0.copy(), requires_grad=True)
    ad.backward(ad.tsum(ad.amin(x, axis=1)))
    numeric = fd_scalar(lambda v: Tensor(v).data.min(axis=1).sum(), x0.copy())
    np.testing.assert_allclose(x.grad, numeric, rtol=1e-6)


def test_clamp_gradient_zero_when_clipped():
    x = Tensor([-1.0, 0.5, 2.0], requires_grad=True)
    ad.backward(ad.tsum(ad.clamp(x, lo=0.0, hi=1.0)))
    np.testing.assert_allclose(x.grad, [0.0, 1.0, 0.0])


def test_broadcast_add_bias():
    rng = np.random.default_rng(1)
    w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=4), requires_grad=True)
    ad.backward(ad.tsum(ad.mul(w + b, w + b)))
    expect_b = (2 * (w.data + b.data)).sum(axis=0)
    np.testing.assert_allclose(b.grad, expect_b, rtol=1e-14)


def test_take_rows_scatter_adds():
    x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    idx = np.array([[0, 0], [2, 1]])
    ad.backward(ad.tsum(ad.take_rows(x, idx)))
    np.testing.assert_allclose(x.grad, [[2.0, 2.0], [1.0, 1.0], [1.0, 1.0]])


def test_take2d_and_select_col():
    x = Tensor(np.arange(9.0).reshape(3, 3), requires_grad=True)
    rows = np.array([[0], [1], [2]])
    cols = np.array([[2], [0], [1]])
    ad.backward(ad.tsum(ad.take2d(x, rows, cols)))
    expect = np.zeros((3, 3))
    expect[[0, 1, 2], [2, 0, 1]] = 1.0
    np.testing.assert_allclose(x.grad, expect)
    x.zero_grad()
    ad.backward(ad.tsum(ad.select_col(x, 1)))
    expect = np.zeros((3, 3))
    expect[:, 1] = 1.0
    np.testing.assert_allclose(x.grad, expect)


def test_concat_splits_gradient():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones((2, 3)), requires_grad=True)
    out = ad.concat([a, b], axis=1)
    ad.backward(ad.tsum(ad.mul(out, Tensor(np.arange(10.0).reshape(2, 5)))))
    np.testing.assert_allclose(a.grad, [[0.0, 1.0], [5.0, 6.0]])
    np.testing.assert_allclose(b.grad, [[2.0, 3.0, 4.0], [7.0, 8.0, 9.0]])


def test_reshape_transpose_roundtrip():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    out = ad.tsum(ad.mul(ad.transpose(ad.reshape(x, (3, 2))), Tensor(np.arange(6.0).reshape(2, 3))))
    ad.backward(out)
    assert x.grad.shape == (2, 3)


def test_dropout_scales_kept_entries():
    rng = np.random.default_rng(0)
    x = Tensor(np.ones((4, 4)), requires_grad=True)
    out = ad.dropout(x, 0.5, rng)
    kept = out.data != 0
    np.testing.assert_allclose(out.data[kept], 2.0)
    ad.backward(ad.tsum(out))
    np.testing.assert_allclose(x.grad[kept], 2.0)
    np.testing.assert_allclose(x.grad[~kept], 0.0)


def test_deterministic_replay():
    def run():
        x = Tensor(np.linspace(0.1, 1.0, 12).reshape(3, 4), requires_grad=True)
        y = ad.tsum(ad.exp(ad.mul(x, x)))
        ad.backward(y)
        return y.data.copy(), x.grad.copy()

    v1, g1 = run()
    v2, g2 = run()
    assert np.array_equal(v1, v2)
    assert np.array_equal(g1, g2)


class TestFiniteDiffCheck:
    def test_quadratic_is_exact(self):
        x = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)

        def loss():
            return ad.tsum(ad.mul(x, x))

        assert ad.finite_diff_check(loss, [x], 1e-5) < 1e-9

    def test_exclusion_mask_skips_entries(self):
        # first entry sits half a step from the |.| kink: central differences
        # straddle it and disagree with the subgradient unless masked out
        x = Tensor(np.array([5e-6, 1.0]), requires_grad=True)

        def loss():
            return ad.tsum(ad.absolute(x))

        assert ad.finite_diff_check(loss, [x], 1e-5, exclude=[np.array([True, False])]) < 1e-9
        assert ad.finite_diff_check(loss, [x], 1e-5) > 0.3

    def test_nonpositive_step_rejected(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        with pytest.raises(GradientError):
            ad.finite_diff_check(lambda: ad.tsum(x), [x], 0.0)

    def test_nonfinite_loss_rejected(self):
        x = Tensor(np.array([0.0]), requires_grad=True)

        def loss():
            with np.errstate(divide="ignore"):
                return ad.log(x)

        with pytest.raises(GradientError):
            ad.finite_diff_check(loss, [x], 1e-3)
