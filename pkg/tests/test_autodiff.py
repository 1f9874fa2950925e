import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ccfp.autodiff import (
    Adam,
    AdamState,
    Tensor,
    adam_step,
    channel_stats,
    conv2d,
    frobenius_norm,
    l2_squared,
    linear,
    matmul,
    max_pool2d,
    no_grad,
    relu,
    softmax_cross_entropy,
)
from ccfp.errors import ContractError, DimensionError

from fd_cases import all_cases, check_case
from oracles import (
    adam_reference,
    channel_stats_loop,
    conv2d_loop,
    cross_entropy_loop,
    linear_loop,
    max_pool_loop,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


# -- forward values against loop references ---------------------------------

def test_conv_ones_gives_four():
    out = conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 2, 2))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 4.0


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 4))
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)])
def test_conv_matches_loop(stride, padding):
    rng = np.random.default_rng(stride * 10 + padding)
    x = rng.normal(size=(1, 2, 4, 4))
    k = rng.normal(size=(3, 2, 3, 3))
    got = conv2d(Tensor(x), Tensor(k), stride, padding).data
    np.testing.assert_allclose(got, conv2d_loop(x, k, stride, padding), rtol=0, atol=1e-10)


def test_conv_errors():
    with pytest.raises(DimensionError, match="channels"):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(DimensionError, match="larger"):
        conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))
    with pytest.raises(ValueError):
        conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=0)


def test_pool_small_cases():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert max_pool2d(x, 2).data.item() == 4.0
    const = max_pool2d(Tensor(np.full((1, 2, 4, 4), 7.5)), 2)
    assert np.all(const.data == 7.5)


@pytest.mark.parametrize("window,stride", [(2, 2), (2, 1), (3, 2), (3, 3), (1, 1)])
def test_pool_matches_loop(window, stride):
    x = np.random.default_rng(window + 7 * stride).normal(size=(2, 2, 6, 7))
    got = max_pool2d(Tensor(x), window, stride).data
    np.testing.assert_allclose(got, max_pool_loop(x, window, stride), rtol=0, atol=1e-10)


def test_pool_tie_goes_to_first_element():
    x = Tensor(np.full((1, 1, 2, 2), 3.0), requires_grad=True)
    max_pool2d(x, 2).sum().backward()
    np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_pool_window_too_large():
    with pytest.raises(DimensionError):
        max_pool2d(Tensor(np.zeros((1, 1, 2, 2))), 3)


def test_relu_and_linear():
    np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    x = np.random.default_rng(1).normal(size=(3, 4))
    np.testing.assert_array_equal(linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)
    rng = np.random.default_rng(2)
    x, w, b = rng.normal(size=(3, 5)), rng.normal(size=(5, 2)), rng.normal(size=2)
    np.testing.assert_allclose(linear(Tensor(x), Tensor(w), Tensor(b)).data, linear_loop(x, w, b), atol=1e-10)
    with pytest.raises(DimensionError):
        linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_channel_stats_reference_values():
    mu, sigma = channel_stats(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), eps=0.0)
    assert mu.data.item() == 2.5
    assert sigma.data.item() == pytest.approx(1.118034, abs=1e-6)
    mu, sigma = channel_stats(Tensor(np.full((1, 1, 3, 3), 4.0)), eps=1e-5)
    assert mu.data.item() == 4.0
    assert sigma.data.item() == pytest.approx(math.sqrt(1e-5), rel=1e-12)


def test_channel_stats_matches_loop_and_centering():
    x = np.random.default_rng(3).normal(size=(2, 3, 4, 5)) * 3 + 1
    mu, sigma = channel_stats(Tensor(x), 1e-5)
    ref_mu, ref_sigma = channel_stats_loop(x, 1e-5)
    np.testing.assert_allclose(mu.data, ref_mu, atol=1e-10)
    np.testing.assert_allclose(sigma.data, ref_sigma, atol=1e-10)
    normed = (x - mu.data[:, :, None, None]) / sigma.data[:, :, None, None]
    mu2, _ = channel_stats(Tensor(normed), 1e-5)
    np.testing.assert_allclose(mu2.data, 0.0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=4, max_dims=4, max_side=4), elements=finite),
       st.sampled_from([1e-8, 1e-5, 1e-2]))
def test_channel_stats_sigma_floor(x, eps):
    mu, sigma = channel_stats(Tensor(x), eps)
    assert np.all(np.isfinite(mu.data)) and np.all(np.isfinite(sigma.data))
    assert np.all(sigma.data >= math.sqrt(eps) * (1 - 1e-12))


def test_cross_entropy_values():
    assert softmax_cross_entropy(Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2), abs=1e-12)
    assert softmax_cross_entropy(Tensor([[100.0, -100.0]]), [0]).item() == pytest.approx(0.0, abs=1e-12)
    rng = np.random.default_rng(4)
    z, y = rng.normal(size=(6, 4)) * 3, rng.integers(0, 4, size=6)
    assert softmax_cross_entropy(Tensor(z), y).item() == pytest.approx(cross_entropy_loop(z, y), abs=1e-10)
    with pytest.raises(IndexError):
        softmax_cross_entropy(Tensor(z), np.full(6, 4))


def test_norms():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert l2_squared(a, a).item() == 0.0
    assert frobenius_norm(Tensor([[3.0, 4.0], [0.0, 0.0]])).item() == 5.0
    assert l2_squared(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 2.0
    with pytest.raises(DimensionError):
        l2_squared(Tensor([1.0, 0.0]), Tensor([1.0, 0.0, 0.0]))


def test_frobenius_gradient_at_zero_is_zero():
    m = Tensor(np.zeros((2, 2)), requires_grad=True)
    frobenius_norm(m).backward()
    np.testing.assert_array_equal(m.grad, 0.0)


# -- backward ---------------------------------------------------------------

def test_sum_gives_ones_and_quadratic_gives_2x():
    x = Tensor(np.random.default_rng(5).normal(size=(2, 3, 4)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))
    y = Tensor(np.random.default_rng(6).normal(size=(5,)), requires_grad=True)
    l2_squared(y, 0.0).backward()
    np.testing.assert_allclose(y.grad, 2 * y.data)


def test_backward_accumulates_until_reset():
    x = Tensor([1.0, -2.0], requires_grad=True)
    (x * 3.0).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    x.zero_grad()
    assert x.grad is None


def test_backward_contract_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()
    with pytest.raises(ContractError):
        Tensor(1.0).backward()


def test_shared_subexpression_gradient():
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    (y * y + y).sum().backward()  # x^4 + x^2
    assert x.grad[0] == pytest.approx(4 * 8 + 2 * 2)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_matmul_dimension_error():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


@pytest.mark.parametrize("case", all_cases(seed=11, per_builder=2, network_cases=1), ids=lambda c: c[0])
def test_finite_differences(case):
    assert check_case(case, np.random.default_rng(0)) <= 1e-4


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (2, 3), elements=finite), hnp.arrays(np.float64, (3, 2), elements=finite))
def test_matmul_gradient_is_analytic(a, b):
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    (ta @ tb).sum().backward()
    np.testing.assert_allclose(ta.grad, np.ones((2, 2)) @ b.T)
    np.testing.assert_allclose(tb.grad, a.T @ np.ones((2, 2)))


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (1, 2, 4, 4), elements=finite))
def test_ops_are_deterministic(x):
    k = np.random.default_rng(0).normal(size=(2, 2, 3, 3))
    a = max_pool2d(conv2d(Tensor(x), Tensor(k), 1, 1), 2).data
    b = max_pool2d(conv2d(Tensor(x), Tensor(k), 1, 1), 2).data
    assert a.tobytes() == b.tobytes()


# -- Adam ------------------------------------------------------------------

def test_adam_first_step_moves_by_lr_sign():
    p = Tensor(np.array([1.0, -1.0, 0.5]), requires_grad=True)
    state = AdamState.for_params([p])
    adam_step([p], [np.array([3.0, -0.2, 1e-3])], state, lr=0.01)
    np.testing.assert_allclose(p.data, [0.99, -0.99, 0.49], atol=1e-6)
    assert state.step_count == 1


def test_adam_zero_gradient_leaves_parameter():
    p = Tensor(np.array([0.3, 0.4]), requires_grad=True)
    state = AdamState.for_params([p])
    for _ in range(5):
        adam_step([p], [np.zeros(2)], state, lr=0.1)
    np.testing.assert_array_equal(p.data, [0.3, 0.4])
    assert state.step_count == 5


def test_adam_matches_reference_recurrence():
    # f(x) = (x - 3)^2 starting at 0
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    trace = []
    for _ in range(5):
        p.grad = None
        l2_squared(p, 3.0).backward()
        opt.step()
        trace.append(p.data[0])
    ref = adam_reference(0.0, lambda x: 2 * (x - 3.0), 0.1, 5)
    np.testing.assert_allclose(trace, ref, rtol=0, atol=1e-14)


def test_adam_ascent_sign_and_errors():
    p = Tensor(np.array([0.0]), requires_grad=True)
    p.grad = np.array([1.0])
    Adam([p], lr=0.1).step(sign=-1.0)
    assert p.data[0] == pytest.approx(0.1, rel=1e-6)
    with pytest.raises(ValueError):
        adam_step([p], [np.ones(1)], AdamState.for_params([p]), lr=0.0)


def test_adam_state_shapes():
    ps = [Tensor(np.zeros((2, 3)), requires_grad=True), Tensor(np.zeros(4), requires_grad=True)]
    state = AdamState.for_params(ps)
    assert [m.shape for m in state.first_moment] == [(2, 3), (4,)]
    assert [v.shape for v in state.second_moment] == [(2, 3), (4,)]
