import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ticl import autodiff as ad
from ticl.autodiff import Parameter, Tape, Tensor


def grad_of(fn, *values):
    params = [Parameter(np.asarray(v, dtype=np.float64)) for v in values]
    with Tape() as tape:
        out = fn(*params)
    tape.backward(out)
    return [p.grad for p in params]


# -- forward oracles --------------------------------------------------------

def test_matmul_oracle():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal((a @ b).data, [[19, 22], [43, 50]])


def test_matmul_identity_and_zero(rng):
    a = Tensor(rng.normal(size=(3, 3)))
    np.testing.assert_allclose((a @ Tensor(np.eye(3))).data, a.data, rtol=1e-6)
    assert not (a @ Tensor(np.zeros((3, 2)))).data.any()


def test_matmul_shape_error():
    with pytest.raises(ad.ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_softmax_oracle():
    out = ad.softmax(Tensor([1.0, 2.0, 3.0])).data
    np.testing.assert_allclose(out, [0.0900305731704, 0.244728471055, 0.665240955775], atol=1e-4)


def test_softmax_uniform_and_shift_invariant(rng):
    np.testing.assert_allclose(ad.softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3, rtol=1e-6)
    v = rng.normal(size=(4, 5))
    np.testing.assert_allclose(ad.softmax(Tensor(v + 7.5)).data, ad.softmax(Tensor(v)).data, atol=1e-6)


def test_layer_norm_oracle():
    x = Tensor([[1.0, 2.0, 3.0]])
    out = ad.layer_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), 1e-5).data
    np.testing.assert_allclose(out[0], [-1.22473568591, 0.0, 1.22473568591], atol=1e-3)


def test_layer_norm_degenerate_cases():
    const = ad.layer_norm(Tensor(np.full((2, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert not const.data.any()
    beta = np.array([0.5, -1.0, 2.0])
    out = ad.layer_norm(Tensor([[1.0, 5.0, 9.0]]), Tensor(np.zeros(3)), Tensor(beta))
    np.testing.assert_array_equal(out.data[0], beta.astype(out.dtype))


def test_gelu_values():
    assert ad.gelu(Tensor([1.0])).data[0] == pytest.approx(0.841344746069, abs=1e-3)
    assert ad.gelu(Tensor([0.0])).data[0] == 0.0
    big = ad.gelu(Tensor([30.0, -30.0])).data
    assert big[0] == pytest.approx(30.0) and abs(big[1]) < 1e-6


def test_sigmoid_values():
    assert ad.sigmoid(Tensor([2.0])).data[0] == pytest.approx(0.880797077978, abs=1e-4)
    assert ad.sigmoid(Tensor([0.0])).data[0] == 0.5
    x = np.linspace(-6, 6, 13)
    np.testing.assert_allclose(ad.sigmoid(Tensor(-x)).data, 1 - ad.sigmoid(Tensor(x)).data, atol=1e-6)


def test_cross_entropy_oracles():
    assert ad.cross_entropy(Tensor([[2.0, 0.0]]), [0]).item() == pytest.approx(0.126928011043, abs=1e-4)
    assert ad.cross_entropy(Tensor(np.zeros((3, 10))), [0, 4, 9]).item() == pytest.approx(math.log(10), abs=1e-6)
    assert ad.cross_entropy(Tensor([[60.0, 0.0, 0.0]]), [0]).item() < 1e-12


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ad.LabelError):
        ad.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(ad.LabelError):
        ad.cross_entropy(Tensor(np.zeros((1, 2))), [-1])


def test_cross_entropy_soft_targets_match_hard():
    logits = Tensor([[0.3, -1.0, 2.0], [1.0, 0.0, 0.5]])
    hard = ad.cross_entropy(logits, [2, 0]).item()
    soft = ad.cross_entropy(logits, np.eye(3)[[2, 0]]).item()
    assert soft == pytest.approx(hard, rel=1e-6)


def test_feature_distance_oracle_and_symmetry(rng):
    assert ad.feature_distance(Tensor([[3.0, 4.0]]), Tensor([[0.0, 0.0]])).item() == pytest.approx(5.0)
    u, v = Tensor(rng.normal(size=(4, 6))), Tensor(rng.normal(size=(4, 6)))
    assert ad.feature_distance(u, v).item() == pytest.approx(ad.feature_distance(v, u).item())
    assert ad.feature_distance(u, u).item() == 0.0


def test_feature_distance_zero_gradient_is_zero():
    u = Parameter(np.ones((2, 3)))
    with Tape() as tape:
        d = ad.feature_distance(u, Tensor(np.ones((2, 3))))
    tape.backward(d)
    assert np.all(u.grad == 0) and np.all(np.isfinite(u.grad))


# -- backward ---------------------------------------------------------------

def test_square_gradient():
    (g,) = grad_of(lambda x: x * x, 3.0)
    assert g == pytest.approx(6.0)


def test_constant_leaf_gets_no_gradient():
    x = Parameter(np.array(2.0))
    c = Tensor(np.array(5.0))
    with Tape() as tape:
        y = x * c
    tape.backward(y)
    assert c.grad is None and x.grad == pytest.approx(5.0)


def test_gradient_accumulates_over_reuse():
    (g,) = grad_of(lambda x: x * x + x * 3.0, 2.0)
    assert g == pytest.approx(7.0)


def test_backward_requires_scalar():
    x = Parameter(np.ones(3))
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ad.TapeError):
        tape.backward(y)


def test_no_grad_records_nothing():
    x = Parameter(np.ones(3))
    with Tape() as tape:
        with ad.no_grad():
            y = x * 2.0
    assert not tape.records and not y.requires_grad


def test_frozen_parameters_do_not_require_grad():
    p = Parameter(np.ones(2), frozen=True)
    with Tape() as tape:
        y = (p * 3.0).sum()
    assert not tape.records and not y.requires_grad


def test_non_finite_forward_raises():
    with pytest.raises(ad.NonFiniteError):
        Tensor([1.0]) * Tensor([np.inf])


def test_advanced_index_gradient_accumulates():
    x = Parameter(np.arange(4.0))
    with Tape() as tape:
        y = x[np.array([0, 0, 3])].sum()
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, [2, 0, 0, 1])


# -- finite differences -------------------------------------------------------

def test_linear_function_exact():
    rng = np.random.default_rng(0)
    w = Parameter(rng.normal(size=(4, 3)), name="w")
    x = Tensor(rng.normal(size=(5, 4)))
    report = ad.finite_difference_check(lambda: (x @ w).sum(), [w], probes=12)
    assert report.passed and report.max_abs_err < 1e-9


def test_quadratic_form():
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(5, 5)))
    x = Parameter(rng.normal(size=(1, 5)), name="x")
    report = ad.finite_difference_check(lambda: (x @ a @ x.transpose()).sum(), [x], probes=5)
    assert report.passed


def test_composite_ops_gradcheck():
    rng = np.random.default_rng(2)
    w = Parameter(rng.normal(size=(6, 4)), name="w")
    g = Parameter(rng.normal(size=4), name="gamma")
    b = Parameter(rng.normal(size=4), name="beta")
    x = Tensor(rng.normal(size=(3, 6)))

    def loss():
        h = ad.layer_norm(x @ w, g, b)
        p = ad.softmax(ad.gelu(h) * ad.sigmoid(h), axis=-1)
        return ad.cross_entropy(p * 3.0, [0, 2, 3]) + ad.feature_distance(h, Tensor(np.ones((3, 4))))

    report = ad.finite_difference_check(loss, [w, g, b], probes=40)
    assert report.passed, report.failures()
    assert report.total_probes == 40


def test_gradcheck_detects_nondeterminism():
    p = Parameter(np.ones(2), name="p")
    counter = iter(range(10 ** 6))

    def loss():
        return (p * float(next(counter))).sum()

    with pytest.raises(ad.NonDeterministicError):
        ad.finite_difference_check(loss, [p], probes=2)


# -- optimiser ------------------------------------------------------------------

def test_sgd_oracle_and_zero_grad():
    cfg = ad.OptimizerConfig(name="sgd", lr=0.1, weight_decay=0.0, schedule="constant")
    p = Parameter(np.array([0.0]))
    p.grad = np.array([1.0])
    ad.optimizer_step([p], cfg)
    assert p.data[0] == pytest.approx(-0.1)
    q = Parameter(np.array([0.7]))
    q.grad = np.array([0.0])
    ad.optimizer_step([q], cfg)
    assert q.data[0] == pytest.approx(0.7)


def test_frozen_parameter_untouched():
    p = Parameter(np.array([1.0, 2.0]), frozen=True)
    p.grad = np.array([5.0, 5.0])
    ad.optimizer_step([p], ad.OptimizerConfig(name="sgd", lr=1.0))
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_missing_gradient_raises():
    with pytest.raises(ad.MissingGradientError):
        ad.optimizer_step([Parameter(np.ones(2))], ad.OptimizerConfig())


def test_adamw_decay_only_on_matrices():
    cfg = ad.OptimizerConfig(lr=0.1, weight_decay=0.5, schedule="constant")
    w = Parameter(np.ones((2, 2)))
    b = Parameter(np.ones(2))
    w.grad, b.grad = np.zeros((2, 2)), np.zeros(2)
    ad.optimizer_step([w, b], cfg)
    np.testing.assert_allclose(w.data, 0.95)
    np.testing.assert_array_equal(b.data, 1.0)


def test_cosine_schedule_endpoints():
    # the final update of a run uses min_lr
    assert ad.cosine_lr(1.0, 0, 11) == pytest.approx(1.0)
    assert ad.cosine_lr(1.0, 5, 11) == pytest.approx(0.5)
    assert ad.cosine_lr(1.0, 10, 11, min_lr=0.1) == pytest.approx(0.1)


# -- properties -----------------------------------------------------------------

finite = st.floats(-20, 20, allow_nan=False, width=64)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=finite))
def test_softmax_rows_sum_to_one(x):
    out = ad.softmax(Tensor(x, dtype=np.float64)).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, rtol=1e-12)
    assert (out >= 0).all()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 6), elements=finite), arrays(np.float64, (2, 6), elements=finite))
def test_feature_distance_triangle(u, v):
    w = (u + v) / 2
    d = lambda a, b: ad.feature_distance(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).item()
    assert d(u, v) <= d(u, w) + d(w, v) + 1e-9
