import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hcef.model_core import (
    Batch,
    LossModel,
    accuracy,
    init_model,
    logistic_smoothness,
    loss,
    sgd_step,
    stochastic_gradient,
)


def _problem(kind, seed, D=4, C=3, H=5, b=7):
    rng = np.random.default_rng(seed)
    lm = LossModel(kind, D, C, hidden=H if kind == "mlp" else 0)
    batch = Batch(rng.standard_normal((b, D)), rng.integers(0, C, size=b))
    return lm, rng.standard_normal(lm.dim) * 0.5, batch


def central_difference(f, x, eps=1e-5):
    g = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = eps
        g[i] = (f(x + e) - f(x - e)) / (2 * eps)
    return g


@pytest.mark.parametrize("kind", ["logistic", "mlp"])
@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(kind, seed):
    lm, w, batch = _problem(kind, seed)
    g = stochastic_gradient(w, batch, lm)
    fd = central_difference(lambda v: loss(v, batch, lm), w)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-4


def test_zero_logistic_model_has_log_c_loss():
    lm, _, batch = _problem("logistic", 0)
    assert loss(np.zeros(lm.dim), batch, lm) == pytest.approx(np.log(lm.n_classes), rel=1e-12)


@given(st.integers(0, 10_000))
def test_loss_is_non_negative_and_finite(seed):
    for kind in ("logistic", "mlp"):
        lm, w, batch = _problem(kind, seed)
        v = loss(w * 10, batch, lm)
        assert np.isfinite(v) and v >= 0


def test_batch_gradients_average_to_full_gradient():
    # equal-size disjoint batches covering the data: the mean gradient is exact
    lm, w, _ = _problem("logistic", 3)
    rng = np.random.default_rng(3)
    X, y = rng.standard_normal((12, 4)), rng.integers(0, 3, size=12)
    full = stochastic_gradient(w, Batch(X, y), lm)
    parts = [stochastic_gradient(w, Batch(X[i : i + 3], y[i : i + 3]), lm) for i in range(0, 12, 3)]
    np.testing.assert_allclose(np.mean(parts, axis=0), full, rtol=1e-12, atol=1e-15)


@given(
    st.lists(st.floats(-5, 5), min_size=3, max_size=3),
    st.lists(st.floats(-5, 5), min_size=3, max_size=3),
    st.floats(1e-3, 2),
)
def test_sgd_step_is_affine(g1, g2, eta):
    m = np.array([0.3, -1.0, 2.0])
    g1, g2 = np.array(g1), np.array(g2)
    once = sgd_step(m, g1 + g2, eta)
    twice = sgd_step(sgd_step(m, g1, eta), g2, eta)
    np.testing.assert_allclose(once, twice, atol=1e-12)


def test_shape_mismatch_and_non_finite_gradient():
    m = np.zeros(3)
    with pytest.raises(ValueError):
        sgd_step(m, np.zeros(4), 0.1)
    with pytest.raises(FloatingPointError):
        sgd_step(m, np.array([0.0, np.nan, 1.0]), 0.1)
    with pytest.raises(ValueError):
        sgd_step(m, np.zeros(3), 0.0)
    lm, w, batch = _problem("logistic", 0)
    with pytest.raises(ValueError):
        loss(w[:-1], batch, lm)


def test_smoothness_bounds_the_hessian():
    rng = np.random.default_rng(7)
    X = rng.standard_normal((40, 3)) * [1.0, 2.0, 0.5]
    y = rng.integers(0, 3, size=40)
    lm = LossModel("logistic", 3, 3)
    batch = Batch(X, y)
    L = logistic_smoothness(X)
    for _ in range(3):
        w = rng.standard_normal(lm.dim)
        Hess = np.array(
            [
                (stochastic_gradient(w + e, batch, lm) - stochastic_gradient(w - e, batch, lm)) / 2e-5
                for e in np.eye(lm.dim) * 1e-5
            ]
        )
        assert np.linalg.eigvalsh(0.5 * (Hess + Hess.T))[-1] <= L * (1 + 1e-6)


def test_accuracy_of_a_perfect_separator():
    lm = LossModel("logistic", 2, 2)
    X = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 0.1]])
    y = np.array([0, 1, 0])
    w = np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0])  # class scores x0 and x1
    assert accuracy(w, Batch(X, y), lm) == 1.0


def test_model_initialisation():
    assert not init_model(LossModel("logistic", 3, 2)).any()
    lm = LossModel("mlp", 3, 2, hidden=4)
    with pytest.raises(ValueError):
        init_model(lm)
    a = init_model(lm, np.random.default_rng(1))
    b = init_model(lm, np.random.default_rng(1))
    assert a.shape == (lm.dim,) and np.array_equal(a, b)


def test_loss_model_validation():
    with pytest.raises(ValueError):
        LossModel("svm", 2, 2)
    with pytest.raises(ValueError):
        LossModel("mlp", 2, 2, hidden=0)
    with pytest.raises(ValueError):
        LossModel("logistic", 2, 1)
    with pytest.raises(ValueError):
        Batch(np.zeros((3, 2)), np.zeros(2, dtype=int))
