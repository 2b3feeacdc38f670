import numpy as np
import pytest

from bsdelab import (
    CoefficientField,
    DomainSpec,
    EllipticityError,
    InputError,
    NumericalError,
    check_ellipticity,
    divergence_drift,
    evaluate,
    factor,
    field_from_name,
)


@pytest.fixture
def box2():
    return DomainSpec.box([[0.0, 1.0], [0.0, 1.0]])


def scalar_field(fn, dimension, lam=0.5):
    def evaluator(x):
        return fn(x)[:, None, None] * np.eye(dimension)

    return CoefficientField(evaluator=evaluator, ellipticity=lam, dimension=dimension)


def test_evaluate_identity():
    f = field_from_name("identity", 2)
    a = evaluate(f, [0.3, 0.7])
    assert np.array_equal(a, np.eye(2))


def test_evaluate_quadratic_scalar():
    f = scalar_field(lambda x: 1.0 + x[:, 0] ** 2, 2)
    a = evaluate(f, [1.0, 0.0])
    assert np.allclose(a, 2.0 * np.eye(2))


def test_evaluate_symmetrizes():
    raw = np.array([[1.0, 0.2], [0.0, 1.0]])
    f = CoefficientField(
        evaluator=lambda x: np.broadcast_to(raw, (x.shape[0], 2, 2)),
        ellipticity=0.5,
        dimension=2,
    )
    a = evaluate(f, [0.5, 0.5])
    assert np.allclose(a, [[1.0, 0.1], [0.1, 1.0]])


def test_evaluate_rejects_nonfinite():
    f = CoefficientField(
        evaluator=lambda x: np.full((x.shape[0], 1, 1), np.nan),
        ellipticity=1.0,
        dimension=1,
    )
    with pytest.raises(NumericalError):
        evaluate(f, [0.5])


def test_lambda_above_one_rejected():
    with pytest.raises(InputError):
        CoefficientField(evaluator=lambda x: None, ellipticity=1.5, dimension=1)


def test_check_ellipticity_identity(box2):
    f = field_from_name("identity", 2)
    report = check_ellipticity(f, box2, n_samples=500, seed=9)
    assert report.passed
    assert abs(report.min_quadratic_form - 1.0) < 1e-12
    assert abs(report.max_quadratic_form - 1.0) < 1e-12


def test_check_ellipticity_diag_pass(box2):
    f = field_from_name("diag:2,0.5", 2)
    report = check_ellipticity(f, box2, n_samples=5000, seed=9)
    assert report.passed
    assert report.min_quadratic_form >= 0.5 - 1e-12
    assert report.max_quadratic_form <= 2.0 + 1e-12


def test_check_ellipticity_finds_witness(box2):
    # brute-force oracle: min eigenvalue of diag(2, 0.1) is 0.1 < declared 0.5
    bad = CoefficientField(
        evaluator=lambda x: np.broadcast_to(np.diag([2.0, 0.1]), (x.shape[0], 2, 2)),
        ellipticity=0.5,
        dimension=2,
    )
    report = check_ellipticity(bad, box2, n_samples=10_000, seed=10)
    assert not report.passed
    assert report.min_quadratic_form < 0.5
    # the witnessing direction concentrates near the weak axis e2
    assert abs(report.witness_direction[1]) > abs(report.witness_direction[0])


def test_check_ellipticity_planted_violation(box2):
    # violation on >= 10% of the volume is found with 1e4 samples
    def evaluator(x):
        weak = x[:, 0] >= 0.9
        scale = np.where(weak, 0.1, 1.0)
        return scale[:, None, None] * np.eye(2)

    planted = CoefficientField(evaluator=evaluator, ellipticity=0.5, dimension=2)
    report = check_ellipticity(planted, box2, n_samples=10_000, seed=11)
    assert not report.passed
    assert report.min_quadratic_form < 0.2
    assert report.witness_point[0] >= 0.9


def test_factor_examples():
    assert np.array_equal(factor(np.eye(3)), np.eye(3))
    assert np.allclose(factor(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))
    lower = factor(np.array([[2.0, 1.0], [1.0, 2.0]]))
    assert np.allclose(lower, [[1.41421356, 0.0], [0.70710678, 1.22474487]], atol=1e-8)
    assert np.linalg.norm(lower @ lower.T - [[2.0, 1.0], [1.0, 2.0]]) < 1e-10


def test_factor_reconstruction_random():
    rng = np.random.default_rng(12)
    for _ in range(20):
        m = rng.normal(size=(3, 3))
        spd = m @ m.T + 0.1 * np.eye(3)
        lower = factor(spd)
        assert np.linalg.norm(lower @ lower.T - spd) < 1e-10


def test_factor_batched_scalar():
    a = np.array([[[4.0]], [[9.0]]])
    assert np.array_equal(factor(a), np.array([[[2.0]], [[3.0]]]))


def test_factor_rejects_indefinite():
    with pytest.raises(EllipticityError, match="minor"):
        factor(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(EllipticityError):
        factor(np.array([[[-1.0]]]))


def test_divergence_drift_constant(box2):
    f = field_from_name("diag:2,0.5", 2)
    assert np.array_equal(divergence_drift(f, [0.5, 0.5], box2), [0.0, 0.0])


def test_divergence_drift_affine_exact():
    box = DomainSpec.box([[0.0, 1.0]])
    f = CoefficientField(
        evaluator=lambda x: (1.0 + x[:, 0])[:, None, None],
        ellipticity=0.5,
        dimension=1,
        derivative_step=1e-4,
    )
    assert abs(divergence_drift(f, [0.5], box) - 0.5) < 1e-12
    # one-sided at the boundary, still exact for affine coefficients
    assert abs(divergence_drift(f, [0.0], box) - 0.5) < 1e-12
    assert abs(divergence_drift(f, [1.0], box) - 0.5) < 1e-12


def test_divergence_drift_quadratic(box2):
    def evaluator(x):
        n = x.shape[0]
        out = np.zeros((n, 2, 2))
        out[:, 0, 0] = 1.0 + x[:, 0] ** 2
        out[:, 1, 1] = 1.0
        return out

    f = CoefficientField(evaluator=evaluator, ellipticity=0.4, dimension=2,
                         derivative_step=1e-4)
    drift = divergence_drift(f, [0.3, 0.0], box2)
    # analytic: d1 a^{11} = 2 x1, halved; central differences exact on quadratics
    assert np.allclose(drift, [0.3, 0.0], atol=1e-10)


def test_registry():
    assert field_from_name("identity", 3).constant
    assert field_from_name("diag:1,2", 2).ellipticity == 0.5
    f = field_from_name("smooth-aniso", 1)
    a = evaluate(f, [[0.25]])
    assert np.allclose(a, 1.5)
    cb = field_from_name("checkerboard:0.5", 2)
    a0 = evaluate(cb, [0.1, 0.1])
    a1 = evaluate(cb, [0.6, 0.1])
    assert np.allclose(a0, 0.5 * np.eye(2))
    assert np.allclose(a1, 2.0 * np.eye(2))
    with pytest.raises(InputError):
        field_from_name("bogus", 1)
    with pytest.raises(InputError):
        field_from_name("diag:1,2,3", 2)
