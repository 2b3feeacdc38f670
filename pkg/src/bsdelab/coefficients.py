"""Diffusion coefficient fields: evaluation, ellipticity checks, factorization, drift.

A field supplies the symmetric matrix ``a(x)`` entering the generator
``(1/2) sum_j d_j a^{ij} d_i``.  The simulator needs its Cholesky factor
(so that the coordinate-martingale increments have the right covariance)
and the divergence drift ``b^i = (1/2) sum_j d_j a^{ij}``, approximated
here by finite differences because fields are only assumed evaluable,
not differentiable in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .domain import DomainSpec, contains
from .errors import EllipticityError, InputError, NumericalError

# Componentwise asymmetry users may expect to survive symmetrization unnoticed.
SYMMETRY_TOL = 1e-12


@dataclass(frozen=True)
class CoefficientField:
    """Matrix field ``a(x)`` with declared ellipticity constant.

    ``evaluator`` maps an ``(n, d)`` batch of points to ``(n, d, d)``
    matrices (a single point is also accepted).  It must be safe for
    concurrent calls; all functions here are pure.  ``derivative_step``
    is the finite-difference step for the divergence drift; ``None``
    defers to ``1e-4 * domain diameter`` at call time.
    """

    evaluator: Callable[[np.ndarray], np.ndarray]
    ellipticity: float
    dimension: int
    derivative_step: float | None = None
    name: str = "custom"
    constant: bool = False  # a state-independent field has exactly zero drift

    def __post_init__(self):
        if not 0.0 < self.ellipticity <= 1.0:
            raise InputError(
                "ellipticity constant must satisfy 0 < lambda <= 1 "
                "(lambda |xi|^2 <= xi' a xi <= |xi|^2 / lambda forces lambda <= 1)"
            )
        if self.dimension < 1:
            raise InputError("dimension must be >= 1")
        if self.derivative_step is not None and self.derivative_step <= 0:
            raise InputError("derivative_step must be positive")


@dataclass(frozen=True)
class EllipticityReport:
    """Sampled bounds on the Rayleigh quotient of ``a`` over the domain."""

    min_quadratic_form: float
    max_quadratic_form: float
    declared_lambda: float
    passed: bool
    n_samples: int
    witness_point: np.ndarray | None = None
    witness_direction: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "min_quadratic_form": self.min_quadratic_form,
            "max_quadratic_form": self.max_quadratic_form,
            "declared_lambda": self.declared_lambda,
            "passed": self.passed,
            "n_samples": self.n_samples,
            "witness_point": None if self.witness_point is None else self.witness_point.tolist(),
            "witness_direction": (
                None if self.witness_direction is None else self.witness_direction.tolist()
            ),
        }


def evaluate(field: CoefficientField, x) -> np.ndarray:
    """Symmetrized matrix ``(a(x) + a(x)')/2``; raises on non-finite entries.

    Accepts one point ``(d,)`` or a batch ``(n, d)`` and returns
    ``(d, d)`` or ``(n, d, d)`` accordingly.
    """
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    if single:
        pts = pts[None, :]
    if pts.shape[1] != field.dimension:
        raise InputError("point dimension does not match coefficient field")
    raw = np.asarray(field.evaluator(pts), dtype=float)
    if raw.shape != (pts.shape[0], field.dimension, field.dimension):
        raise InputError(
            f"evaluator returned shape {raw.shape}, "
            f"expected {(pts.shape[0], field.dimension, field.dimension)}"
        )
    if not np.all(np.isfinite(raw)):
        bad = np.argwhere(~np.isfinite(raw))[0]
        raise NumericalError(f"coefficient evaluator returned non-finite entry at index {bad}")
    sym = 0.5 * (raw + np.swapaxes(raw, -1, -2))
    return sym[0] if single else sym


def factor(matrix: np.ndarray) -> np.ndarray:
    """Lower-triangular ``L`` with ``L L' = matrix``; batched over leading axes.

    Raises :class:`EllipticityError` naming the offending leading minor
    when the input is not positive definite.
    """
    a = np.asarray(matrix, dtype=float)
    if a.shape[-1] == 1:
        # Scalar case: avoid LAPACK dispatch overhead in the hot path.
        if np.any(a <= 0.0):
            raise EllipticityError("leading minor 1 is not positive")
        return np.sqrt(a)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        flat = a.reshape(-1, a.shape[-2], a.shape[-1])
        for m in flat:
            for k in range(1, m.shape[0] + 1):
                if np.linalg.det(m[:k, :k]) <= 0.0:
                    raise EllipticityError(
                        f"leading minor {k} is not positive (matrix is not positive definite)"
                    ) from None
        raise EllipticityError("matrix is not positive definite") from None


def divergence_drift(field: CoefficientField, x, domain: DomainSpec) -> np.ndarray:
    """Finite-difference approximation of ``b^i = (1/2) sum_j d_j a^{ij}``.

    Central differences with step ``h``; a stencil point that would leave
    the closure collapses to the evaluation point, turning that term into
    a one-sided difference.  Exact (up to rounding) for affine fields.
    """
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    if single:
        pts = pts[None, :]
    if field.constant:
        out = np.zeros_like(pts)
        return out[0] if single else out
    h = field.derivative_step
    if h is None:
        h = 1e-4 * domain.diameter()
    d = field.dimension
    drift = np.zeros_like(pts)
    for j in range(d):
        step = np.zeros(d)
        step[j] = h
        xp = pts + step
        xm = pts - step
        ok_p = contains(domain, xp)
        ok_m = contains(domain, xm)
        xp = np.where(ok_p[:, None], xp, pts)
        xm = np.where(ok_m[:, None], xm, pts)
        denom = xp[:, j] - xm[:, j]
        degenerate = denom == 0.0
        denom[degenerate] = 1.0
        diff = (evaluate(field, xp)[:, :, j] - evaluate(field, xm)[:, :, j]) / denom[:, None]
        diff[degenerate] = 0.0
        drift += diff
    drift *= 0.5
    if not np.all(np.isfinite(drift)):
        raise NumericalError("divergence drift evaluated to non-finite values")
    return drift[0] if single else drift


def check_ellipticity(
    field: CoefficientField,
    domain: DomainSpec,
    n_samples: int,
    seed: int,
) -> EllipticityReport:
    """Sample the quadratic form over the domain and test the declared bounds.

    Draws ``n_samples`` uniform points of the closure (rejection from the
    bounding box) paired with uniform unit directions, and reports the
    extreme values of ``xi' a(x) xi / |xi|^2`` together with a pass flag
    for ``lambda <= min`` and ``max <= 1/lambda``.
    """
    if n_samples < 1:
        raise InputError("n_samples must be >= 1")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    lo, hi = domain.bounding_box()
    points = np.empty((n_samples, field.dimension))
    filled = 0
    while filled < n_samples:
        cand = rng.uniform(lo, hi, size=(2 * (n_samples - filled) + 16, field.dimension))
        cand = cand[contains(domain, cand)]
        take = min(len(cand), n_samples - filled)
        points[filled:filled + take] = cand[:take]
        filled += take
    directions = rng.normal(size=(n_samples, field.dimension))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    a = evaluate(field, points)
    quad = np.einsum("ni,nij,nj->n", directions, a, directions)
    i_min = int(np.argmin(quad))
    i_max = int(np.argmax(quad))
    lam = field.ellipticity
    passed = bool(quad[i_min] >= lam - 1e-12 and quad[i_max] <= 1.0 / lam + 1e-12)
    witness = None if passed else (i_min if quad[i_min] < lam else i_max)
    return EllipticityReport(
        min_quadratic_form=float(quad[i_min]),
        max_quadratic_form=float(quad[i_max]),
        declared_lambda=lam,
        passed=passed,
        n_samples=n_samples,
        witness_point=None if witness is None else points[witness].copy(),
        witness_direction=None if witness is None else directions[witness].copy(),
    )


# -- built-in named fields ---------------------------------------------------


def _constant_evaluator(matrix: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    def evaluator(x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(matrix, (x.shape[0],) + matrix.shape)

    return evaluator


def identity_field(dimension: int) -> CoefficientField:
    return CoefficientField(
        evaluator=_constant_evaluator(np.eye(dimension)),
        ellipticity=1.0,
        dimension=dimension,
        name="identity",
        constant=True,
    )


def diagonal_field(diag) -> CoefficientField:
    values = np.asarray(diag, dtype=float)
    if np.any(values <= 0):
        raise InputError("diagonal entries must be positive")
    lam = min(float(values.min()), 1.0 / float(values.max()))
    return CoefficientField(
        evaluator=_constant_evaluator(np.diag(values)),
        ellipticity=lam,
        dimension=len(values),
        name="diag:" + ",".join(repr(v) for v in values.tolist()),
        constant=True,
    )


def smooth_aniso_field(dimension: int) -> CoefficientField:
    """``a(x) = (1 + sin(2 pi x_1)/2) I``; eigenvalues range over [1/2, 3/2]."""

    def evaluator(x: np.ndarray) -> np.ndarray:
        scale = 1.0 + 0.5 * np.sin(2.0 * np.pi * x[:, 0])
        return scale[:, None, None] * np.eye(dimension)

    return CoefficientField(
        evaluator=evaluator, ellipticity=0.5, dimension=dimension, name="smooth-aniso"
    )


def checkerboard_field(lam: float, dimension: int) -> CoefficientField:
    """Piecewise-constant stress field alternating between ``lam I`` and ``I/lam``.

    Cell parity is taken from ``sum_i floor(2 x_i)``, giving half-unit
    checker cells on the unit box.
    """
    if not 0.0 < lam <= 1.0:
        raise InputError("checkerboard contrast must satisfy 0 < lambda <= 1")

    def evaluator(x: np.ndarray) -> np.ndarray:
        parity = np.floor(2.0 * x).sum(axis=1).astype(int) % 2
        scale = np.where(parity == 0, lam, 1.0 / lam)
        return scale[:, None, None] * np.eye(dimension)

    return CoefficientField(
        evaluator=evaluator, ellipticity=lam, dimension=dimension, name=f"checkerboard:{lam!r}"
    )


def field_from_name(name: str, dimension: int) -> CoefficientField:
    """Registry lookup: ``identity``, ``diag:<c1,...>``, ``smooth-aniso``, ``checkerboard:<lam>``."""
    if name == "identity":
        return identity_field(dimension)
    if name == "smooth-aniso":
        return smooth_aniso_field(dimension)
    if name.startswith("diag:"):
        values = [float(v) for v in name[len("diag:"):].split(",")]
        if len(values) != dimension:
            raise InputError(f"diag field needs {dimension} entries, got {len(values)}")
        return diagonal_field(values)
    if name.startswith("checkerboard:"):
        return checkerboard_field(float(name[len("checkerboard:"):]), dimension)
    raise InputError(f"unknown coefficient field {name!r}")
