"""Least-squares machinery for conditional expectations and martingale densities.

Two finite bases stand in for the test functions of the representation
theory: tensor polynomials up to a total degree (rescaled to [-1, 1] per
axis for conditioning) and piecewise-constant indicators on a per-axis
grid over the domain's bounding box.  ``fit_conditional`` projects a
terminal-measurable target onto functions of the state at one step;
``extract_densities`` regresses the increments of a target martingale on
``basis(X_k) * dM^j_k`` to recover the integrand densities against the
coordinate martingales.
"""

from __future__ import annotations

import itertools
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .domain import DomainSpec
from .engine import PathBundle
from .errors import EllipticityError, IllPosedError, InputError


@dataclass(frozen=True)
class RegressionBasis:
    """Finite function system over the domain's bounding box."""

    kind: str
    bounds: np.ndarray  # (d, 2) array of per-axis (low, high)
    degree: int = 0
    cells: int = 0

    @staticmethod
    def polynomial(degree: int, domain: DomainSpec) -> "RegressionBasis":
        """Tensor monomials with total degree at most ``degree``."""
        if degree < 0:
            raise InputError("degree must be >= 0")
        lo, hi = domain.bounding_box()
        return RegressionBasis(kind="poly", bounds=np.column_stack([lo, hi]), degree=degree)

    @staticmethod
    def piecewise_constant(cells: int, domain: DomainSpec) -> "RegressionBasis":
        """Indicators of ``cells`` half-open intervals per axis (last one closed)."""
        if cells < 1:
            raise InputError("cells must be >= 1")
        lo, hi = domain.bounding_box()
        return RegressionBasis(kind="pwc", bounds=np.column_stack([lo, hi]), cells=cells)

    def __post_init__(self):
        if self.kind not in ("poly", "pwc"):
            raise InputError(f"unknown basis kind {self.kind!r}")

    @property
    def dimension(self) -> int:
        return self.bounds.shape[0]

    def _exponents(self) -> list[tuple[int, ...]]:
        d = self.dimension
        exps = [
            e
            for e in itertools.product(range(self.degree + 1), repeat=d)
            if sum(e) <= self.degree
        ]
        exps.sort(key=lambda e: (sum(e), e))
        return exps

    @property
    def size(self) -> int:
        if self.kind == "poly":
            return len(self._exponents())
        return self.cells ** self.dimension

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Design matrix ``(n, size)`` of basis values at the points ``x``."""
        pts = np.asarray(x, dtype=float)
        if pts.ndim == 1:
            pts = pts[None, :]
        if pts.shape[1] != self.dimension:
            raise InputError("points do not match basis dimension")
        lo = self.bounds[:, 0]
        hi = self.bounds[:, 1]
        if self.kind == "poly":
            scaled = 2.0 * (pts - lo) / (hi - lo) - 1.0
            powers = [None]  # power 0 handled implicitly
            if self.degree >= 1:
                powers.append(scaled)
            for _ in range(2, self.degree + 1):
                powers.append(powers[-1] * scaled)
            exps = self._exponents()
            out = np.empty((pts.shape[0], len(exps)))
            for col, e in enumerate(exps):
                acc = None
                for axis, p in enumerate(e):
                    if p:
                        term = powers[p][:, axis]
                        acc = term if acc is None else acc * term
                out[:, col] = 1.0 if acc is None else acc
            return out
        width = (hi - lo) / self.cells
        idx = np.clip(((pts - lo) / width).astype(int), 0, self.cells - 1)
        flat = np.zeros(pts.shape[0], dtype=int)
        for axis in range(self.dimension):
            flat = flat * self.cells + idx[:, axis]
        design = np.zeros((pts.shape[0], self.size))
        design[np.arange(pts.shape[0]), flat] = 1.0
        return design

    def describe(self) -> dict:
        out = {"kind": self.kind, "bounds": self.bounds.tolist()}
        if self.kind == "poly":
            out["degree"] = self.degree
        else:
            out["cells"] = self.cells
        return out


def _weighted_lstsq(design, targets, weights):
    """Minimal-norm weighted least squares with diagnostics.

    Returns ``(coeffs, rank, cond, fitted)``.  Well-conditioned designs
    are solved through the normal equations (the Gram matrix has a
    handful of rows here, so this is far cheaper than an SVD); a
    rank-deficient design falls back to the SVD minimal-norm solution
    and is reported with a warning.
    """
    if weights is None:
        dw, tw = design, targets
    else:
        root = np.sqrt(weights)[:, None]
        dw = design * root
        tw = targets * root
    gram = dw.T @ dw
    evs = np.linalg.eigvalsh(gram)
    if evs[0] > 1e-13 * max(evs[-1], 0.0) and evs[0] > 0.0:
        coeffs = np.linalg.solve(gram, dw.T @ tw)
        cond = float(np.sqrt(evs[-1] / evs[0]))
        rank = design.shape[1]
    else:
        coeffs, _, rank, svals = np.linalg.lstsq(dw, tw, rcond=None)
        warnings.warn(
            f"rank-deficient regression design (rank {rank} < {design.shape[1]}); "
            "using the minimal-norm solution",
            stacklevel=3,
        )
        cond = float(svals[0] / svals[-1]) if svals[-1] > 0 else np.inf
    return coeffs, rank, cond, design @ coeffs


@dataclass(frozen=True)
class ConditionalEstimate:
    """Linear-in-basis estimate of a conditional expectation at one step."""

    step: int
    basis: RegressionBasis
    coefficients: np.ndarray  # (size, n_targets)
    r_squared: np.ndarray  # (n_targets,)
    scalar: bool

    def predict(self, x: np.ndarray) -> np.ndarray:
        vals = self.basis.evaluate(x) @ self.coefficients
        return vals[:, 0] if self.scalar else vals

    def to_json_dict(self) -> dict:
        return {
            "step": self.step,
            "basis": self.basis.describe(),
            "coefficients": self.coefficients.tolist(),
            "r_squared": self.r_squared.tolist(),
        }


def fit_from_design(
    design: np.ndarray,
    step: int,
    targets: np.ndarray,
    basis: RegressionBasis,
    weights: np.ndarray | None = None,
) -> ConditionalEstimate:
    """Same as :func:`fit_conditional` with a precomputed design matrix."""
    y = np.asarray(targets, dtype=float)
    scalar = y.ndim == 1
    if scalar:
        y = y[:, None]
    if y.shape[0] != design.shape[0]:
        raise InputError("targets must have one row per path")
    if design.shape[0] < basis.size:
        raise IllPosedError(
            f"{design.shape[0]} paths cannot identify {basis.size} basis coefficients; "
            "enlarge the ensemble or shrink the basis"
        )
    coeffs, _, _, fitted = _weighted_lstsq(design, y, weights)
    w = weights if weights is not None else np.full(y.shape[0], 1.0 / y.shape[0])
    w = w / w.sum()
    mean = w @ y
    ss_tot = w @ (y - mean) ** 2
    ss_res = w @ (y - fitted) ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        r2 = np.where(ss_tot > 0, 1.0 - ss_res / np.where(ss_tot > 0, ss_tot, 1.0), 1.0)
    return ConditionalEstimate(
        step=step, basis=basis, coefficients=coeffs, r_squared=r2, scalar=scalar
    )


def fit_conditional(
    bundle: PathBundle,
    step: int,
    targets: np.ndarray,
    basis: RegressionBasis,
    weights: np.ndarray | None = None,
) -> ConditionalEstimate:
    """Regress per-path targets on basis functions of the state at ``step``.

    Zero-variance targets get ``R^2 = 1`` by convention.  ``weights``
    defaults to the bundle's path weights when the bundle carries any.
    """
    if not 0 <= step <= bundle.n_steps:
        raise InputError(f"step {step} outside [0, {bundle.n_steps}]")
    if weights is None and bundle.weights is not None:
        weights = bundle.path_weights()
    design = basis.evaluate(np.ascontiguousarray(bundle.states[:, step, :]))
    return fit_from_design(design, step, targets, basis, weights)


@dataclass(frozen=True)
class RepresentationEstimate:
    """Per-step densities of a target martingale against the coordinate martingales.

    ``coefficients[k, b, j, i]`` multiplies ``basis_b(x)`` in the density
    of target component ``i`` against ``dM^j`` over step ``k``.
    """

    basis: RegressionBasis
    coefficients: np.ndarray  # (K, size, d, n_targets)
    residual_variance: np.ndarray  # (K, n_targets)
    target_variance: np.ndarray  # (K, n_targets)
    gram_condition: np.ndarray  # (K,)
    effective_samples: np.ndarray  # (K,)
    scalar: bool

    @property
    def n_steps(self) -> int:
        return self.coefficients.shape[0]

    def to_json_dict(self) -> dict:
        return {
            "basis": self.basis.describe(),
            "steps": [
                {
                    "coefficients": self.coefficients[k].tolist(),
                    "residual_variance": self.residual_variance[k].tolist(),
                    "target_variance": self.target_variance[k].tolist(),
                    "gram_condition": float(self.gram_condition[k]),
                    "effective_samples": float(self.effective_samples[k]),
                }
                for k in range(self.n_steps)
            ],
        }


def evaluate_density(estimate: RepresentationEstimate, step: int, x) -> np.ndarray:
    """Density vector at one state: shape ``(d,)``, or ``(n_targets, d)`` jointly."""
    if not 0 <= step < estimate.n_steps:
        raise InputError(f"step {step} outside [0, {estimate.n_steps})")
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    if single:
        pts = pts[None, :]
    vals = estimate.basis.evaluate(pts)  # (n, B)
    dens = np.einsum("nb,bji->nji", vals, estimate.coefficients[step])  # (n, d, q)
    if estimate.scalar:
        out = dens[:, :, 0]
        return out[0] if single else out
    out = np.swapaxes(dens, 1, 2)  # (n, q, d)
    return out[0] if single else out


def _covariation_check(dm: np.ndarray, weights: np.ndarray, step: int) -> None:
    cov = np.einsum("n,ni,nj->ij", weights, dm, dm)
    eigs = np.linalg.eigvalsh(cov)
    if eigs[0] <= 1e-12 * max(eigs[-1], 1e-300):
        raise EllipticityError(
            f"realized covariation of the coordinate martingales is not strictly "
            f"positive definite at step {step} (eigenvalues {eigs.tolist()}); "
            "density extraction requires a strictly positive definite bracket matrix"
        )


def extract_densities(
    bundle: PathBundle,
    target_increments: np.ndarray,
    basis: RegressionBasis,
    weights: np.ndarray | None = None,
    threads: int = 1,
) -> RepresentationEstimate:
    """Per step, least squares of ``dN_k`` on the predictors ``basis(X_k) * dM^j_k``.

    ``target_increments`` is ``(n, K)`` or ``(n, K, q)``; the increment for
    step ``k`` may depend on information up to ``t_{k+1}`` (caller
    contract: adapted increments).
    """
    dn = np.asarray(target_increments, dtype=float)
    scalar = dn.ndim == 2
    if scalar:
        dn = dn[..., None]
    n, K, d = bundle.mart_increments.shape
    if dn.shape[:2] != (n, K):
        raise InputError("target increments must be indexed (path, step)")
    q = dn.shape[2]
    B = basis.size
    if n < B * d:
        raise IllPosedError(
            f"{n} paths cannot identify {B * d} density coefficients; "
            "enlarge the ensemble or shrink the basis"
        )
    if weights is None and bundle.weights is not None:
        weights = bundle.path_weights()
    w_norm = weights / weights.sum() if weights is not None else np.full(n, 1.0 / n)

    coefficients = np.empty((K, B, d, q))
    resid_var = np.empty((K, q))
    target_var = np.empty((K, q))
    gram_cond = np.empty(K)
    ess = np.empty(K)

    def solve_step(k: int) -> None:
        dm = bundle.mart_increments[:, k, :]
        _covariation_check(dm, w_norm, k)
        design = (basis.evaluate(bundle.states[:, k, :])[:, :, None] * dm[:, None, :])
        design = design.reshape(n, B * d)
        beta, _, cond, fitted = _weighted_lstsq(design, dn[:, k, :], weights)
        coefficients[k] = beta.reshape(B, d, q)
        resid = dn[:, k, :] - fitted
        resid_var[k] = w_norm @ resid**2
        target_var[k] = w_norm @ (dn[:, k, :] - w_norm @ dn[:, k, :]) ** 2
        gram_cond[k] = cond**2 if np.isfinite(cond) else np.inf
        ess[k] = 1.0 / np.sum(w_norm**2)

    if threads > 1 and K > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(solve_step, range(K)))
    else:
        for k in range(K):
            solve_step(k)

    return RepresentationEstimate(
        basis=basis,
        coefficients=coefficients,
        residual_variance=resid_var,
        target_variance=target_var,
        gram_condition=gram_cond,
        effective_samples=ess,
        scalar=scalar,
    )
