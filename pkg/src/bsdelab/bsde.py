"""Regression-based solvers for BSDEs driven by the coordinate martingales.

The primary solver iterates the functional fixed-point map for the
finite-variation part ``V`` of ``Y = N - V``:

1. targets ``xi + V_T`` are projected onto functions of the state at each
   step, giving ``N_t``;
2. ``Y_t = N_t(X_t) - V_t`` pathwise (the decomposition is kept exact per
   path);
3. ``Z_t`` comes from regressing increments of the fitted ``N`` on
   ``basis(X_t) * dM^j`` when the driver needs it;
4. ``V`` is rebuilt by adapted left-endpoint quadrature of
   ``f(t, Y_t, Z_t)``.

For drivers with ``lipschitz * horizon`` above 1/2 the time interval is
split into sub-windows of length at most ``0.5 / lipschitz`` and solved
backward, each window's terminal being the previous window's pathwise
``Y`` at the shared boundary; this keeps the map a contraction.

A classical one-sweep backward-Euler recursion with the same regression
machinery serves as an independent cross-check, and
``stochastic_solution`` evaluates the probabilistic solution
``u(t, mu) = E[phi(X_t) + V(t)_t]`` of the semilinear Neumann problem.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .engine import PathBundle, SimulationConfig, simulate
from .errors import InputError, NumericalError
from .regression import (
    ConditionalEstimate,
    RegressionBasis,
    RepresentationEstimate,
    _weighted_lstsq,
    fit_conditional,
    fit_from_design,
)

# Windows longer than this (times the Lipschitz constant) break contraction.
_CONTRACTION_BUDGET = 0.5
# Terminal-fit quality below which the default polynomial basis is swapped
# for a local piecewise-constant basis (d <= 2 only).
_FALLBACK_R2 = 0.5
_FALLBACK_CELLS = 8


# -- problem description -------------------------------------------------------


@dataclass(frozen=True)
class TerminalFunction:
    """Bounded measurable terminal data ``phi`` on the closed domain."""

    phi: Callable[[np.ndarray], np.ndarray]
    name: str = "custom"

    def evaluate(self, states: np.ndarray, dim_y: int) -> np.ndarray:
        vals = np.asarray(self.phi(states), dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.shape != (states.shape[0], dim_y):
            raise InputError(
                f"terminal function returned shape {vals.shape}, "
                f"expected {(states.shape[0], dim_y)}"
            )
        if not np.all(np.isfinite(vals)):
            raise NumericalError("terminal function returned non-finite values")
        return vals


@dataclass(frozen=True)
class BsdeProblem:
    """Driver, terminal data, horizon, and declared Lipschitz constant.

    The driver is called as ``f(t, y, z)`` with ``y`` of shape ``(n, dim_y)``
    and ``z`` of shape ``(n, dim_y, d)`` and must return ``(n, dim_y)``.
    ``z_dependent = False`` lets the solver skip density extraction inside
    the iteration (the driver then receives zeros for ``z``).
    """

    driver: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    lipschitz: float
    terminal: TerminalFunction
    horizon: float
    dim_y: int = 1
    z_dependent: bool = True
    driver_name: str = "custom"

    def __post_init__(self):
        if self.lipschitz < 0:
            raise InputError("lipschitz constant must be >= 0")
        if self.horizon <= 0:
            raise InputError("horizon must be positive")
        if self.dim_y < 1:
            raise InputError("dim_y must be >= 1")
        self._spot_check()

    def _spot_check(self, n: int = 100, state_dim: int = 1) -> None:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(0)))
        t = rng.uniform(0.0, self.horizon, size=n)
        y = rng.normal(size=(n, self.dim_y))
        z = rng.normal(size=(n, self.dim_y, state_dim))
        for i in range(n):
            out = np.asarray(self.driver(float(t[i]), y[i : i + 1], z[i : i + 1]), dtype=float)
            if out.shape != (1, self.dim_y) or not np.all(np.isfinite(out)):
                raise InputError(
                    f"driver returned shape {out.shape} or non-finite values on the probe "
                    f"triple (t={t[i]!r}, y={y[i]!r}, z={z[i]!r})"
                )

    def describe(self) -> dict:
        return {
            "driver": self.driver_name,
            "terminal": self.terminal.name,
            "lipschitz": self.lipschitz,
            "horizon": self.horizon,
            "dim_y": self.dim_y,
            "z_dependent": self.z_dependent,
        }


# -- driver and terminal registries --------------------------------------------


def driver_from_name(name: str) -> tuple[Callable, float, bool]:
    """Returns ``(callable, default_lipschitz, z_dependent)`` for a registry name.

    Names: ``zero``, ``constant:<c>``, ``linear:<a,b>`` (meaning
    ``f = a y + b``), ``sin`` (componentwise ``sin(y)``).
    """
    if name == "zero":
        return (lambda t, y, z: np.zeros_like(y)), 0.0, False
    if name == "sin":
        return (lambda t, y, z: np.sin(y)), 1.0, False
    if name.startswith("constant:"):
        c = float(name[len("constant:"):])
        return (lambda t, y, z: np.full_like(y, c)), 0.0, False
    if name.startswith("linear:"):
        parts = name[len("linear:"):].split(",")
        if len(parts) != 2:
            raise InputError("linear driver needs two parameters: linear:<a,b>")
        a, b = float(parts[0]), float(parts[1])
        return (lambda t, y, z: a * y + b), abs(a), False
    raise InputError(f"unknown driver {name!r}")


def terminal_from_name(name: str) -> TerminalFunction:
    """Names: ``constant:<c>``, ``coordinate:<i>``, ``cospi:<i>``."""
    if name.startswith("constant:"):
        c = float(name[len("constant:"):])
        return TerminalFunction(lambda x, c=c: np.full(x.shape[0], c), name=name)
    if name.startswith("coordinate:"):
        i = int(name[len("coordinate:"):])
        return TerminalFunction(lambda x, i=i: x[:, i].copy(), name=name)
    if name.startswith("cospi:"):
        i = int(name[len("cospi:"):])
        return TerminalFunction(lambda x, i=i: np.cos(np.pi * x[:, i]), name=name)
    raise InputError(f"unknown terminal function {name!r}")


def problem_from_names(
    driver: str,
    terminal: str,
    horizon: float,
    lipschitz: float | None = None,
    dim_y: int = 1,
) -> BsdeProblem:
    fn, default_lip, z_dep = driver_from_name(driver)
    return BsdeProblem(
        driver=fn,
        lipschitz=default_lip if lipschitz is None else lipschitz,
        terminal=terminal_from_name(terminal),
        horizon=horizon,
        dim_y=dim_y,
        z_dependent=z_dep,
        driver_name=driver,
    )


def problem_from_pde(
    pde_driver: Callable[[float, np.ndarray, np.ndarray], np.ndarray],
    terminal: TerminalFunction,
    time: float,
    lipschitz: float,
    z_dependent: bool = True,
    driver_name: str = "custom",
    dim_y: int = 1,
) -> BsdeProblem:
    """BSDE matching the parabolic problem ``u_t - Lu + f(t, u, grad u) = 0``.

    With ``Y_s = u(time - s, X_s)`` the martingale part contributes
    ``+f(time - s, Y, Z) ds`` to ``dY``, so the BSDE driver is the
    time-reflected negation of the PDE driver, and ``u(time, mu)`` is the
    solved ``Y_0`` averaged over the initial law.
    """

    def bsde_driver(s, y, z):
        return -np.asarray(pde_driver(time - s, y, z), dtype=float)

    return BsdeProblem(
        driver=bsde_driver,
        lipschitz=lipschitz,
        terminal=terminal,
        horizon=time,
        dim_y=dim_y,
        z_dependent=z_dependent,
        driver_name=f"pde:{driver_name}",
    )


# -- iteration state and solutions ---------------------------------------------


@dataclass(frozen=True)
class PicardState:
    """One iterate of the functional fixed-point map over a fixed bundle."""

    iterate: int
    v_paths: np.ndarray  # (n, K+1, dim_y), v_paths[:, 0] == 0
    y_fits: tuple[ConditionalEstimate, ...] | None
    z_estimate: RepresentationEstimate | None
    delta: float

    @staticmethod
    def initial(bundle: PathBundle, problem: BsdeProblem) -> "PicardState":
        v = np.zeros((bundle.n_paths, bundle.n_steps + 1, problem.dim_y))
        return PicardState(iterate=0, v_paths=v, y_fits=None, z_estimate=None, delta=math.inf)


@dataclass(frozen=True)
class BsdeSolution:
    """Solved ``(Y, Z)`` summary with Monte Carlo error bars and iteration trace."""

    y0: np.ndarray  # (dim_y,)
    y0_se: np.ndarray  # (dim_y,)
    mean_y: np.ndarray  # (K+1, dim_y) ensemble mean of Y per step
    mean_abs_z: np.ndarray  # (K, dim_y) ensemble mean of |Z| (2-norm over d) per step
    y_fits: tuple[ConditionalEstimate, ...]
    z_estimate: RepresentationEstimate | None
    trace: tuple[tuple[float, ...], ...]  # per window, windows ordered left to right
    converged: bool
    mode: str
    bundle_fingerprint: str
    diagnostics: dict = field(default_factory=dict)

    @property
    def flat_trace(self) -> tuple[float, ...]:
        return tuple(d for window in self.trace for d in window)

    @property
    def trace_nonincreasing(self) -> bool:
        for window in self.trace:
            for a, b in zip(window[1:], window[2:]):
                if b > a:
                    return False
        return True

    def to_json_dict(self) -> dict:
        return {
            "y0": self.y0.tolist(),
            "y0_standard_error": self.y0_se.tolist(),
            "converged": self.converged,
            "mode": self.mode,
            "trace": [list(w) for w in self.trace],
            "bundle_fingerprint": self.bundle_fingerprint,
            "diagnostics": self.diagnostics,
        }


def bundle_fingerprint(bundle: PathBundle) -> str:
    ident = (
        bundle.n_paths,
        bundle.n_steps,
        bundle.dimension,
        bundle.seed,
        float(bundle.times[-1]),
        float(bundle.times[1]) if len(bundle.times) > 1 else 0.0,
    )
    return hashlib.sha256(repr(ident).encode()).hexdigest()[:16]


# -- core sweep -----------------------------------------------------------------


def _weighted_stats(values: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = weights @ values
    var = weights @ (values - mean) ** 2
    n_eff = 1.0 / float(np.sum(weights**2))
    return mean, np.sqrt(var / n_eff)


def _single_step_density(design_b, dm, dn, weights):
    """Coefficients of dn on design_b x dm for one step; returns (B, d, q)."""
    n, B = design_b.shape
    d = dm.shape[1]
    if d == 1:
        design = design_b * dm
    else:
        design = (design_b[:, :, None] * dm[:, None, :]).reshape(n, B * d)
    beta, _, _, _ = _weighted_lstsq(design, dn, weights)
    return beta.reshape(B, d, dn.shape[1])


def _picard_sweep(
    problem: BsdeProblem,
    bundle: PathBundle,
    basis: RegressionBasis,
    xi: np.ndarray,
    v: np.ndarray,
    lo: int,
    hi: int,
    weights: np.ndarray,
    threads: int,
    extract_z: bool,
):
    """One application of the fixed-point map on global steps ``lo..hi``.

    Returns the new ``v`` array, the per-step fits, optional per-step
    density coefficients, the sweep's successive-difference norm, and
    per-step summary statistics.
    """
    n = bundle.n_paths
    k_w = hi - lo
    q = problem.dim_y
    targets = xi + v[:, k_w]
    fits: list[ConditionalEstimate] = []

    v_new = np.zeros_like(v)
    delta = 0.0
    mean_y = np.empty((k_w + 1, q))
    mean_abs_z = np.zeros((k_w, q))
    z_coeffs = np.empty((k_w, basis.size, bundle.dimension, q)) if extract_z else None

    # one pass over the window: each step's design matrix is built once and
    # shared between the conditional fit, the pathwise evaluation, and the
    # density regression; the driver update for step k-1 runs as soon as
    # the step-k fit is available
    v_zero = not np.any(v)  # zero-driver iterates never touch the v arrays
    new_nonzero = False
    z_scratch = np.zeros((n, q, bundle.dimension)) if not extract_z else None
    design_prev = None
    n_prev = None
    for k in range(k_w + 1):
        design_k = basis.evaluate(np.ascontiguousarray(bundle.states[:, lo + k, :]))
        fit_k = fit_from_design(design_k, lo + k, targets, basis, weights)
        fits.append(fit_k)
        n_k = design_k @ fit_k.coefficients
        if k > 0:
            j = k - 1  # driver step between t_{lo+j} and t_{lo+k}
            y_j = n_prev if v_zero else n_prev - v[:, j]
            mean_y[j] = weights @ y_j
            if extract_z:
                dn = n_k - n_prev
                dm = bundle.mart_increments[:, lo + j, :]
                z_coeffs[j] = _single_step_density(design_prev, dm, dn, weights)
                z_j = np.einsum("nb,bjq->nqj", design_prev, z_coeffs[j])
                mean_abs_z[j] = weights @ np.linalg.norm(z_j, axis=2)
            else:
                z_j = z_scratch
            t_j = float(bundle.times[lo + j])
            f_j = np.asarray(problem.driver(t_j, y_j, z_j), dtype=float)
            if f_j.shape != (n, q):
                raise InputError(f"driver returned shape {f_j.shape}, expected {(n, q)}")
            if not np.all(np.isfinite(f_j)):
                bad = int(np.argwhere(~np.isfinite(f_j))[0, 0])
                raise NumericalError(
                    f"driver returned non-finite value at t={t_j!r} "
                    f"(y={y_j[bad]!r}, z={z_j[bad]!r})"
                )
            dt_j = float(bundle.times[lo + k] - bundle.times[lo + j])
            if np.any(f_j):
                v_new[:, k] = v_new[:, j] + f_j * dt_j
                new_nonzero = True
            elif new_nonzero:
                v_new[:, k] = v_new[:, j]
            if new_nonzero or not v_zero:
                diff = v_new[:, k] - v[:, k]
                step_delta = float(np.sqrt(weights @ np.sum(diff**2, axis=1)))
                delta = max(delta, step_delta)
        design_prev, n_prev = design_k, n_k
    mean_y[k_w] = weights @ (n_prev if v_zero else n_prev - v[:, k_w])
    return v_new, fits, z_coeffs, delta, targets, mean_y, mean_abs_z


def picard_step(
    problem: BsdeProblem,
    bundle: PathBundle,
    basis: RegressionBasis,
    state: PicardState,
    threads: int = 1,
) -> PicardState:
    """Apply the fixed-point map once to ``state`` over the full horizon."""
    if state.v_paths.shape != (bundle.n_paths, bundle.n_steps + 1, problem.dim_y):
        raise InputError("state does not match the bundle and problem shapes")
    weights = bundle.path_weights()
    xi = problem.terminal.evaluate(bundle.states[:, -1, :], problem.dim_y)
    extract_z = problem.z_dependent and bool(np.any(bundle.mart_increments))
    v_new, fits, z_coeffs, delta, _, _, _ = _picard_sweep(
        problem, bundle, basis, xi, state.v_paths, 0, bundle.n_steps,
        weights, threads, extract_z,
    )
    z_est = None
    if z_coeffs is not None:
        z_est = _coeffs_to_estimate(basis, z_coeffs, problem.dim_y)
    return PicardState(
        iterate=state.iterate + 1,
        v_paths=v_new,
        y_fits=tuple(fits),
        z_estimate=z_est,
        delta=delta,
    )


def _coeffs_to_estimate(basis, z_coeffs, q) -> RepresentationEstimate:
    K = z_coeffs.shape[0]
    nan = np.full((K, q), np.nan)
    return RepresentationEstimate(
        basis=basis,
        coefficients=z_coeffs,
        residual_variance=nan,
        target_variance=nan,
        gram_condition=np.full(K, np.nan),
        effective_samples=np.full(K, np.nan),
        scalar=q == 1,
    )


# -- window partition and full solves --------------------------------------------


def _windows(times: np.ndarray, lipschitz: float) -> list[tuple[int, int]]:
    """Sub-intervals (right to left) of time-length at most 0.5 / lipschitz."""
    n_steps = len(times) - 1
    total = float(times[-1] - times[0])
    if lipschitz <= 0 or lipschitz * total <= _CONTRACTION_BUDGET + 1e-12:
        return [(0, n_steps)]
    max_len = _CONTRACTION_BUDGET / lipschitz
    windows = []
    hi = n_steps
    while hi > 0:
        lo = hi
        while lo > 0 and times[hi] - times[lo - 1] <= max_len + 1e-12:
            lo -= 1
        if lo == hi:
            lo = hi - 1  # a single step exceeding the budget is taken whole
        windows.append((lo, hi))
        hi = lo
    return windows


def _resolve_basis(
    bundle: PathBundle,
    problem: BsdeProblem,
    basis: RegressionBasis | None,
    weights: np.ndarray,
) -> tuple[RegressionBasis, dict]:
    """Default polynomial basis with terminal-fit quality fallback.

    The fallback quality gate uses the terminal-step fit, where the
    targets are an exact function of the regressed state, so a low R^2
    genuinely indicates an inadequate basis rather than conditional
    variance decay.
    """
    info: dict = {"fallback": False}
    if basis is not None:
        info["basis"] = basis.describe()
        return basis, info
    domain = bundle.config.domain if bundle.config is not None else None
    if domain is None:
        raise InputError("a basis must be supplied for bundles without a configuration")
    candidate = RegressionBasis.polynomial(3, domain)
    xi = problem.terminal.evaluate(bundle.states[:, -1, :], problem.dim_y)
    fit = fit_conditional(bundle, bundle.n_steps, xi, candidate, weights)
    r2 = float(np.min(fit.r_squared))
    if r2 < _FALLBACK_R2 and domain.dimension <= 2:
        candidate = RegressionBasis.piecewise_constant(_FALLBACK_CELLS, domain)
        info.update(fallback=True, terminal_r2=r2)
    info["basis"] = candidate.describe()
    return candidate, info


def solve_picard(
    problem: BsdeProblem,
    bundle: PathBundle,
    basis: RegressionBasis | None = None,
    tol: float = 1e-4,
    max_iter: int = 25,
    threads: int = 1,
) -> BsdeSolution:
    """Iterate the fixed-point map until the successive-difference norm drops below ``tol``.

    Non-convergence within ``max_iter`` is reported on the solution, not
    raised.  ``y0`` is the ensemble mean of the pathwise ``Y_0`` with the
    standard error of the averaged terminal-plus-driver functional.
    """
    if tol <= 0 or max_iter < 1:
        raise InputError("tol must be positive and max_iter >= 1")
    weights = bundle.path_weights()
    basis, basis_info = _resolve_basis(bundle, problem, basis, weights)
    if abs(float(bundle.times[-1]) - problem.horizon) > 1e-9 * max(1.0, problem.horizon):
        raise InputError("bundle horizon does not match the problem horizon")

    windows = _windows(bundle.times, problem.lipschitz)
    extract_z_final = bool(np.any(bundle.mart_increments))
    extract_z_iter = problem.z_dependent and extract_z_final

    xi = problem.terminal.evaluate(bundle.states[:, -1, :], problem.dim_y)
    q = problem.dim_y
    K = bundle.n_steps
    all_fits: list[ConditionalEstimate | None] = [None] * (K + 1)
    all_z = np.empty((K, basis.size, bundle.dimension, q)) if extract_z_final else None
    mean_y = np.empty((K + 1, q))
    mean_abs_z = np.zeros((K, q))
    traces: list[tuple[float, ...]] = []
    iteration_counts: list[int] = []
    converged_all = True
    y0 = y0_se = None

    for lo, hi in windows:  # right to left
        v = np.zeros((bundle.n_paths, hi - lo + 1, q))
        trace = []
        converged = False
        last = None
        for _ in range(max_iter):
            last = _picard_sweep(
                problem, bundle, basis, xi, v, lo, hi, weights, threads,
                extract_z_iter,
            )
            v_new, fits, z_coeffs, delta, targets, w_mean_y, w_mean_abs_z = last
            trace.append(delta)
            v = v_new
            if delta < tol:
                converged = True
                break
        v_new, fits, z_coeffs, delta, targets, w_mean_y, w_mean_abs_z = last
        if extract_z_final and not extract_z_iter:
            # densities of the converged N, for reporting only
            z_coeffs = np.empty((hi - lo, basis.size, bundle.dimension, q))
            design_next = basis.evaluate(np.ascontiguousarray(bundle.states[:, lo, :]))
            n_next = design_next @ fits[0].coefficients
            for k in range(hi - lo):
                design_k, n_k = design_next, n_next
                design_next = basis.evaluate(
                    np.ascontiguousarray(bundle.states[:, lo + k + 1, :])
                )
                n_next = design_next @ fits[k + 1].coefficients
                dm = bundle.mart_increments[:, lo + k, :]
                z_coeffs[k] = _single_step_density(design_k, dm, n_next - n_k, weights)
                z_vals = np.einsum("nb,bjq->nqj", design_k, z_coeffs[k])
                w_mean_abs_z[k] = weights @ np.linalg.norm(z_vals, axis=2)
        converged_all &= converged
        traces.append(tuple(trace))
        iteration_counts.append(len(trace))
        for offset, fit in enumerate(fits):
            if all_fits[lo + offset] is None or offset > 0:
                all_fits[lo + offset] = fit
        if all_z is not None and z_coeffs is not None:
            all_z[lo:hi] = z_coeffs
        mean_y[lo : hi + 1] = w_mean_y
        mean_abs_z[lo:hi] = w_mean_abs_z
        # terminal data for the next (left) window: pathwise Y at the boundary
        design_lo = basis.evaluate(np.ascontiguousarray(bundle.states[:, lo, :]))
        xi = design_lo @ fits[0].coefficients - v[:, 0]
        if lo == 0:
            y0, y0_se = _weighted_stats(targets, weights)

    traces.reverse()
    iteration_counts.reverse()
    z_est = _coeffs_to_estimate(basis, all_z, q) if all_z is not None else None
    return BsdeSolution(
        y0=y0,
        y0_se=y0_se,
        mean_y=mean_y,
        mean_abs_z=mean_abs_z,
        y_fits=tuple(all_fits),
        z_estimate=z_est,
        trace=tuple(traces),
        converged=converged_all,
        mode="picard",
        bundle_fingerprint=bundle_fingerprint(bundle),
        diagnostics={
            "windows": [[int(lo), int(hi)] for lo, hi in reversed(windows)],
            "iterations": iteration_counts,
            "tol": tol,
            "max_iter": max_iter,
            **basis_info,
        },
    )


def solve_backward_euler(
    problem: BsdeProblem,
    bundle: PathBundle,
    basis: RegressionBasis | None = None,
    threads: int = 1,
) -> BsdeSolution:
    """Single backward sweep: ``Y_k = E[Y_{k+1} | X_k] + f(t_k, ., Z_k) dt``.

    ``Z_k`` is regressed from the centered increment
    ``Y_{k+1} - E[Y_{k+1} | X_k]`` before the driver is applied, with the
    driver evaluated at the fitted continuation value.
    """
    weights = bundle.path_weights()
    basis, basis_info = _resolve_basis(bundle, problem, basis, weights)
    if abs(float(bundle.times[-1]) - problem.horizon) > 1e-9 * max(1.0, problem.horizon):
        raise InputError("bundle horizon does not match the problem horizon")
    n, K, d = bundle.mart_increments.shape
    q = problem.dim_y
    xi = problem.terminal.evaluate(bundle.states[:, -1, :], q)
    extract_z = bool(np.any(bundle.mart_increments))

    fits: list[ConditionalEstimate | None] = [None] * (K + 1)
    z_coeffs = np.empty((K, basis.size, d, q)) if extract_z else None
    mean_y = np.empty((K + 1, q))
    mean_abs_z = np.zeros((K, q))
    y_next = xi
    mean_y[K] = weights @ xi
    driver_path_integral = np.zeros((n, q))
    for k in range(K - 1, -1, -1):
        design_k = basis.evaluate(np.ascontiguousarray(bundle.states[:, k, :]))
        fit = fit_from_design(design_k, k, y_next, basis, weights)
        fits[k] = fit
        c_vals = design_k @ fit.coefficients
        if extract_z:
            dm = bundle.mart_increments[:, k, :]
            z_coeffs[k] = _single_step_density(design_k, dm, y_next - c_vals, weights)
            z_vals = np.einsum("nb,bjq->nqj", design_k, z_coeffs[k])
            mean_abs_z[k] = weights @ np.linalg.norm(z_vals, axis=2)
        else:
            z_vals = np.zeros((n, q, d))
        t_k = float(bundle.times[k])
        dt_k = float(bundle.times[k + 1] - bundle.times[k])
        f_k = np.asarray(problem.driver(t_k, c_vals, z_vals), dtype=float)
        if not np.all(np.isfinite(f_k)):
            bad = int(np.argwhere(~np.isfinite(f_k))[0, 0])
            raise NumericalError(
                f"driver returned non-finite value at t={t_k!r} (y={c_vals[bad]!r})"
            )
        y_next = c_vals + f_k * dt_k
        driver_path_integral += f_k * dt_k
        mean_y[k] = weights @ y_next
    y0, y0_se = _weighted_stats(xi + driver_path_integral, weights)
    z_est = _coeffs_to_estimate(basis, z_coeffs, q) if z_coeffs is not None else None
    # terminal step: the conditional expectation of xi given X_T, for completeness
    fits[K] = fit_conditional(bundle, K, xi, basis, weights)
    return BsdeSolution(
        y0=y0,
        y0_se=y0_se,
        mean_y=mean_y,
        mean_abs_z=mean_abs_z,
        y_fits=tuple(fits),
        z_estimate=z_est,
        trace=((),),
        converged=True,
        mode="backward-euler",
        bundle_fingerprint=bundle_fingerprint(bundle),
        diagnostics=basis_info,
    )


# -- stochastic solution of the Neumann problem -----------------------------------


@dataclass(frozen=True)
class StochasticSolutionReport:
    """Probabilistic evaluation ``u(t, mu) = E[phi(X_t) + V(t)_t]``."""

    value: np.ndarray  # (dim_y,)
    standard_error: np.ndarray  # (dim_y,)
    terminal_mean: np.ndarray  # (dim_y,) ensemble mean of phi(X_t)
    v_mean: np.ndarray  # (dim_y,) ensemble mean of V(t)_t
    solution: BsdeSolution
    config: dict
    problem: dict

    def to_json_dict(self) -> dict:
        return {
            "value": self.value.tolist(),
            "standard_error": self.standard_error.tolist(),
            "terminal_mean": self.terminal_mean.tolist(),
            "v_mean": self.v_mean.tolist(),
            "config": self.config,
            "problem": self.problem,
            "solution": self.solution.to_json_dict(),
        }


def stochastic_solution(
    problem: BsdeProblem,
    config: SimulationConfig,
    basis: RegressionBasis | None = None,
    tol: float = 1e-4,
    max_iter: int = 25,
    threads: int = 1,
    stream: str = "paths",
) -> StochasticSolutionReport:
    """Simulate a bundle, solve the BSDE, and average ``phi(X_t) + V(t)_t``.

    The PDE time plays the role of the BSDE horizon, so the two must
    agree.
    """
    if abs(problem.horizon - config.horizon) > 1e-12 * max(1.0, config.horizon):
        raise InputError("problem horizon must equal the simulation horizon")
    bundle = simulate(config, threads=threads, stream=stream)
    solution = solve_picard(problem, bundle, basis=basis, tol=tol, max_iter=max_iter,
                            threads=threads)
    weights = bundle.path_weights()
    xi = problem.terminal.evaluate(bundle.states[:, -1, :], problem.dim_y)
    terminal_mean = weights @ xi
    return StochasticSolutionReport(
        value=solution.y0,
        standard_error=solution.y0_se,
        terminal_mean=terminal_mean,
        v_mean=solution.y0 - terminal_mean,
        solution=solution,
        config=config.describe(),
        problem=problem.describe(),
    )
