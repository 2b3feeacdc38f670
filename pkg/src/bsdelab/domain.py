"""Bounded convex domains with exact membership tests and nearest-point projection.

Two kinds are supported: axis-aligned boxes and convex polytopes given
as intersections of half-spaces ``{x : n·x <= b}`` with unit outward
normals.  Projection implements the reflection step of the path
simulator: a proposal that leaves the closure is replaced by its
Euclidean-nearest point of the closure.  On convex sets that point is
unique, projection is idempotent and 1-Lipschitz.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .errors import InputError, NumericalError

# Dykstra iteration controls for polytope projection.
_PROJECTION_TOL = 1e-12
_PROJECTION_MAX_ITER = 10_000


@dataclass(frozen=True)
class HalfSpace:
    """Half-space ``{x : normal · x <= offset}`` with a unit normal."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        normal = np.asarray(self.normal, dtype=float)
        if normal.ndim != 1:
            raise InputError("half-space normal must be a vector")
        norm = float(np.linalg.norm(normal))
        if not np.isfinite(norm) or norm == 0.0:
            raise InputError("half-space normal must be nonzero and finite")
        if abs(norm - 1.0) > 1e-9:
            object.__setattr__(self, "normal", normal / norm)
            object.__setattr__(self, "offset", float(self.offset) / norm)
        else:
            object.__setattr__(self, "normal", normal)
            object.__setattr__(self, "offset", float(self.offset))


@dataclass(frozen=True)
class DomainSpec:
    """Closed bounded convex domain, either a box or a half-space intersection."""

    kind: str
    dimension: int
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    halfspaces: tuple[HalfSpace, ...] = field(default=())

    @staticmethod
    def box(bounds) -> "DomainSpec":
        """Axis-aligned box from a list of ``(low, high)`` pairs."""
        arr = np.asarray(bounds, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise InputError("box bounds must be a list of (low, high) pairs")
        lower, upper = arr[:, 0].copy(), arr[:, 1].copy()
        if not np.all(np.isfinite(arr)):
            raise InputError("box bounds must be finite")
        if not np.all(lower < upper):
            raise InputError("box requires lower[i] < upper[i] for every axis")
        return DomainSpec(kind="box", dimension=arr.shape[0], lower=lower, upper=upper)

    @staticmethod
    def polytope(halfspaces, dimension: int) -> "DomainSpec":
        """Convex polytope; checked for boundedness and nonempty interior."""
        if dimension < 1:
            raise InputError("dimension must be >= 1")
        hs = tuple(
            h if isinstance(h, HalfSpace) else HalfSpace(np.asarray(h[0], dtype=float), float(h[1]))
            for h in halfspaces
        )
        if not hs:
            raise InputError("polytope requires at least one half-space")
        for h in hs:
            if h.normal.shape != (dimension,):
                raise InputError("half-space normal has wrong dimension")
        spec = DomainSpec(kind="polytope", dimension=dimension, halfspaces=hs)
        spec._check_bounded()
        spec._check_interior()
        return spec

    def __post_init__(self):
        if self.dimension < 1:
            raise InputError("dimension must be >= 1")
        if self.kind not in ("box", "polytope"):
            raise InputError(f"unknown domain kind {self.kind!r}")

    # -- construction-time feasibility checks (polytope only) ---------------

    def _constraint_arrays(self):
        A = np.stack([h.normal for h in self.halfspaces])
        b = np.array([h.offset for h in self.halfspaces])
        return A, b

    def _check_bounded(self):
        A, b = self._constraint_arrays()
        for axis in range(self.dimension):
            for sign in (1.0, -1.0):
                c = np.zeros(self.dimension)
                c[axis] = -sign  # maximize sign * x_axis
                res = linprog(c, A_ub=A, b_ub=b, bounds=[(None, None)] * self.dimension,
                              method="highs")
                if res.status == 3:
                    raise InputError(
                        f"polytope is unbounded along {'+' if sign > 0 else '-'}x{axis}"
                    )
                if not res.success:
                    raise InputError("polytope feasibility check failed; set may be empty")

    def _check_interior(self):
        # Chebyshev center: maximize r with A x + r <= b (unit normals).
        A, b = self._constraint_arrays()
        m = A.shape[0]
        c = np.zeros(self.dimension + 1)
        c[-1] = -1.0
        A_ub = np.hstack([A, np.ones((m, 1))])
        res = linprog(c, A_ub=A_ub, b_ub=b,
                      bounds=[(None, None)] * self.dimension + [(0, None)], method="highs")
        if not res.success or res.x[-1] <= 0.0:
            raise InputError("polytope has empty interior")

    # -- geometry ------------------------------------------------------------

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        """Tight axis-aligned bounding box ``(lower, upper)`` of the closure."""
        if self.kind == "box":
            return self.lower.copy(), self.upper.copy()
        A, b = self._constraint_arrays()
        lo = np.empty(self.dimension)
        hi = np.empty(self.dimension)
        for axis in range(self.dimension):
            c = np.zeros(self.dimension)
            c[axis] = 1.0
            res = linprog(c, A_ub=A, b_ub=b, bounds=[(None, None)] * self.dimension,
                          method="highs")
            lo[axis] = res.fun
            res = linprog(-c, A_ub=A, b_ub=b, bounds=[(None, None)] * self.dimension,
                          method="highs")
            hi[axis] = -res.fun
        return lo, hi

    def diameter(self) -> float:
        lo, hi = self.bounding_box()
        return float(np.linalg.norm(hi - lo))


def _as_points(domain: DomainSpec, point) -> tuple[np.ndarray, bool]:
    p = np.asarray(point, dtype=float)
    single = p.ndim == 1
    if single:
        p = p[None, :]
    if p.ndim != 2 or p.shape[1] != domain.dimension:
        raise InputError(
            f"point has dimension {p.shape[-1] if p.ndim else 0}, "
            f"domain has dimension {domain.dimension}"
        )
    return p, single


def contains(domain: DomainSpec, point) -> bool | np.ndarray:
    """Exact membership in the closed set (boundary inclusive, no tolerance).

    Accepts a single point or an ``(n, d)`` batch; returns a bool or a
    boolean array accordingly.
    """
    p, single = _as_points(domain, point)
    if domain.kind == "box":
        ok = np.all((p >= domain.lower) & (p <= domain.upper), axis=1)
    else:
        A, b = domain._constraint_arrays()
        ok = np.all(p @ A.T <= b, axis=1)
    return bool(ok[0]) if single else ok


def _project_box(domain: DomainSpec, p: np.ndarray) -> np.ndarray:
    return np.clip(p, domain.lower, domain.upper)


def _project_polytope(domain: DomainSpec, p: np.ndarray) -> np.ndarray:
    """Nearest point of the half-space intersection, via Dykstra's scheme.

    Plain cyclic projection converges to a feasible point but not the
    nearest one; Dykstra's correction terms restore optimality on convex
    intersections.  A final feasibility sweep (with a one-ulp overshoot)
    guarantees the exact inequality checks of :func:`contains` pass.
    """
    A, b = domain._constraint_arrays()
    m = A.shape[0]
    x = p.copy()
    corrections = np.zeros((m,) + p.shape)
    for iteration in range(_PROJECTION_MAX_ITER):
        max_move = 0.0
        for i in range(m):
            y = x + corrections[i]
            viol = y @ A[i] - b[i]
            x_new = y - np.outer(np.maximum(viol, 0.0), A[i])
            corrections[i] = y - x_new
            max_move = max(max_move, float(np.max(np.abs(x_new - x), initial=0.0)))
            x = x_new
        if max_move <= _PROJECTION_TOL:
            break
    else:
        raise NumericalError(
            f"polytope projection did not converge within {_PROJECTION_MAX_ITER} "
            f"iterations (last sweep moved {max_move:.3e})"
        )
    # Feasibility sweep: push any residual violation inside with a tiny margin.
    for _ in range(100):
        viol = x @ A.T - b
        worst = np.max(viol, axis=1)
        if np.all(worst <= 0.0):
            return x
        idx = np.argmax(viol, axis=1)
        rows = np.nonzero(worst > 0.0)[0]
        for r in rows:
            i = idx[r]
            x[r] -= (viol[r, i] + 1e-15 * max(1.0, abs(b[i]))) * A[i]
    raise NumericalError("polytope projection could not restore exact feasibility")


def project(domain: DomainSpec, point) -> np.ndarray:
    """Euclidean-nearest point of the closure; identity on members.

    Accepts a single point or an ``(n, d)`` batch.  For boxes this is an
    exact componentwise clamp.
    """
    p, single = _as_points(domain, point)
    if domain.kind == "box":
        out = _project_box(domain, p)
    else:
        inside = contains(domain, p)
        if np.all(inside):
            out = p.copy()
        else:
            out = p.copy()
            needs = ~inside
            out[needs] = _project_polytope(domain, p[needs])
    return out[0] if single else out
