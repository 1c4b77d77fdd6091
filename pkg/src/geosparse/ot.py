"""Transport solvers on a shared fixed support.

Entropic quantities run a fixed number of log-domain scaling steps; no early
exit. Exact quantities solve the discrete Kantorovich LP, or use the quantile
formula on the line.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .core import (
    LOG_FLOOR,
    DiscreteMeasure,
    GeoSparseError,
    LogKernel,
    NumericalBreakdown,
    SupportError,
    SupportModel,
    as_weights,
    build_support,
    flush_exp,
    kernel_matmul,
    stack_weights,
    validate_simplex,
)

EXACT_MAX_SIZE = 4096
_LP_OPTIONS = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}


@dataclass
class Diagnostics:
    """Structured event records (flooring, marginal errors, shifts)."""

    events: list = field(default_factory=list)

    def record(self, kind: str, **info):
        self.events.append({"kind": kind, **info})

    def count(self, kind: str) -> int:
        return sum(1 for e in self.events if e["kind"] == kind)

    def extend(self, other: "Diagnostics"):
        self.events.extend(other.events)


def floored_log(w: np.ndarray, diagnostics: Diagnostics | None = None, where: str = "") -> np.ndarray:
    n_floor = int(np.count_nonzero(w < LOG_FLOOR))
    if n_floor and diagnostics is not None:
        diagnostics.record("log_floor", where=where, entries=n_floor)
    return np.log(np.maximum(w, LOG_FLOOR))


def kernel_lse(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """``y_i = log sum_j kernel[i, j] exp(x_j)`` along the last axis of ``x``.

    Shifting by the per-vector max keeps the exponentials in range; the result
    stays finite as long as every kernel entry is positive. A ``LogKernel``
    evaluates the sums exactly in the log domain.
    """
    if isinstance(kernel, LogKernel):
        return kernel.T.logmatmul(x)
    shift = np.max(x, axis=-1, keepdims=True)
    return np.log(kernel_matmul(flush_exp(x - shift), kernel.T)) + shift


# --------------------------------------------------------------------------
# Sinkhorn
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TransportPlan:
    matrix: np.ndarray
    source: np.ndarray
    target: np.ndarray

    @property
    def marginal_error(self) -> float:
        return float(
            np.abs(self.matrix.sum(1) - self.source).sum() + np.abs(self.matrix.sum(0) - self.target).sum()
        )


@dataclass(frozen=True, eq=False)
class SinkhornResult:
    cost_estimate: float
    plan: TransportPlan
    marginal_error: float
    log_u: np.ndarray
    log_v: np.ndarray
    diagnostics: Diagnostics

    def __iter__(self):
        # (cost_estimate, plan, marginal_error) unpacking
        return iter((self.cost_estimate, self.plan, self.marginal_error))

    def __getitem__(self, i):
        return (self.cost_estimate, self.plan, self.marginal_error)[i]


def sinkhorn_scalings(log_a, log_b, kernel, iters, check=True):
    """Run ``iters`` log-domain Sinkhorn steps on batches of measures (last axis N).

    Each step updates the row scaling then the column scaling, so column marginals
    are exact on return.
    """
    log_v = np.zeros(np.broadcast_shapes(log_a.shape, log_b.shape))
    log_u = log_v
    for it in range(iters):
        log_u = log_a - kernel_lse(log_v, kernel)
        log_v = log_b - kernel_lse(log_u, kernel.T)
        if check and not (np.all(np.isfinite(log_u)) and np.all(np.isfinite(log_v))):
            raise NumericalBreakdown(f"non-finite Sinkhorn scaling at iteration {it}", iteration=it)
    return log_u, log_v


def plan_sum(log_u, log_v, support: SupportModel, weights=None):
    """``sum_ij u_i K_ij W_ij v_j`` for batches (``W`` defaults to all ones)."""
    if support.exact_lse:
        # plan entries are at most 1, so exponentiating the log plan is safe
        P = np.exp(log_u[..., :, None] + support.log_kernel + log_v[..., None, :])
        return np.sum(P if weights is None else P * weights, axis=(-2, -1))
    M = support.kernel if weights is None else support.kernel * weights
    shift = np.max(log_v, axis=-1, keepdims=True)
    s = flush_exp(log_v - shift) @ M.T
    return np.sum(flush_exp(log_u + shift) * s, axis=-1)


def plan_cost(log_u, log_v, support: SupportModel):
    """``sum_ij u_i K_ij C_ij v_j`` for batches, without forming the plans on the fast path."""
    return plan_sum(log_u, log_v, support, support.cost)


def dual_value(log_u, log_v, a, b, support: SupportModel):
    """Entropic dual objective <f,a> + <g,b> - eps * mass(plan); may be negative."""
    mass = plan_sum(log_u, log_v, support)
    return support.epsilon * (np.sum(a * log_u, axis=-1) + np.sum(b * log_v, axis=-1) - mass)


def _plan_from_scalings(log_u, log_v, support):
    return np.exp(log_u[:, None] - support.cost / support.epsilon + log_v[None, :])


def sinkhorn(mu, nu, support: SupportModel, iters: int, estimator: str = "plan", log_domain: bool = True):
    """Entropic transport between two measures with exactly ``iters`` scaling steps.

    ``cost_estimate`` is the transport cost of the scaled plan (entropy excluded) for
    ``estimator="plan"``, or the dual objective for ``estimator="dual"``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    a = as_weights(mu, support)
    b = as_weights(nu, support)
    diag = Diagnostics()
    if log_domain:
        log_u, log_v = sinkhorn_scalings(
            floored_log(a, diag, "source"), floored_log(b, diag, "target"), support.kernel_op, iters
        )
    else:
        u = np.ones_like(a)
        v = np.ones_like(b)
        K = support.kernel
        # overflow to inf shows up as a zero column one step later
        with np.errstate(over="ignore"):
            for it in range(iters):
                kv = K @ v
                if np.any(kv == 0):
                    raise NumericalBreakdown(f"zero entry in K v at iteration {it}", iteration=it)
                u = a / kv
                ktu = K.T @ u
                if np.any(ktu == 0):
                    raise NumericalBreakdown(f"zero column in scaled kernel at iteration {it}", iteration=it)
                v = b / ktu
        with np.errstate(divide="ignore"):
            log_u, log_v = np.log(u), np.log(v)
    plan = _plan_from_scalings(log_u, log_v, support)
    # floored zero-mass points carry ~1e-300 of plan mass; drop it
    plan[a == 0] = 0.0
    plan[:, b == 0] = 0.0
    if estimator == "plan":
        value = float(np.sum(plan * support.cost))
    elif estimator == "dual":
        value = float(dual_value(log_u, log_v, a, b, support))
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    tp = TransportPlan(plan, a, b)
    err = tp.marginal_error
    diag.record("marginal_error", value=err, iters=iters)
    return SinkhornResult(value, tp, err, log_u, log_v, diag)


def sinkhorn_costs(A, B, support: SupportModel, iters: int, estimator: str = "plan") -> np.ndarray:
    """Entropic costs for broadcast batches of weight rows ``A`` and ``B``."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    log_a = np.log(np.maximum(A, LOG_FLOOR))
    log_b = np.log(np.maximum(B, LOG_FLOOR))
    log_u, log_v = sinkhorn_scalings(log_a, log_b, support.kernel_op, iters)
    if estimator == "plan":
        return plan_cost(log_u, log_v, support)
    if estimator == "dual":
        return dual_value(log_u, log_v, A, B, support)
    raise ValueError(f"unknown estimator {estimator!r}")


def pairwise_sinkhorn(X, Y, support: SupportModel, iters: int, estimator: str = "plan") -> np.ndarray:
    """Matrix of entropic costs between every row of ``X`` and every row of ``Y``."""
    X = stack_weights(X, support)
    Y = stack_weights(Y, support)
    return sinkhorn_costs(X[:, None, :], Y[None, :, :], support, iters, estimator)


def shift_nonnegative(values: np.ndarray) -> np.ndarray:
    """Add the magnitude of the most negative value so every entry is >= 0."""
    values = np.asarray(values, dtype=np.float64)
    lo = float(np.min(values)) if values.size else 0.0
    return values - lo if lo < 0 else values


# --------------------------------------------------------------------------
# Exact discrete W2
# --------------------------------------------------------------------------


@lru_cache(maxsize=64)
def _transport_constraints(n: int, k: int):
    rows = sparse.kron(sparse.eye(n), np.ones((1, k)))
    cols = sparse.kron(np.ones((1, n)), sparse.eye(k))
    return sparse.vstack([rows, cols]).tocsr()


def exact_transport(a: np.ndarray, b: np.ndarray, cost: np.ndarray):
    """Solve the discrete Kantorovich LP; returns (value, plan)."""
    ia = np.flatnonzero(a > 0)
    ib = np.flatnonzero(b > 0)
    sub = cost[np.ix_(ia, ib)]
    plan = np.zeros((a.shape[0], b.shape[0]))
    if ia.size == 1 or ib.size == 1:
        # one side is a single point: the only feasible plan is the product
        plan[np.ix_(ia, ib)] = np.outer(a[ia] / a[ia].sum(), b[ib] / b[ib].sum())
        return float(np.sum(plan * cost)), plan
    # the last column constraint is implied by the others; dropping it keeps
    # presolve from flagging roundoff-level mass mismatch as infeasible
    A_eq = _transport_constraints(ia.size, ib.size)[:-1]
    b_eq = np.concatenate([a[ia], b[ib] * (a[ia].sum() / b[ib].sum())])[:-1]
    res = linprog(sub.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs-ds",
                  options=_LP_OPTIONS)
    if res.status == 2:
        # presolve can misjudge feasibility when masses span many decades
        res = linprog(sub.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs-ds",
                      options={**_LP_OPTIONS, "presolve": False})
    if res.status != 0:
        raise GeoSparseError(f"exact transport LP failed: {res.message}")
    plan[np.ix_(ia, ib)] = np.maximum(res.x.reshape(ia.size, ib.size), 0.0)
    return max(float(res.fun), 0.0), plan


def exact_w2(mu, nu, support: SupportModel):
    """Exact squared W2 on the shared support; returns (cost, TransportPlan)."""
    if support.size > EXACT_MAX_SIZE:
        raise GeoSparseError(f"support of size {support.size} exceeds exact-solver guard {EXACT_MAX_SIZE}")
    a = as_weights(mu, support)
    b = as_weights(nu, support)
    if np.array_equal(a, b):
        return 0.0, TransportPlan(np.diag(a), a, b)
    value, plan = exact_transport(a, b, support.cost)
    return value, TransportPlan(plan, a, b)


def transport_bounds(mu, targets, support: SupportModel, iters: int):
    """Certified lower and upper bounds on exact W2^2 from ``mu`` to each target.

    The lower bound evaluates c-transformed entropic potentials (dual feasible);
    the upper bound is the cost of the entropic plan rounded onto the exact
    marginals. Both hold for any ``iters``; they tighten as epsilon shrinks.
    """
    a = as_weights(mu, support)
    B = stack_weights(targets, support)
    C = support.cost
    log_u, log_v = sinkhorn_scalings(
        np.log(np.maximum(a, LOG_FLOOR))[None], np.log(np.maximum(B, LOG_FLOOR)), support.kernel_op, iters
    )
    f = support.epsilon * log_u
    # c-transforms: g_j = min_i C_ij - f_i, then f_i = min_j C_ij - g_j
    g = np.min(C[None, :, :] - f[:, :, None], axis=1)
    f = np.min(C[None, :, :] - g[:, None, :], axis=2)
    lower = f @ a + np.sum(g * B, axis=1)

    P = np.exp(log_u[:, :, None] - C[None] / support.epsilon + log_v[:, None, :])
    row = P.sum(axis=2)
    P *= np.minimum(a[None] / np.maximum(row, LOG_FLOOR), 1.0)[:, :, None]
    col = P.sum(axis=1)
    P *= np.minimum(B / np.maximum(col, LOG_FLOOR), 1.0)[:, None, :]
    err_r = a[None] - P.sum(axis=2)
    err_c = B - P.sum(axis=1)
    mass = err_r.sum(axis=1)
    safe = np.where(mass > 0, mass, 1.0)
    P += np.where(mass > 0, 1.0, 0.0)[:, None, None] * err_r[:, :, None] * err_c[:, None, :] / safe[:, None, None]
    upper = np.einsum("bij,ij->b", P, C)
    return lower, upper


def exact_nearest(mu, candidates, support: SupportModel, iters: int = 100, rtol: float = 1e-9):
    """Index and exact W2^2 of the candidate closest to ``mu``; ties go to the lowest index.

    Exact LPs run only for candidates whose lower bound does not exceed the best
    upper bound, so the answer is exact while most solves are skipped.
    """
    X = stack_weights(candidates, support)
    lower, upper = transport_bounds(mu, X, support, iters)
    cutoff = np.min(upper) * (1 + rtol) + 1e-15
    alive = np.flatnonzero(lower <= cutoff)
    costs = np.array([exact_w2(mu, X[i], support)[0] for i in alive])
    best = np.min(costs)
    k = alive[np.flatnonzero(costs <= best + rtol * max(best, 1e-300))[0]]
    return int(k), float(costs[np.searchsorted(alive, k)])


def exact_w2_matrix(X, Y, support: SupportModel) -> np.ndarray:
    X = stack_weights(X, support)
    Y = stack_weights(Y, support)
    out = np.empty((X.shape[0], Y.shape[0]))
    for i, x in enumerate(X):
        for j, y in enumerate(Y):
            out[i, j] = exact_w2(x, y, support)[0]
    return out


# --------------------------------------------------------------------------
# Barycenters
# --------------------------------------------------------------------------


def ibp_log(log_atoms: np.ndarray, lam: np.ndarray, kernel: np.ndarray, iters: int) -> np.ndarray:
    """Log of the unnormalized IBP barycenter(s).

    ``log_atoms`` is (m, N); ``lam`` is (B, m). Returns (B, N).
    """
    lam = np.atleast_2d(lam)
    m, N = log_atoms.shape
    log_v = np.zeros((lam.shape[0], m, N))
    log_p = None
    for it in range(iters):
        log_u = log_atoms[None] - kernel_lse(log_v, kernel)
        log_ktu = kernel_lse(log_u, kernel.T)
        log_p = np.einsum("bj,bjn->bn", lam, log_ktu)
        log_v = log_p[:, None, :] - log_ktu
        if not np.all(np.isfinite(log_v)):
            raise NumericalBreakdown(f"non-finite barycenter scaling at iteration {it}", iteration=it)
    return log_p


def _normalize_log(log_p):
    p = np.exp(log_p - np.max(log_p, axis=-1, keepdims=True))
    return p / p.sum(axis=-1, keepdims=True)


def ibp_barycenter(atoms, lam, support: SupportModel, iters: int, diagnostics: Diagnostics | None = None):
    """Fixed-support entropic barycenter after exactly ``iters`` Bregman steps."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    A = stack_weights(atoms, support)
    lam = np.atleast_1d(np.asarray(lam, dtype=np.float64))
    validate_simplex(lam, what="barycentric weights")
    if lam.shape != (A.shape[0],):
        raise ValueError(f"expected {A.shape[0]} barycentric weights, got {lam.shape}")
    # canonical atom order (applied before renormalizing, whose rounding depends
    # on summation order) makes the result independent of input order
    order = np.lexsort(np.vstack([A.T, lam])[::-1])
    A, lam = A[order], lam[order]
    lam = lam / lam.sum()
    log_A = floored_log(A, diagnostics, "barycenter atoms")
    p = _normalize_log(ibp_log(log_A, lam[None], support.kernel_op, iters))[0]
    return DiscreteMeasure(p, support)


def ibp_barycenters(atoms, lams, support: SupportModel, iters: int) -> np.ndarray:
    """Barycenters for many weight rows at once; returns (B, N) weights."""
    A = stack_weights(atoms, support)
    lams = np.atleast_2d(np.asarray(lams, dtype=np.float64))
    return _normalize_log(ibp_log(np.log(np.maximum(A, LOG_FLOOR)), lams, support.kernel_op, iters))


# --------------------------------------------------------------------------
# Transport maps
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TransportMapEstimate:
    images: np.ndarray
    valid_mask: np.ndarray

    def displacements(self, points: np.ndarray) -> np.ndarray:
        d = self.images - points
        d[~self.valid_mask] = 0.0
        return d


def entropic_map(mu, nu, support: SupportModel, iters: int) -> TransportMapEstimate:
    """Barycentric projection of the entropic plan from ``mu`` to ``nu``."""
    a = as_weights(mu, support)
    # solve nu -> mu so the final scaling step makes the mu-marginal exact
    res = sinkhorn(nu, mu, support, iters)
    plan = res.plan.matrix.T
    valid = a > 0
    images = np.full(support.points.shape, np.nan)
    images[valid] = (plan[valid] @ support.points) / a[valid, None]
    return TransportMapEstimate(images, valid)


# --------------------------------------------------------------------------
# One-dimensional exact tools
# --------------------------------------------------------------------------


def _points_1d(measure, support: SupportModel | None = None):
    """(positions, weights) for a 1-D measure given as DiscreteMeasure or pair."""
    if isinstance(measure, DiscreteMeasure):
        sup = measure.support if measure.support is not None else support
        if sup is None:
            raise SupportError("a support is required to place a bare weight vector")
        if sup.dim != 1:
            raise SupportError("one-dimensional support required")
        return sup.points[:, 0], measure.weights
    if isinstance(measure, tuple) and len(measure) == 2:
        x, w = (np.asarray(v, dtype=np.float64).ravel() for v in measure)
        return x, validate_simplex(w)
    if support is None or support.dim != 1:
        raise SupportError("one-dimensional support required")
    return support.points[:, 0], as_weights(measure, support)


def monotone_coupling_1d(x, a, y, b):
    """Quantile (monotone) coupling; returns source points, target points, masses."""
    ia = np.argsort(x, kind="stable")
    ib = np.argsort(y, kind="stable")
    xs, a = np.asarray(x)[ia], np.asarray(a)[ia]
    ys, b = np.asarray(y)[ib], np.asarray(b)[ib]
    keep_a, keep_b = a > 0, b > 0
    xs, a, ys, b = xs[keep_a], a[keep_a], ys[keep_b], b[keep_b]
    ca = np.cumsum(a)
    cb = np.cumsum(b)
    ca[-1] = cb[-1] = 1.0
    levels = np.union1d(ca, cb)
    lo = np.concatenate([[0.0], levels[:-1]])
    masses = levels - lo
    keep = masses > 0
    lo, masses = lo[keep], masses[keep]
    mid = lo + 0.5 * masses
    src = xs[np.minimum(np.searchsorted(ca, mid), xs.size - 1)]
    dst = ys[np.minimum(np.searchsorted(cb, mid), ys.size - 1)]
    return src, dst, masses


def w2_1d(mu, nu, support: SupportModel | None = None) -> float:
    """Exact squared W2 between 1-D measures via the quantile coupling."""
    x, a = _points_1d(mu, support)
    y, b = _points_1d(nu, support)
    src, dst, w = monotone_coupling_1d(x, a, y, b)
    return float(np.sum(w * (src - dst) ** 2))


def mccann_points_1d(mu, nu, t: float, support: SupportModel | None = None):
    """Exact McCann interpolant at time ``t`` as (positions, weights), off-grid."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    x, a = _points_1d(mu, support)
    y, b = _points_1d(nu, support)
    src, dst, w = monotone_coupling_1d(x, a, y, b)
    return (1.0 - t) * src + t * dst, w


def snap_to_grid(positions, weights, grid: np.ndarray) -> np.ndarray:
    """Split each point mass between its two grid neighbours, keeping mass and mean."""
    grid = np.asarray(grid, dtype=np.float64)
    out = np.zeros(grid.size)
    if grid.size == 1:
        out[0] = np.sum(weights)
        return out
    pos = np.clip(positions, grid[0], grid[-1])
    k = np.clip(np.searchsorted(grid, pos, side="right") - 1, 0, grid.size - 2)
    theta = (pos - grid[k]) / (grid[k + 1] - grid[k])
    np.add.at(out, k, weights * (1.0 - theta))
    np.add.at(out, k + 1, weights * theta)
    return out


def mccann_1d(mu, nu, t: float, grid: SupportModel) -> DiscreteMeasure:
    """McCann interpolant at ``t`` kept on the (sorted, 1-D) grid support."""
    if grid.dim != 1:
        raise SupportError("mccann_1d needs a one-dimensional support")
    g = grid.points[:, 0]
    if np.any(np.diff(g) <= 0):
        raise SupportError("grid must be sorted ascending")
    if t == 0.0:
        return DiscreteMeasure(as_weights(mu, grid), grid)
    if t == 1.0:
        return DiscreteMeasure(as_weights(nu, grid), grid)
    pos, w = mccann_points_1d(mu, nu, t, grid)
    out = snap_to_grid(pos, w, g)
    return DiscreteMeasure(out / out.sum(), grid)


class ExtensionCheck(NamedTuple):
    lhs: float
    rhs: float
    t: float
    s: float


def verify_geodesic_extension(mu, nu, nu_tilde, t_samples, support: SupportModel | None = None, tol: float = 1e-8):
    """Evaluate both sides of the geodesic-extension inequality at each ``t``.

    ``nu`` must lie on the McCann interpolation from ``mu`` to ``nu_tilde``.
    Interpolants are computed exactly (off-grid) so the endpoint identity s = t
    holds to rounding when ``nu_tilde`` equals ``nu``.
    """
    mu_p = _points_1d(mu, support)
    nu_p = _points_1d(nu, support)
    nt_p = _points_1d(nu_tilde, support)
    w_mu_nt = np.sqrt(w2_1d(mu_p, nt_p))
    w_mu_nu = np.sqrt(w2_1d(mu_p, nu_p))
    w_nu_nt = np.sqrt(w2_1d(nu_p, nt_p))
    gap = abs(w_mu_nt - w_mu_nu - w_nu_nt)
    if gap > tol * max(1.0, w_mu_nt):
        raise GeoSparseError(f"nu is not on the geodesic from mu to nu_tilde (triangle gap {gap:.3g})")
    checks = []
    for t in t_samples:
        t = float(t)
        mt = mccann_points_1d(mu_p, nu_p, t)
        d_mu = w2_1d(mu_p, mt)
        s = np.sqrt(d_mu) / w_mu_nt if w_mu_nt > 0 else 0.0
        lhs = (1 - t) * d_mu + t * w2_1d(nu_p, mt)
        rhs = (1 - s) * d_mu + s * w2_1d(nt_p, mt)
        checks.append(ExtensionCheck(float(lhs), float(rhs), t, float(s)))
    return checks


def line_support(points, epsilon: float | None = None) -> SupportModel:
    return build_support(np.asarray(points, dtype=np.float64)[:, None], epsilon)
