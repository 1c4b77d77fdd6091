"""Barycentric coding against a fixed dictionary.

For a measure ``mu`` and atoms ``D_j`` the transport maps ``T_j`` from ``mu`` to
``D_j`` give a Gram matrix ``A_jl = sum_i mu_i <T_j(x_i) - x_i, T_l(x_i) - x_i>``;
``mu`` is a barycenter of the atoms with weights ``lam`` iff ``lam^T A lam = 0``.
Maps here are barycentric projections of entropic plans, so everything is
approximate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .core import LOG_FLOOR, SupportModel, as_weights, flush_exp, stack_weights
from .ot import plan_cost, shift_nonnegative, sinkhorn_scalings

PSD_TOL = -1e-8


@dataclass(frozen=True, eq=False)
class CodingProblem:
    gram: np.ndarray
    cost: np.ndarray
    shifted: bool = False

    @property
    def size(self) -> int:
        return self.cost.shape[0]

    def restrict(self, idx) -> "CodingProblem":
        idx = np.asarray(idx)
        return CodingProblem(self.gram[np.ix_(idx, idx)], self.cost[idx], self.shifted)

    def quad(self, lam) -> float:
        lam = np.asarray(lam)
        return float(lam @ self.gram @ lam)

    def to_json(self) -> str:
        return json.dumps({"gram": self.gram.tolist(), "cost": self.cost.tolist(), "shifted": self.shifted})

    @classmethod
    def from_json(cls, text: str) -> "CodingProblem":
        d = json.loads(text)
        return cls(np.array(d["gram"], dtype=np.float64), np.array(d["cost"], dtype=np.float64),
                   bool(d.get("shifted", False)))


def map_displacements(mu, dictionary, support: SupportModel, iters: int):
    """Barycentric-projection displacements ``T_j(x_i) - x_i`` and plan costs.

    Returns (displacements (m, N, d) with zeros off the support of ``mu``, costs (m,)).
    Plans run from each atom to ``mu`` so the ``mu`` marginal is exact.
    """
    a = as_weights(mu, support)
    D = stack_weights(dictionary, support)
    log_a = np.log(np.maximum(a, LOG_FLOOR))
    log_D = np.log(np.maximum(D, LOG_FLOOR))
    log_u, log_v = sinkhorn_scalings(log_D, log_a[None, :], support.kernel_op, iters)
    costs = plan_cost(log_u, log_v, support)
    X = support.points
    valid = a > 0
    disp = np.zeros((D.shape[0], support.size, X.shape[1]))
    # sum_k u_jk K_ki x_k v_ji
    if support.exact_lse:
        P = np.exp(log_u[:, :, None] + support.log_kernel + log_v[:, None, :])
        moved = np.einsum("jki,kd->jid", P, X)
    else:
        shift = np.max(log_u, axis=-1, keepdims=True)
        eu = flush_exp(log_u - shift)
        scale = np.exp(log_v + shift)[:, :, None]
        moved = np.einsum("jk,kd,ki->jid", eu, X, support.kernel) * scale
    disp[:, valid, :] = moved[:, valid, :] / a[valid, None] - X[valid][None]
    return disp, costs


def build_problem(mu, dictionary, support: SupportModel, iters: int) -> CodingProblem:
    a = as_weights(mu, support)
    disp, costs = map_displacements(a, dictionary, support, iters)
    gram = np.einsum("i,jid,lid->jl", a, disp, disp)
    gram = 0.5 * (gram + gram.T)
    shifted = bool(np.min(costs) < 0)
    return CodingProblem(gram, shift_nonnegative(costs), shifted)


def _frank_wolfe(Q, q, iters: int, gap_tol: float, x0=None):
    """Away-step Frank-Wolfe for min x^T Q x + q^T x over the simplex.

    Exact line search; vertex ties break toward the lowest index.
    """
    m = q.shape[0]
    x = np.full(m, 1.0 / m) if x0 is None else np.array(x0, dtype=np.float64)
    for _ in range(iters):
        g = 2.0 * (Q @ x) + q
        gx = float(g @ x)
        s = int(np.argmin(g))
        gap = gx - g[s]
        if gap <= gap_tol:
            break
        active = np.flatnonzero(x > 0)
        v = int(active[np.argmax(g[active])])
        if gap >= g[v] - gx or x[v] >= 1.0:
            d = -x.copy()
            d[s] += 1.0
            gmax = 1.0
        else:
            d = x.copy()
            d[v] -= 1.0
            gmax = x[v] / (1.0 - x[v])
        slope = float(g @ d)
        curv = float(d @ Q @ d)
        step = gmax if curv <= 0 else min(gmax, max(0.0, -slope / (2.0 * curv)))
        if step <= 0:
            break
        x = x + step * d
        x[np.abs(x) < 1e-17] = 0.0
        x = np.maximum(x, 0.0)
        x /= x.sum()
    return x


class CodingResult(NamedTuple):
    lam: np.ndarray
    objective: float


def solve_qp(problem: CodingProblem, iters: int = 500, gap_tol: float = 1e-10) -> CodingResult:
    """Minimize ``lam^T A lam`` over the simplex; starts (and ties) at uniform."""
    A = problem.gram
    lam = _frank_wolfe(A, np.zeros(problem.size), iters, gap_tol)
    return CodingResult(lam, max(problem.quad(lam), 0.0))


class LPResult(NamedTuple):
    lam: np.ndarray
    objective: float
    feasible: bool
    tau: float


def _socp_lp(A, c, tau):
    """min c^T x  s.t. ||R x|| <= 1 (R^T R = A / tau), x >= 0, sum x = 1."""
    import cvxopt

    m = c.shape[0]
    sig, U = np.linalg.eigh(A / tau)
    R = np.sqrt(np.clip(sig, 0.0, None))[:, None] * U.T
    Gl = -np.eye(m)
    Gq = np.vstack([np.zeros((1, m)), -R])
    G = cvxopt.matrix(np.vstack([Gl, Gq]))
    h = cvxopt.matrix(np.concatenate([np.zeros(m), [1.0], np.zeros(m)]))
    dims = {"l": m, "q": [m + 1], "s": []}
    Aeq = cvxopt.matrix(np.ones((1, m)))
    beq = cvxopt.matrix(np.ones(1))
    opts = {"show_progress": False, "abstol": 1e-10, "reltol": 1e-10, "feastol": 1e-10, "maxiters": 200}
    try:
        sol = cvxopt.solvers.conelp(cvxopt.matrix(c.astype(np.float64)), G, h, dims, Aeq, beq, options=opts)
    except (ValueError, ArithmeticError):
        # interior-point breakdown on near-degenerate cones; caller keeps the QP point
        return None
    if sol["x"] is None:
        return None
    x = np.maximum(np.array(sol["x"]).ravel(), 0.0)
    return x / x.sum()


def _slsqp_lp(A, c, tau, x0):
    """Local SQP fallback for when the cone solver breaks down; starts feasible."""
    from scipy.optimize import minimize

    m = c.shape[0]
    cons = [
        {"type": "eq", "fun": lambda x: x.sum() - 1.0, "jac": lambda x: np.ones(m)},
        {"type": "ineq", "fun": lambda x: tau - x @ A @ x, "jac": lambda x: -2.0 * (A @ x)},
    ]
    res = minimize(lambda x: c @ x, x0, jac=lambda x: c, method="SLSQP", bounds=[(0.0, 1.0)] * m,
                   constraints=cons, options={"ftol": 1e-14, "maxiter": 500})
    if not np.all(np.isfinite(res.x)):
        return None
    x = np.maximum(res.x, 0.0)
    return x / x.sum()


def solve_lp(problem: CodingProblem, tau: float | None = None) -> LPResult:
    """Cheapest near-exact reconstruction: min c^T lam s.t. lam^T A lam <= tau.

    Default ``tau`` is ten times the QP minimum (plus 1e-12). When ``tau`` is below
    the QP minimum the QP minimizer is returned with ``feasible=False``. The QP
    minimizer is feasible for any larger ``tau`` and is kept unless the cone
    program finds a cheaper feasible point.
    """
    A, c = problem.gram, problem.cost
    m = problem.size
    qp = solve_qp(problem)
    if tau is None:
        tau = 10.0 * (qp.objective + 1e-12)
    if tau < qp.objective:
        return LPResult(qp.lam, float(c @ qp.lam), False, tau)
    if m == 1:
        return LPResult(np.ones(1), float(c[0]), True, tau)
    # unconstrained LP optimum: uniform over the cheapest (tied) atoms, else lowest index
    tied = np.flatnonzero(c <= c.min() + 1e-12 * max(1.0, float(np.abs(c).max())))
    for face in (tied, tied[:1]):
        x = np.zeros(m)
        x[face] = 1.0 / face.size
        if problem.quad(x) <= tau:
            return LPResult(x, float(c @ x), True, tau)
    best = qp.lam
    x = _socp_lp(A, c, tau)
    if x is None:
        x = _slsqp_lp(A, c, tau, qp.lam)
    # cone solutions may sit a hair outside the constraint
    if x is not None and problem.quad(x) <= 1.01 * tau and c @ x < c @ best:
        best = x
    return LPResult(best, float(c @ best), True, tau)
