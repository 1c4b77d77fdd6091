"""Loss and exact gradients of the regularized dictionary-learning objective.

The forward pass unrolls exactly ``iters`` Sinkhorn / IBP steps on a
:class:`~geosparse.autodiff.Tape`; gradients are those of that finite
computation.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .autodiff import Tape, Var
from .core import LOG_FLOOR, LatentParams, NumericalBreakdown, SupportModel, seeded_rng, stack_weights


@lru_cache(maxsize=16)
def _weighted_kernel(support: SupportModel) -> np.ndarray:
    return support.kernel * support.cost


def tape_sinkhorn(tape: Tape, log_a: Var, log_b: Var, support: SupportModel, iters: int):
    """Unrolled log-domain Sinkhorn on the tape; mirrors :func:`ot.sinkhorn_scalings`."""
    K = support.kernel_op
    shape = np.broadcast_shapes(log_a.shape, log_b.shape)
    log_v = tape.const(np.zeros(shape))
    log_u = log_v
    for _ in range(iters):
        log_u = log_a - tape.kernel_lse(log_v, K)
        log_v = log_b - tape.kernel_lse(log_u, K.T)
    return log_u, log_v


def _plan_sum(tape, log_u, log_v, support, weights=None):
    if support.exact_lse:
        return tape.log_bilinear_exp(log_u, log_v, support.log_kernel, weights)
    return tape.bilinear_exp(log_u, log_v, support.kernel if weights is None else _weighted_kernel(support))


def tape_transport_cost(tape, log_a, log_b, support, iters, estimator="plan"):
    log_u, log_v = tape_sinkhorn(tape, log_a, log_b, support, iters)
    if estimator == "plan":
        return _plan_sum(tape, log_u, log_v, support, support.cost)
    if estimator == "dual":
        mass = _plan_sum(tape, log_u, log_v, support)
        a_term = tape.sum(tape.exp(log_a) * log_u, axis=-1)
        b_term = tape.sum(tape.exp(log_b) * log_v, axis=-1)
        return support.epsilon * (a_term + b_term - mass)
    raise ValueError(f"unknown estimator {estimator!r}")


def tape_barycenters(tape: Tape, log_atoms: Var, lam: Var, support: SupportModel, iters: int) -> Var:
    """Log-weights of normalized IBP barycenters, one per row of ``lam`` (n x m)."""
    K = support.kernel_op
    n, m = lam.shape
    N = log_atoms.shape[-1]
    log_atoms3 = tape.reshape(log_atoms, (1, m, N))
    log_v = tape.const(np.zeros((n, m, N)))
    log_p = None
    for _ in range(iters):
        log_u = log_atoms3 - tape.kernel_lse(log_v, K)
        log_ktu = tape.kernel_lse(log_u, K.T)
        log_p = tape.einsum("bj,bjn->bn", lam, log_ktu)
        log_v = tape.reshape(log_p, (n, 1, N)) - log_ktu
    return tape.log_softmax(log_p)


@dataclass
class Objective:
    """Recorded objective: tape plus handles to leaves and terms."""

    tape: Tape
    alpha: Var
    beta: Var
    loss: Var
    reconstruction: Var
    regularization: Var | None
    per_datum: Var

    @property
    def value(self) -> float:
        return float(self.loss.value)

    def gradients(self):
        return self.tape.grad(self.loss, self.alpha, self.beta)


def build_objective(params: LatentParams, data, support: SupportModel, rho: float, iters: int,
                    estimator: str = "plan") -> Objective:
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    mu = stack_weights(data, support)
    n, m = params.alpha.shape
    if mu.shape[0] != n or params.beta.shape != (m, support.size):
        raise ValueError(
            f"shape mismatch: alpha {params.alpha.shape}, beta {params.beta.shape}, "
            f"data {mu.shape}, support size {support.size}"
        )
    tape = Tape()
    alpha = tape.leaf(params.alpha)
    beta = tape.leaf(params.beta)
    log_mu = np.log(np.maximum(mu, LOG_FLOOR))

    lam = tape.softmax(alpha)
    log_atoms = tape.log_softmax(beta)
    log_bary = tape_barycenters(tape, log_atoms, lam, support, iters)
    recon_terms = tape_transport_cost(tape, log_bary, tape.const(log_mu), support, iters, estimator)
    per_datum = recon_terms
    reg = None
    if rho > 0:
        log_atoms3 = tape.reshape(log_atoms, (1, m, support.size))
        pair_costs = tape_transport_cost(
            tape, log_atoms3, tape.const(log_mu[:, None, :]), support, iters, estimator
        )
        reg_terms = tape.sum(lam * pair_costs, axis=1)
        per_datum = recon_terms + rho * reg_terms
        reg = tape.sum(reg_terms)
    # fixed index-order reduction over data points
    loss = tape.sum(per_datum)
    obj = Objective(tape, alpha, beta, loss, tape.sum(recon_terms), reg, per_datum)
    if not np.isfinite(obj.value):
        bad = np.flatnonzero(~np.isfinite(per_datum.value))
        raise NumericalBreakdown(
            f"non-finite loss contribution from data point {int(bad[0]) if bad.size else -1}",
            index=int(bad[0]) if bad.size else None,
        )
    return obj


class LossGrad(NamedTuple):
    loss: float
    grad_alpha: np.ndarray
    grad_beta: np.ndarray


def loss_and_grad(params: LatentParams, data, support: SupportModel, rho: float, iters: int,
                  estimator: str = "plan") -> LossGrad:
    """Objective value and its exact gradients w.r.t. the weight and atom logits."""
    obj = build_objective(params, data, support, rho, iters, estimator)
    ga, gb = obj.gradients()
    return LossGrad(obj.value, ga, gb)


def loss_value(params, data, support, rho, iters, estimator="plan") -> float:
    return build_objective(params, data, support, rho, iters, estimator).value


def relative_error(analytic: float, numeric: float, scale: float = 0.0) -> float:
    """|a - f| / max(|a|, |f|, scale); zero when both sides vanish."""
    denom = max(abs(analytic), abs(numeric), scale)
    return 0.0 if denom == 0.0 else abs(analytic - numeric) / denom


def finite_diff_check(params: LatentParams, data, support, rho, iters, probes: int = 20,
                      step: float = 1e-5, seed: int = 0, estimator: str = "plan",
                      return_details: bool = False):
    """Compare analytic and central-difference derivatives at random coordinates.

    Returns the max relative error over ``probes`` coordinates drawn from (alpha, beta).
    The denominator is floored at ``1e-8 * |loss|`` so coordinates whose true derivative
    sits below central-difference roundoff do not dominate.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    lg = loss_and_grad(params, data, support, rho, iters, estimator)
    rng = seeded_rng(seed)
    n_alpha = params.alpha.size
    total = n_alpha + params.beta.size
    coords = rng.choice(total, size=probes, replace=probes > total)
    scale = 1e-8 * abs(lg.loss)
    details = []
    for c in coords:
        which = "alpha" if c < n_alpha else "beta"
        flat = c if c < n_alpha else c - n_alpha
        vals = []
        for sign in (1.0, -1.0):
            p = params.copy()
            arr = getattr(p, which)
            idx = np.unravel_index(flat, arr.shape)
            arr[idx] += sign * step
            vals.append(loss_value(p, data, support, rho, iters, estimator))
        numeric = (vals[0] - vals[1]) / (2 * step)
        g = lg.grad_alpha if which == "alpha" else lg.grad_beta
        analytic = float(g[np.unravel_index(flat, g.shape)])
        details.append((which, np.unravel_index(flat, g.shape), analytic, numeric,
                        relative_error(analytic, numeric, scale)))
    err = max(d[-1] for d in details)
    return (err, details) if return_details else err
