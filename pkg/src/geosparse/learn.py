"""Dictionary learning with the geometric sparse regularizer.

Atoms and weights are optimized through row-softmax logits with full-batch Adam
steps on the unrolled entropic objective.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .core import (
    DiscreteMeasure,
    GeoSparseError,
    LatentParams,
    NumericalBreakdown,
    SupportModel,
    derive_seed,
    inverse_softmax,
    seeded_rng,
    softmax_rows,
    stack_weights,
    uniform_simplex,
    validate_simplex,
)
from .grad import build_objective, loss_and_grad
from .ot import Diagnostics, shift_nonnegative, sinkhorn_costs

log = logging.getLogger(__name__)

ATOM_INITS = ("random_simplex", "random_data", "wasserstein_kmeanspp")
WEIGHT_INITS = ("uniform_simplex", "histogram_regression", "quadratic_program")


@dataclass(frozen=True)
class FitConfig:
    rho: float = 0.1
    outer_iters: int = 250
    sinkhorn_iters: int = 50
    learning_rate: float = 0.25
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    atom_init: str = "wasserstein_kmeanspp"
    weight_init: str = "uniform_simplex"
    estimator: str = "plan"
    simplex_sampler: str = "gaps"
    keep_history: bool = False

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")
        if self.outer_iters < 1 or self.sinkhorn_iters < 1:
            raise ValueError("outer_iters and sinkhorn_iters must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.atom_init not in ATOM_INITS:
            raise ValueError(f"atom_init must be one of {ATOM_INITS}")
        if self.weight_init not in WEIGHT_INITS:
            raise ValueError(f"weight_init must be one of {WEIGHT_INITS}")
        if self.estimator not in ("plan", "dual"):
            raise ValueError("estimator must be 'plan' or 'dual'")

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown FitConfig fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "FitConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class FitResult:
    dictionary: np.ndarray
    coefficients: np.ndarray
    loss_trace: np.ndarray
    params: LatentParams
    diagnostics: Diagnostics = field(default_factory=Diagnostics)
    history: list | None = None

    @property
    def atoms(self) -> list[DiscreteMeasure]:
        return [DiscreteMeasure(a) for a in self.dictionary]

    @property
    def atom_usage(self) -> float:
        """min over atoms of the largest weight any datum places on it."""
        return float(np.min(np.max(self.coefficients, axis=0)))


class FitAborted(NumericalBreakdown):
    def __init__(self, message, iteration, partial_trace):
        super().__init__(message, iteration=iteration)
        self.partial_trace = np.asarray(partial_trace)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, *params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update. Returns (new_params, new_state)."""
    t = state.t + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v, t)


# --------------------------------------------------------------------------
# Initialization
# --------------------------------------------------------------------------


def kmeanspp_indices(distance_fn, n: int, m: int, rng: np.random.Generator, diagnostics=None):
    """D^2 seeding: ``distance_fn(i)`` returns squared distances from datum i to all data."""
    chosen = [int(rng.integers(n))]
    closest = shift_nonnegative(distance_fn(chosen[0]))
    for _ in range(1, m):
        w = closest.copy()
        w[chosen] = 0.0
        total = w.sum()
        if total <= 0 or not np.isfinite(total):
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(rest))
            if diagnostics is not None:
                diagnostics.record("kmeanspp_uniform_fallback", index=nxt)
        else:
            nxt = int(rng.choice(n, p=w / total))
        chosen.append(nxt)
        d = distance_fn(nxt)
        if np.min(d) < 0 and diagnostics is not None:
            diagnostics.record("distance_shift", amount=float(-np.min(d)))
        closest = np.minimum(closest, shift_nonnegative(d))
    return chosen


def init_atoms(data, m: int, support: SupportModel, method: str, rng: np.random.Generator,
               iters: int = 50, estimator: str = "plan", diagnostics: Diagnostics | None = None):
    """Initial atoms (m x N) and their logits."""
    mu = stack_weights(data, support)
    n = mu.shape[0]
    if method == "random_simplex":
        atoms = uniform_simplex(rng, m, support.size)
    elif method in ("random_data", "wasserstein_kmeanspp"):
        if n < m:
            raise GeoSparseError(f"{method} needs at least m={m} data points, got {n}")
        if method == "random_data":
            idx = rng.choice(n, size=m, replace=False)
        else:
            idx = kmeanspp_indices(
                lambda i: sinkhorn_costs(mu[i][None], mu, support, iters, estimator),
                n, m, rng, diagnostics,
            )
        if diagnostics is not None:
            diagnostics.record("atom_init", method=method, indices=[int(i) for i in idx])
        atoms = mu[np.asarray(idx)]
    else:
        raise ValueError(f"unknown atom init {method!r}")
    return atoms, inverse_softmax(atoms)


def histogram_regression(data, dictionary, support, iters: int = 50, steps: int = 50, lr: float = 0.1):
    """Per-datum barycentric weights by gradient descent on softmax logits."""
    mu = stack_weights(data, support)
    D = stack_weights(dictionary, support)
    alpha = np.zeros((mu.shape[0], D.shape[0]))
    beta = inverse_softmax(D, floor=1e-300)
    for _ in range(steps):
        # each row's gradient depends only on its own datum, so the sum decouples
        lg = loss_and_grad(LatentParams(alpha, beta), mu, support, 0.0, iters)
        alpha = alpha - lr * lg.grad_alpha
    return softmax_rows(alpha)


def init_weights(data, dictionary, support: SupportModel, method: str, rng: np.random.Generator,
                 iters: int = 50, sampler: str = "gaps"):
    """Initial coefficients (n x m) and their logits."""
    from .coding import build_problem, solve_qp

    mu = stack_weights(data, support)
    D = stack_weights(dictionary, support)
    n, m = mu.shape[0], D.shape[0]
    if m < 1:
        raise ValueError("dictionary must be nonempty")
    if m == 1:
        coeffs = np.ones((n, 1))
    elif method == "uniform_simplex":
        coeffs = uniform_simplex(rng, n, m, method=sampler)
    elif method == "histogram_regression":
        coeffs = histogram_regression(mu, D, support, iters)
    elif method == "quadratic_program":
        coeffs = np.stack([solve_qp(build_problem(x, D, support, iters))[0] for x in mu])
    else:
        raise ValueError(f"unknown weight init {method!r}")
    return coeffs, inverse_softmax(coeffs)


# --------------------------------------------------------------------------
# Objective pieces and the training loop
# --------------------------------------------------------------------------


def regularizer(dictionary, coefficients, data, support: SupportModel, iters: int,
                estimator: str = "plan") -> float:
    """Coefficient-weighted sum of entropic W2^2 from each atom to each datum."""
    D = stack_weights(dictionary, support)
    mu = stack_weights(data, support)
    lam = validate_simplex(coefficients, what="coefficients")
    costs = sinkhorn_costs(D[None, :, :], mu[:, None, :], support, iters, estimator)
    return float(np.sum(lam * costs))


def fit(data, m: int, support: SupportModel, config: FitConfig = FitConfig()) -> FitResult:
    """Run exactly ``config.outer_iters`` Adam steps on the regularized objective."""
    mu = stack_weights(data, support)
    n = mu.shape[0]
    if n < 1 or m < 1:
        raise ValueError("need at least one datum and one atom")
    rng = seeded_rng(config.seed)
    diag = Diagnostics()
    L_s = config.sinkhorn_iters
    atoms, beta = init_atoms(mu, m, support, config.atom_init, rng, L_s, config.estimator, diag)
    _, alpha = init_weights(mu, atoms, support, config.weight_init, rng, L_s, config.simplex_sampler)
    state = AdamState.zeros_like(alpha, beta)
    trace = []
    history = [] if config.keep_history else None
    for k in range(config.outer_iters):
        params = LatentParams(alpha, beta)
        try:
            lg = loss_and_grad(params, mu, support, config.rho, L_s, config.estimator)
        except NumericalBreakdown as exc:
            raise FitAborted(f"numerical breakdown at iteration {k}: {exc}", k, trace) from exc
        trace.append(lg.loss)
        if history is not None:
            history.append((params.atoms, params.coefficients))
        (alpha, beta), state = adam_step(
            (alpha, beta), (lg.grad_alpha, lg.grad_beta), state, config.learning_rate,
            config.adam_beta1, config.adam_beta2, config.adam_eps,
        )
        if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(beta))):
            raise FitAborted(f"non-finite parameters after iteration {k}", k, trace)
        if k % 50 == 0:
            log.debug("iter %d loss %.6g", k, lg.loss)
    final = LatentParams(alpha, beta)
    return FitResult(
        dictionary=final.atoms,
        coefficients=final.coefficients,
        loss_trace=np.asarray(trace),
        params=final,
        diagnostics=diag,
        history=history,
    )


def fit_with_restarts(data, m: int, support: SupportModel, config: FitConfig = FitConfig(),
                      restarts: int = 3, loss_slack: float = 0.05) -> FitResult:
    """Several seeded runs; keep one that uses every atom among near-best losses.

    Among runs whose final loss is within ``loss_slack`` of the best, pick the one
    maximizing ``min_j max_i Lambda_ij``; ties go to the lower final loss.
    """
    runs = []
    for r in range(restarts):
        cfg = config.replace(seed=derive_seed(config.seed, r)) if r else config
        res = fit(data, m, support, cfg)
        final = build_objective(res.params, data, support, config.rho, config.sinkhorn_iters,
                                config.estimator).value
        runs.append((final, res))
    best = min(f for f, _ in runs)
    near = [(f, r) for f, r in runs if f <= best + loss_slack * abs(best)]
    near.sort(key=lambda fr: (-fr[1].atom_usage, fr[0]))
    chosen_loss, chosen = near[0]
    chosen.diagnostics.record(
        "restart_choice", run=next(i for i, (_, r) in enumerate(runs) if r is chosen),
        final_loss=float(chosen_loss),
        usage=chosen.atom_usage, candidates=len(near),
    )
    return chosen
