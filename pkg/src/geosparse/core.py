"""Shared numerical types: supports, simplex vectors, softmax, seeded randomness."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

SIMPLEX_TOL = 1e-9
LOG_FLOOR = 1e-300
EXP_FLUSH = -700.0
# above this max(cost)/epsilon the shifted exp-matmul kernel products can drop
# the terms that dominate a row; kernel products then run as exact log-sum-exps
FAST_LSE_RANGE = 600.0


class GeoSparseError(Exception):
    """Base class for errors raised by this package."""


class SimplexError(GeoSparseError, ValueError):
    pass


class SupportError(GeoSparseError, ValueError):
    pass


class StabilityError(GeoSparseError, FloatingPointError):
    pass


class NumericalBreakdown(GeoSparseError, FloatingPointError):
    """A transport iteration produced a non-finite or degenerate value."""

    def __init__(self, message, iteration=None, index=None):
        super().__init__(message)
        self.iteration = iteration
        self.index = index


@dataclass(frozen=True, eq=False)
class SupportModel:
    """Fixed finite support with its squared-distance cost and Gibbs kernel."""

    points: np.ndarray
    cost: np.ndarray
    kernel: np.ndarray
    epsilon: float
    axes: tuple | None = None  # per-axis coordinates when points form a row-major grid

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def exact_lse(self) -> bool:
        """Whether kernel products need the exact log-domain path (see ``LogKernel``)."""
        return float(np.max(self.cost)) / self.epsilon > FAST_LSE_RANGE

    @cached_property
    def log_kernel(self) -> np.ndarray:
        return -self.cost / self.epsilon

    @cached_property
    def kernel_op(self):
        """Operator for kernel products: separable on grids, dense otherwise.

        A :class:`LogKernel` is returned when the kernel's dynamic range exceeds
        ``FAST_LSE_RANGE``.
        """
        if self.axes is None:
            return LogKernel((self.log_kernel,)) if self.exact_lse else self.kernel
        logs = tuple(-((a[:, None] - a[None, :]) ** 2) / self.epsilon for a in self.axes)
        if self.exact_lse:
            return LogKernel(logs)
        return SeparableKernel(tuple(np.exp(f) for f in logs))

    def with_epsilon(self, epsilon: float) -> "SupportModel":
        return build_support(self.points, epsilon, axes=self.axes)


class SeparableKernel:
    """Kronecker product of per-axis kernels acting on row-major grid vectors.

    Supports ``x @ op`` and ``x @ op.T`` along the last axis of ``x``.
    """

    __array_ufunc__ = None  # make ndarray defer ``@`` to __rmatmul__

    def __init__(self, factors, transposed: bool = False):
        self.factors = tuple(factors)
        self.transposed = transposed
        self.dims = tuple(f.shape[0] for f in self.factors)

    @property
    def shape(self):
        n = int(np.prod(self.dims))
        return (n, n)

    @property
    def T(self) -> "SeparableKernel":
        return SeparableKernel(self.factors, not self.transposed)

    def __rmatmul__(self, x):
        x = np.asarray(x)
        lead = x.shape[:-1]
        y = x.reshape(lead + self.dims)
        for ax, f in enumerate(self.factors):
            g = f.T if self.transposed else f
            pos = len(lead) + ax
            # contract grid axis ``ax`` with the rows of g
            y = np.moveaxis(np.moveaxis(y, pos, -1) @ g, -1, pos)
        return np.ascontiguousarray(y).reshape(x.shape)

    def toarray(self) -> np.ndarray:
        out = np.ones((1, 1))
        for f in self.factors:
            out = np.kron(out, f)
        return out.T if self.transposed else out


def _lse_axis(z: np.ndarray, log_g: np.ndarray) -> np.ndarray:
    """``y_i = log sum_j exp(z_j + log_g[j, i])`` along the last axis."""
    t = z[..., :, None] + log_g
    m = np.max(t, axis=-2)
    return m + np.log(np.sum(np.exp(t - m[..., None, :]), axis=-2))


class LogKernel:
    """Kernel held as per-axis log factors (one factor when dense).

    ``logmatmul(x)`` is ``log(exp(x) @ K)`` along the last axis, computed as a
    max-shifted log-sum-exp per output entry, so no term is lost however far the
    potentials spread.
    """

    def __init__(self, log_factors, transposed: bool = False):
        self.log_factors = tuple(log_factors)
        self.transposed = transposed
        self.dims = tuple(f.shape[0] for f in self.log_factors)

    @property
    def shape(self):
        n = int(np.prod(self.dims))
        return (n, n)

    @property
    def T(self) -> "LogKernel":
        return LogKernel(self.log_factors, not self.transposed)

    def _axes(self, x):
        lead = x.shape[:-1]
        for ax, f in enumerate(self.log_factors):
            yield len(lead) + ax, (f.T if self.transposed else f)

    def logmatmul(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        y = x.reshape(x.shape[:-1] + self.dims)
        for pos, g in self._axes(x):
            y = np.moveaxis(_lse_axis(np.moveaxis(y, pos, -1), g), -1, pos)
        return np.ascontiguousarray(y).reshape(x.shape)

    def logmatmul_vjp(self, x, grad) -> np.ndarray:
        """Adjoint of ``logmatmul`` at ``x`` applied to ``grad``."""
        x = np.asarray(x, dtype=np.float64)
        shape = x.shape[:-1] + self.dims
        steps, y = [], x.reshape(shape)
        for pos, g in self._axes(x):
            z = np.moveaxis(y, pos, -1)
            w = _lse_axis(z, g)
            steps.append((pos, g, z, w))
            y = np.moveaxis(w, -1, pos)
        gy = np.asarray(grad).reshape(shape)
        for pos, g, z, w in reversed(steps):
            gw = np.moveaxis(gy, pos, -1)
            # d w_i / d z_j = exp(z_j + g_ji - w_i)
            e = np.exp(z[..., :, None] + g - w[..., None, :])
            gy = np.moveaxis(np.einsum("...ji,...i->...j", e, gw), -1, pos)
        return np.ascontiguousarray(gy).reshape(x.shape)

    def toarray(self) -> np.ndarray:
        out = np.zeros((1, 1))
        for f in self.log_factors:
            out = (out[:, None, :, None] + f[None, :, None, :]).reshape(out.shape[0] * f.shape[0], -1)
        out = np.exp(out)
        return out.T if self.transposed else out


def flush_exp(z: np.ndarray) -> np.ndarray:
    """``exp(z)`` with entries below ``exp(EXP_FLUSH)`` set to 0.

    Subnormal operands slow BLAS matrix products by well over an order of magnitude.
    """
    z = np.asarray(z)
    e = np.zeros_like(z)
    np.exp(z, out=e, where=z >= EXP_FLUSH)
    return e


def kernel_matmul(x: np.ndarray, kernel) -> np.ndarray:
    """``x @ kernel`` along the last axis of a batch of vectors.

    A stacked ``x @ K`` runs one small gemm per leading index and streams K from
    memory each time; flattening the batch makes it a single product.
    """
    if not isinstance(kernel, np.ndarray) or x.ndim <= 2:
        return x @ kernel
    return (x.reshape(-1, x.shape[-1]) @ kernel).reshape(x.shape[:-1] + kernel.shape[-1:])


def pairwise_sq_dists(points: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", points, points)
    cost = sq[:, None] + sq[None, :] - 2.0 * points @ points.T
    np.maximum(cost, 0.0, out=cost)
    cost = 0.5 * (cost + cost.T)
    np.fill_diagonal(cost, 0.0)
    return cost


def default_epsilon(cost: np.ndarray) -> float:
    """0.002 x max cost; falls back to 1.0 on a degenerate single-point support."""
    cmax = float(np.max(cost)) if cost.size else 0.0
    return 0.002 * cmax if cmax > 0 else 1.0


def build_support(points, epsilon: float | None = None, axes=None) -> SupportModel:
    """Build the cost matrix and entropic kernel for a list of support points.

    ``epsilon=None`` selects :func:`default_epsilon`.
    """
    try:
        pts = np.array(points, dtype=np.float64)
    except ValueError as exc:
        raise SupportError(f"support points have inconsistent dimensions: {exc}") from exc
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise SupportError("support must be a non-empty list of equal-length vectors")
    if not np.all(np.isfinite(pts)):
        raise SupportError("support points must be finite")
    cost = pairwise_sq_dists(pts)
    if epsilon is None:
        epsilon = default_epsilon(cost)
    epsilon = float(epsilon)
    if not epsilon > 0:
        raise SupportError(f"epsilon must be positive, got {epsilon}")
    kernel = np.exp(-cost / epsilon)
    if np.any(kernel == 0.0):
        i, j = np.unravel_index(np.argmin(kernel), kernel.shape)
        raise StabilityError(
            f"kernel underflows to 0 for pair ({i}, {j}) with cost {cost[i, j]:.6g} "
            f"at epsilon={epsilon:.6g}; increase epsilon"
        )
    for arr in (pts, cost, kernel):
        arr.flags.writeable = False
    if axes is not None:
        axes = tuple(np.array(a, dtype=np.float64) for a in axes)
        if int(np.prod([a.size for a in axes])) != pts.shape[0]:
            raise SupportError("grid axes do not match the number of support points")
        for a in axes:
            a.flags.writeable = False
    return SupportModel(points=pts, cost=cost, kernel=kernel, epsilon=epsilon, axes=axes)


def grid_support(shape, epsilon: float | None = None, extent=(0.0, 1.0)) -> SupportModel:
    """Regular grid on ``extent`` in each dimension, points ordered row-major."""
    shape = (shape,) if np.isscalar(shape) else tuple(shape)
    axes = [np.linspace(extent[0], extent[1], s) for s in shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    return build_support(pts, epsilon, axes=axes)


def validate_simplex(weights, tol: float = SIMPLEX_TOL, what: str = "measure") -> np.ndarray:
    """Check that the last axis of ``weights`` lies on the simplex and renormalize.

    Entries must be nonnegative and each row must sum to one within ``tol``.
    """
    w = np.array(weights, dtype=np.float64)
    if w.ndim == 0 or w.shape[-1] == 0:
        raise SimplexError(f"{what} is empty")
    if not np.all(np.isfinite(w)):
        raise SimplexError(f"{what} has non-finite entries")
    if np.any(w < 0):
        raise SimplexError(f"{what} has negative entries (min {w.min():.3g})")
    sums = w.sum(axis=-1, keepdims=True)
    err = np.abs(sums - 1.0)
    if np.any(err > tol):
        raise SimplexError(f"{what} does not sum to 1 (max deviation {err.max():.3g})")
    return w / sums


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Probability vector on a shared support."""

    weights: np.ndarray
    support: SupportModel | None = field(default=None, repr=False)

    def __post_init__(self):
        w = validate_simplex(self.weights)
        if w.ndim != 1:
            raise SimplexError("a DiscreteMeasure holds a single weight vector")
        if self.support is not None and w.shape[0] != self.support.size:
            raise SupportError(
                f"measure has {w.shape[0]} weights but support has {self.support.size} points"
            )
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return self.weights.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.weights if dtype is None else self.weights.astype(dtype)


def as_weights(measure, support: SupportModel | None = None) -> np.ndarray:
    """Extract a weight vector from a DiscreteMeasure or array, checking the support."""
    if isinstance(measure, DiscreteMeasure):
        if support is not None and measure.support is not None and measure.support is not support:
            if measure.support.size != support.size or not np.array_equal(
                measure.support.points, support.points
            ):
                raise SupportError("measures live on different supports")
        w = measure.weights
    else:
        w = validate_simplex(measure)
    if support is not None and w.shape[-1] != support.size:
        raise SupportError(f"measure has {w.shape[-1]} weights but support has {support.size} points")
    return w


def stack_weights(measures, support: SupportModel | None = None) -> np.ndarray:
    """Stack measures (or a 2-D array of weight rows) into an (k, N) array."""
    if isinstance(measures, np.ndarray) and measures.ndim == 2:
        w = validate_simplex(measures)
        if support is not None and w.shape[1] != support.size:
            raise SupportError("measure width does not match support")
        return w
    return np.stack([as_weights(m, support) for m in measures])


def softmax_rows(logits) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    x = np.asarray(logits, dtype=np.float64)
    if np.any(np.isnan(x)):
        raise ValueError("softmax input contains NaN")
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(logits) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    z = x - np.max(x, axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def inverse_softmax(weights, floor: float = 1e-12) -> np.ndarray:
    """Logits whose softmax reproduces ``weights`` (up to the floor)."""
    return np.log(np.maximum(np.asarray(weights, dtype=np.float64), floor))


@dataclass
class LatentParams:
    """Unconstrained logits: ``alpha`` (n x m) for weights, ``beta`` (m x N) for atoms."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.alpha = np.array(self.alpha, dtype=np.float64)
        self.beta = np.array(self.beta, dtype=np.float64)
        if self.alpha.ndim != 2 or self.beta.ndim != 2:
            raise ValueError("alpha and beta must be 2-D")
        if not (np.all(np.isfinite(self.alpha)) and np.all(np.isfinite(self.beta))):
            raise NumericalBreakdown("latent parameters contain non-finite values")

    @property
    def coefficients(self) -> np.ndarray:
        return softmax_rows(self.alpha)

    @property
    def atoms(self) -> np.ndarray:
        return softmax_rows(self.beta)

    def copy(self) -> "LatentParams":
        return LatentParams(self.alpha.copy(), self.beta.copy())


def seeded_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed) & (2**64 - 1))))


def derive_seed(seed: int, *keys: int) -> int:
    """Child seed for an independent job; stable across runs and job orderings."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def uniform_simplex(rng: np.random.Generator, size: int, dim: int, method: str = "gaps") -> np.ndarray:
    """Draw ``size`` points on the ``dim``-simplex.

    ``"gaps"`` is uniform (spacings of sorted uniforms); ``"normalized"`` divides raw
    uniforms by their sum, which is *not* uniform on the simplex.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if method == "gaps":
        u = np.sort(rng.random((size, dim - 1)), axis=1)
        edges = np.concatenate([np.zeros((size, 1)), u, np.ones((size, 1))], axis=1)
        return np.diff(edges, axis=1)
    if method == "normalized":
        u = rng.random((size, dim))
        return u / u.sum(axis=1, keepdims=True)
    raise ValueError(f"unknown simplex sampler {method!r}")
