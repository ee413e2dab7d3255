"""Diagonal-covariance Gaussian mixture algebra.

Everything here works in log space: densities are evaluated through
``logsumexp`` so that mixtures in moderately high dimension do not underflow.
Mixtures keep a fixed number of components; a component with zero weight is
carried along with an ``inactive`` flag instead of being deleted.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

VAR_FLOOR = 1e-6
_LOG_2PI = np.log(2.0 * np.pi)


class DegeneratePointError(ValueError):
    """Raised when a point has zero density under every component."""

    def __init__(self, index, message=None):
        self.index = index
        super().__init__(message or f"point {index} has zero density under all components")


@dataclass(frozen=True)
class DiagGaussian:
    """Axis-aligned Gaussian with per-dimension variances."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        var = np.atleast_1d(np.asarray(self.var, dtype=float))
        if mean.ndim != 1 or mean.shape != var.shape:
            raise ValueError(f"mean and var must be equal-length vectors, got {mean.shape} and {var.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def log_pdf(self, x):
        x = np.asarray(x, dtype=float)
        return _diag_log_normal(x, self.mean, self.var)

    def pdf(self, x):
        return np.exp(self.log_pdf(x))


@dataclass(frozen=True)
class DiagGmm:
    """Finite mixture of diagonal Gaussians.

    Parameters
    ----------
    weights : array of shape (K,)
        Mixing proportions on the simplex.
    means, vars : arrays of shape (K, d)
    inactive : bool array of shape (K,), optional
        Components that carry no mass. Defaults to ``weights == 0``.
    """

    weights: np.ndarray
    means: np.ndarray
    vars: np.ndarray
    inactive: np.ndarray = field(default=None)

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        var = np.atleast_2d(np.asarray(self.vars, dtype=float))
        if mu.shape != var.shape or w.shape != (mu.shape[0],):
            raise ValueError(
                f"inconsistent mixture shapes: weights {w.shape}, means {mu.shape}, vars {var.shape}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must lie on the simplex (sum={w.sum():.12g})")
        if np.any(~np.isfinite(mu)) or np.any(~np.isfinite(var)):
            raise ValueError("means and variances must be finite")
        if np.any(var <= 0):
            raise ValueError("variances must be positive")
        if self.inactive is None:
            inactive = w == 0
        else:
            inactive = np.asarray(self.inactive, dtype=bool).copy()
            if inactive.shape != w.shape:
                raise ValueError("inactive flags must match the number of components")
        for name, arr in (("weights", w), ("means", mu), ("vars", var), ("inactive", inactive)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def components(self) -> list[DiagGaussian]:
        return [DiagGaussian(m, v) for m, v in zip(self.means, self.vars)]

    @classmethod
    def from_components(cls, weights, components: Sequence[DiagGaussian], inactive=None) -> "DiagGmm":
        dims = {c.dim for c in components}
        if len(dims) != 1:
            raise ValueError(f"components must share one dimension, got {sorted(dims)}")
        return cls(weights, np.stack([c.mean for c in components]),
                   np.stack([c.var for c in components]), inactive)

    def log_pdf(self, x):
        return log_density(self, x)

    def pdf(self, x):
        return density(self, x)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "vars": self.vars.tolist(),
            "inactive": self.inactive.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "DiagGmm":
        return cls(payload["weights"], payload["means"], payload["vars"], payload.get("inactive"))


def _diag_log_normal(x, mean, var):
    # x (..., d), mean/var (d,) -> (...)
    diff = x - mean
    return -0.5 * (np.sum(diff * diff / var, axis=-1) + np.sum(np.log(var)) + mean.shape[-1] * _LOG_2PI)


def component_log_densities(g: DiagGmm, x) -> np.ndarray:
    """``log w_k + log N(x_n; mu_k, var_k)`` as an (N, K) array."""
    x = _as_points(x, g.dim)
    return weighted_log_normals(x, g.weights, g.means, g.vars)


def weighted_log_normals(x, weights, means, vars_):
    """(N, K) array of ``log w_k + log N(x_n; mu_k, var_k)`` from raw arrays."""
    prec = 1.0 / vars_
    d = means.shape[1]
    # overflow only yields +inf distance, i.e. zero density
    with np.errstate(over="ignore"):
        if d <= 8:
            quad = np.zeros((x.shape[0], means.shape[0]))
            for j in range(d):
                diff = x[:, j, None] - means[None, :, j]
                quad += diff * diff * prec[:, j]
        else:
            diff = x[:, None, :] - means[None, :, :]
            quad = np.einsum("nkd,kd->nk", diff * diff, prec)
    log_norm = -0.5 * (np.sum(np.log(vars_), axis=1) + d * _LOG_2PI)
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    return (log_w + log_norm) - 0.5 * quad


def row_logsumexp(logp):
    """Row-wise log-sum-exp of an (N, K) array; rows of all -inf give -inf.

    Also returns the normalized exponentials, which callers usually need next.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        norm = logsumexp(logp, axis=1)
        e = np.exp(logp - norm[:, None])
    return norm, e


def log_density(g: DiagGmm, x):
    """Log of ``sum_k w_k N(x; mu_k, diag var_k)``; scalar for one point, array for many."""
    single = np.ndim(x) == 1
    out = row_logsumexp(component_log_densities(g, x))[0]
    return float(out[0]) if single else out


def density(g: DiagGmm, x):
    out = np.exp(log_density(g, x))
    return float(out) if np.ndim(out) == 0 else out


def responsibilities(g: DiagGmm, x) -> np.ndarray:
    """Posterior component probabilities for each point.

    Rows sum to one. Raises :class:`DegeneratePointError` when a point has
    zero density under every component even in log space.
    """
    single = np.ndim(x) == 1
    norm, resp = row_logsumexp(component_log_densities(g, x))
    bad = ~np.isfinite(norm)
    if np.any(bad):
        raise DegeneratePointError(int(np.flatnonzero(bad)[0]))
    return resp[0] if single else resp


def sample(g: DiagGmm, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw from the mixture: component index from the weights, then a Gaussian draw."""
    n = 1 if size is None else int(size)
    idx = rng.choice(g.n_components, size=n, p=g.weights)
    z = rng.standard_normal((n, g.dim))
    out = g.means[idx] + np.sqrt(g.vars[idx]) * z
    return out[0] if size is None else out


def gaussian_product(a: DiagGaussian, b: DiagGaussian, var_floor: float = VAR_FLOOR):
    """Product of two diagonal Gaussian densities.

    Returns the normalized product Gaussian and ``log_normalizer`` such that
    ``N(x; a) * N(x; b) = exp(log_normalizer) * N(x; product)`` for every x.
    The normalizer is ``N(mu_a; mu_b, var_a + var_b)``.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if np.any(a.var < var_floor) or np.any(b.var < var_floor):
        raise ValueError(f"variance below floor {var_floor}")
    var = 1.0 / (1.0 / a.var + 1.0 / b.var)
    mean = var * (a.mean / a.var + b.mean / b.var)
    log_normalizer = float(_diag_log_normal(a.mean, b.mean, a.var + b.var))
    return DiagGaussian(mean, var), log_normalizer


def convex_combine(mixtures: Sequence[DiagGmm], w, var_floor: float = VAR_FLOOR) -> DiagGmm:
    """Mixture of the weighted sum ``sum_i w_i s_i`` of aligned mixtures.

    Component k of every input must describe the same object. Per component the
    combination weights are ``w_i pi_ik / pi~_k`` with ``pi~_k = sum_i w_i pi_ik``.
    A component with ``pi~_k = 0`` comes back inactive, with weight 0 and the
    first input's parameters.
    """
    if len(mixtures) == 0:
        raise ValueError("need at least one mixture")
    w = np.asarray(w, dtype=float)
    if w.shape != (len(mixtures),) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("combination weights must be a simplex vector, one entry per mixture")
    shape = mixtures[0].means.shape
    for m in mixtures:
        if m.means.shape != shape:
            raise ValueError(f"mixtures must share K and d, got {m.means.shape} vs {shape}")
    if len(mixtures) == 1:
        return mixtures[0]

    pis = np.stack([m.weights for m in mixtures])            # (I, K)
    mus = np.stack([m.means for m in mixtures])              # (I, K, d)
    vs = np.stack([m.vars for m in mixtures])
    scaled = w[:, None] * pis
    pi = scaled.sum(axis=0)
    empty = pi <= 0
    safe = np.where(empty, 1.0, pi)
    coef = scaled / safe                                     # (I, K)
    mean = np.einsum("ik,ikd->kd", coef, mus)
    var = np.einsum("ik,ikd->kd", coef ** 2, vs)
    mean[empty] = mixtures[0].means[empty]
    var[empty] = mixtures[0].vars[empty]
    var = np.maximum(var, var_floor)
    pi = np.where(empty, 0.0, pi)
    pi = pi / pi.sum()
    inactive = empty | np.all(np.stack([m.inactive for m in mixtures]), axis=0)
    return DiagGmm(pi, mean, var, inactive)


def project_mean(g: DiagGmm) -> DiagGmm:
    """Distribution of the coordinate average ``(1/d) sum_j z_j`` as a 1-D mixture."""
    d = g.dim
    mean = g.means.mean(axis=1, keepdims=True)
    var = g.vars.sum(axis=1, keepdims=True) / d ** 2
    return DiagGmm(g.weights, mean, var, g.inactive)


def _as_points(x, d):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[-1] != d:
        raise ValueError(f"dimension mismatch: points have {x.shape[-1]} dims, mixture has {d}")
    return x
