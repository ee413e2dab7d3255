"""Planar affine view transforms, alignment estimation and the view prior.

An affine map is stored as a 2x3 matrix ``[linear | offset]`` acting on row
vectors as ``x -> linear @ x + offset``. Its view representation is the
row-major flattening ``(l00, l01, o0, l10, l11, o1)``.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from ._validation import as_rng, check_points
from .gmm import VAR_FLOOR, DiagGaussian, DiagGmm

MIN_ABS_DET = 1e-6


class AlignmentError(ValueError):
    """Raised when the correspondences do not pin down an affine map."""


@dataclass(frozen=True)
class Affine2D:
    linear: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        L = np.asarray(self.linear, dtype=float).reshape(2, 2).copy()
        o = np.asarray(self.offset, dtype=float).reshape(2).copy()
        if abs(np.linalg.det(L)) < MIN_ABS_DET:
            raise ValueError(f"affine map is not invertible (|det| = {abs(np.linalg.det(L)):.3g})")
        L.setflags(write=False)
        o.setflags(write=False)
        object.__setattr__(self, "linear", L)
        object.__setattr__(self, "offset", o)

    @classmethod
    def identity(cls) -> "Affine2D":
        return cls(np.eye(2), np.zeros(2))

    @classmethod
    def from_params(cls, angle=0.0, scale=(1.0, 1.0), shear=0.0, offset=(0.0, 0.0)) -> "Affine2D":
        """Rotation by ``angle`` (radians) of a sheared, axis-scaled map, then translation."""
        c, s = np.cos(angle), np.sin(angle)
        R = np.array([[c, -s], [s, c]])
        S = np.array([[1.0, shear], [0.0, 1.0]])
        return cls(R @ S @ np.diag(scale), offset)

    @classmethod
    def from_vector(cls, v) -> "Affine2D":
        m = np.asarray(v, dtype=float).reshape(2, 3)
        return cls(m[:, :2], m[:, 2])

    @property
    def matrix(self) -> np.ndarray:
        return np.hstack([self.linear, self.offset[:, None]])

    def to_vector(self) -> np.ndarray:
        return self.matrix.reshape(-1)

    def compose(self, other: "Affine2D") -> "Affine2D":
        """``self o other``: apply ``other`` first."""
        return Affine2D(self.linear @ other.linear, self.linear @ other.offset + self.offset)

    def to_dict(self) -> dict:
        return {"linear": self.linear.tolist(), "offset": self.offset.tolist()}

    @classmethod
    def from_dict(cls, payload: dict) -> "Affine2D":
        return cls(payload["linear"], payload["offset"])

    def __call__(self, points):
        return apply(self, points)


def apply(theta: Affine2D, points) -> np.ndarray:
    x = np.asarray(points, dtype=float)
    return x @ theta.linear.T + theta.offset


def invert(theta: Affine2D) -> Affine2D:
    inv = np.linalg.inv(theta.linear)
    return Affine2D(inv, -inv @ theta.offset)


def estimate_alignment(source, target, weights=None) -> Affine2D:
    """Weighted least-squares affine map sending ``source`` points onto ``target``.

    Minimizes ``sum_k w_k |theta(source_k) - target_k|^2``. Needs at least
    three non-collinear correspondences with positive weight; otherwise the
    map is not identifiable and :class:`AlignmentError` is raised.
    """
    src = np.asarray(source, dtype=float)
    dst = np.asarray(target, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ValueError(f"source and target must both be (K, 2), got {src.shape} and {dst.shape}")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (len(src),) or np.any(w < 0):
        raise ValueError("weights must be nonnegative, one per correspondence")
    live = w > 0
    if live.sum() < 3:
        raise AlignmentError(f"need 3 active correspondences, got {int(live.sum())}")
    X = np.hstack([src[live], np.ones((live.sum(), 1))])
    sw = np.sqrt(w[live])[:, None]
    A = X * sw
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[-1] <= 1e-9 * sv[0]:
        raise AlignmentError("correspondences are collinear")
    sol, *_ = np.linalg.lstsq(A, dst[live] * sw, rcond=None)
    try:
        return Affine2D(sol[:2].T, sol[2])
    except ValueError as exc:
        raise AlignmentError(str(exc)) from exc


@dataclass(frozen=True)
class ViewDescriptor:
    view_id: int
    theta: Affine2D

    @property
    def v(self) -> np.ndarray:
        return self.theta.to_vector()

    def to_dict(self) -> dict:
        return {"view_id": int(self.view_id), "theta": self.theta.to_dict(), "v": self.v.tolist()}

    @classmethod
    def from_dict(cls, payload: dict) -> "ViewDescriptor":
        return cls(int(payload["view_id"]), Affine2D.from_dict(payload["theta"]))


@dataclass(frozen=True)
class ViewPrior:
    """Gaussian mixture over flattened view transforms, one component per view id."""

    mixture: DiagGmm
    view_ids: tuple

    def component_mean(self, view_id: int) -> Affine2D:
        return Affine2D.from_vector(self.mixture.means[self.view_ids.index(view_id)])

    def to_dict(self) -> dict:
        out = self.mixture.to_dict()
        out["view_ids"] = list(self.view_ids)
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "ViewPrior":
        return cls(DiagGmm.from_dict(payload), tuple(payload["view_ids"]))


def fit_view_prior(descriptors: Sequence[ViewDescriptor], n_components: int | None = None,
                   var_floor: float = VAR_FLOOR) -> ViewPrior:
    """One diagonal Gaussian per view id: empirical mean and floored variance of v."""
    groups = defaultdict(list)
    for desc in descriptors:
        groups[desc.view_id].append(desc.v)
    if not groups:
        raise ValueError("no descriptors")
    if n_components is not None and n_components != len(groups):
        raise ValueError(f"expected {n_components} view groups, found {len(groups)}")
    ids = tuple(sorted(groups))
    means, vars_, sizes = [], [], []
    for vid in ids:
        vs = np.asarray(groups[vid])
        if len(vs) < 2:
            raise ValueError(f"view {vid} has {len(vs)} descriptor(s); need at least 2")
        means.append(vs.mean(axis=0))
        vars_.append(np.maximum(vs.var(axis=0), var_floor))
        sizes.append(len(vs))
    sizes = np.asarray(sizes, dtype=float)
    return ViewPrior(DiagGmm(sizes / sizes.sum(), np.stack(means), np.stack(vars_)), ids)


class MonteCarloEstimate(NamedTuple):
    value: float
    stderr: float


def mc_kl(q: DiagGaussian, p, n_samples: int, rng=None) -> MonteCarloEstimate:
    """Monte-Carlo estimate of KL(q || p) with draws from q.

    ``p`` is a :class:`ViewPrior`, a :class:`DiagGmm` or a :class:`DiagGaussian`.
    """
    rng = as_rng(rng)
    prior = p.mixture if isinstance(p, ViewPrior) else p
    if isinstance(prior, DiagGaussian):
        prior = DiagGmm([1.0], prior.mean[None], prior.var[None])
    if prior.dim != q.dim:
        raise ValueError(f"dimension mismatch: q has {q.dim}, p has {prior.dim}")
    v = q.mean + np.sqrt(q.var) * rng.standard_normal((int(n_samples), q.dim))
    diff = q.log_pdf(v) - prior.log_pdf(check_points(v))
    return MonteCarloEstimate(float(diff.mean()), float(diff.std(ddof=1) / np.sqrt(len(diff))))
