"""Probabilistic slot attention: an EM loop fitting a K-slot diagonal mixture.

The query/key/value projections of slot attention are identities here, so the
slots are fitted directly on the point coordinates of one view.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import as_rng, check_points, check_positive_int
from .gmm import _LOG_2PI, VAR_FLOOR, DegeneratePointError, DiagGmm


def inactive_threshold(k_slots: int) -> float:
    """Mixing weight below which a slot counts as absent from a view."""
    return 0.01 / k_slots


@dataclass(frozen=True)
class SlotState:
    """Per-view slot parameters: means and variances (K, d), weights (K,)."""

    mu: np.ndarray
    sigma2: np.ndarray
    pi: np.ndarray
    inactive: np.ndarray = field(default=None)

    def __post_init__(self):
        mu = np.atleast_2d(np.asarray(self.mu, dtype=float))
        sigma2 = np.atleast_2d(np.asarray(self.sigma2, dtype=float))
        pi = np.atleast_1d(np.asarray(self.pi, dtype=float))
        if mu.shape != sigma2.shape or pi.shape != (mu.shape[0],):
            raise ValueError(f"inconsistent slot shapes {mu.shape}, {sigma2.shape}, {pi.shape}")
        inactive = (pi == 0) if self.inactive is None else np.asarray(self.inactive, dtype=bool)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma2", sigma2)
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "inactive", inactive)

    @property
    def k(self) -> int:
        return self.mu.shape[0]

    @property
    def d(self) -> int:
        return self.mu.shape[1]

    def active(self, threshold: float | None = None) -> np.ndarray:
        """Boolean mask of slots that are present (not flagged, weight above threshold)."""
        if threshold is None:
            threshold = inactive_threshold(self.k)
        return ~self.inactive & (self.pi >= threshold)

    def permute(self, perm) -> "SlotState":
        """Reorder slots so that new slot i is old slot ``perm[i]``."""
        perm = np.asarray(perm, dtype=int)
        return type(self)(self.mu[perm], self.sigma2[perm], self.pi[perm], self.inactive[perm])

    def to_gmm(self) -> DiagGmm:
        return DiagGmm(self.pi, self.mu, self.sigma2, self.inactive)

    @classmethod
    def from_gmm(cls, g: DiagGmm) -> "SlotState":
        return cls(np.array(g.means), np.array(g.vars), np.array(g.weights), np.array(g.inactive))

    def to_dict(self) -> dict:
        return self.to_gmm().to_dict()

    @classmethod
    def from_dict(cls, payload: dict) -> "SlotState":
        return cls.from_gmm(DiagGmm.from_dict(payload))


@dataclass(frozen=True)
class Attention:
    """Responsibilities ``a`` (rows sum to 1) and their column-normalized form ``a_hat``."""

    a: np.ndarray
    a_hat: np.ndarray
    loglik: float = float("nan")


@dataclass(frozen=True)
class PsaConfig:
    k_slots: int = 3
    iterations: int = 20
    var_floor: float = VAR_FLOOR
    seed: int = 0
    init: Literal["standard_normal_means", "provided_means"] = "standard_normal_means"
    means: tuple | None = None
    # group points into objects by spatial gaps after EM; see reconcile_components
    gap_factor: float | None = None

    def __post_init__(self):
        check_positive_int(self.k_slots, "k_slots")
        check_positive_int(self.iterations, "iterations")
        if not self.var_floor > 0:
            raise ValueError("var_floor must be positive")
        if self.init not in ("standard_normal_means", "provided_means"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.init == "provided_means" and self.means is None:
            raise ValueError("provided_means init requires means")

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in
               ("k_slots", "iterations", "var_floor", "seed", "init", "gap_factor")}
        if self.means is not None:
            out["means"] = np.asarray(self.means).tolist()
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "PsaConfig":
        payload = dict(payload)
        if payload.get("means") is not None:
            payload["means"] = tuple(map(tuple, payload["means"]))
        return cls(**payload)


def init_slots(cfg: PsaConfig, d: int, rng=None, means=None) -> SlotState:
    """Uniform weights, unit variances, means from N(0, I) or the provided matrix."""
    check_positive_int(d, "d")
    k = cfg.k_slots
    if means is None and cfg.init == "provided_means":
        means = cfg.means
    if means is not None:
        mu = np.array(means, dtype=float, copy=True)
        if mu.shape != (k, d):
            raise ValueError(f"provided means must have shape {(k, d)}, got {mu.shape}")
    else:
        mu = as_rng(rng).standard_normal((k, d))
    return SlotState(mu, np.ones((k, d)), np.full(k, 1.0 / k), np.zeros(k, dtype=bool))


def _log_joint_t(zt, slots: SlotState):
    # (K, N) layout: reductions over slots stay contiguous and fast for small K
    prec = 1.0 / slots.sigma2
    quad = np.zeros((slots.k, zt.shape[1]))
    with np.errstate(over="ignore"):
        for j in range(zt.shape[0]):
            diff = zt[j][None, :] - slots.mu[:, j, None]
            quad += diff * diff * prec[:, j, None]
    with np.errstate(divide="ignore"):
        const = np.log(slots.pi) - 0.5 * (np.sum(np.log(slots.sigma2), axis=1) + zt.shape[0] * _LOG_2PI)
    return const[:, None] - 0.5 * quad


def _e_step_t(slots: SlotState, zt: np.ndarray):
    logp = _log_joint_t(zt, slots)
    m = logp.max(axis=0)
    if not np.all(np.isfinite(m)):
        raise DegeneratePointError(int(np.flatnonzero(~np.isfinite(m))[0]))
    logp -= m
    e = np.exp(logp, out=logp)
    tot = e.sum(axis=0)
    a = np.divide(e, tot, out=e)
    loglik = float(np.sum(m) + np.sum(np.log(tot)))
    colsum = a.sum(axis=1)
    if np.all(colsum > 0):
        a_hat = a / colsum[:, None]
    else:
        a_hat = np.zeros_like(a)
        live = colsum > 0
        a_hat[live] = a[live] / colsum[live, None]
    return a, a_hat, colsum, loglik


def _m_step_t(slots: SlotState, a_hat, colsum, zt, var_floor: float) -> SlotState:
    n = zt.shape[1]
    empty = colsum <= 0
    mu = a_hat @ zt.T
    sigma2 = np.empty_like(mu)
    for j in range(zt.shape[0]):
        diff = zt[j][None, :] - mu[:, j, None]
        sigma2[:, j] = np.sum(a_hat * diff * diff, axis=1)
    sigma2 = np.maximum(sigma2, var_floor)
    pi = colsum / n
    if np.any(empty):
        mu[empty] = slots.mu[empty]
        sigma2[empty] = slots.sigma2[empty]
        pi[empty] = 0.0
    pi = pi / pi.sum()
    return SlotState(mu, sigma2, pi, slots.inactive | empty)


def _transposed(z):
    return np.ascontiguousarray(z.T)


def e_step(slots: SlotState, points) -> Attention:
    """Responsibilities of every slot for every point, and their column normalization."""
    z = check_points(points, slots.d)
    a, a_hat, _, loglik = _e_step_t(slots, _transposed(z))
    return Attention(a.T, a_hat.T, loglik)


def m_step(slots: SlotState, attn: Attention, points, var_floor: float = VAR_FLOOR) -> SlotState:
    """Closed-form updates: weighted means, variances about the new means, mean responsibilities.

    A slot whose responsibility column is empty keeps its previous parameters
    and is flagged inactive with weight zero.
    """
    z = check_points(points, slots.d)
    if attn.a.shape != (z.shape[0], slots.k):
        raise ValueError(f"attention shape {attn.a.shape} does not match {(z.shape[0], slots.k)}")
    a_hat = np.ascontiguousarray(attn.a_hat.T)
    return _m_step_t(slots, a_hat, attn.a.sum(axis=0), _transposed(z), var_floor)


def run(points, cfg: PsaConfig, rng=None, init: SlotState | None = None):
    """Alternate ``cfg.iterations`` E and M steps.

    Returns the final state, the attention of the last E step, and the
    log-likelihood of the data recorded before every M step.
    """
    z = check_points(points)
    slots = init if init is not None else init_slots(cfg, z.shape[1], rng)
    if slots.d != z.shape[1]:
        raise ValueError(f"slot dimension {slots.d} does not match points {z.shape[1]}")
    zt = _transposed(z)
    trace = []
    for _ in range(cfg.iterations):
        a, a_hat, colsum, loglik = _e_step_t(slots, zt)
        trace.append(loglik)
        slots = _m_step_t(slots, a_hat, colsum, zt, cfg.var_floor)
    return slots, Attention(a.T, a_hat.T, loglik), trace


def log_likelihood(slots: SlotState, points) -> float:
    z = check_points(points, slots.d)
    logp = _log_joint_t(_transposed(z), slots)
    m = logp.max(axis=0)
    return float(np.sum(m) + np.sum(np.log(np.exp(logp - m).sum(axis=0))))


def point_components(points, gap_factor: float, min_fraction: float = 0.01, max_nodes: int = 512,
                     max_cells: int = 1 << 20):
    """Spatially connected point groups.

    The linking scale is ``gap_factor`` times the median nearest-neighbor
    distance within an evenly strided subsample of at most ``max_nodes``
    points. Points are binned on a square grid of that cell size and
    8-connected occupied cells form a group, so points closer than one cell
    always share a group and points in different groups are at least one cell
    apart. Groups holding fewer than ``min_fraction`` of the points get label
    -1. Returns the labels and the number of retained groups, numbered by
    decreasing size.
    """
    z = check_points(points, min_samples=2)
    n = len(z)
    nodes = z[:: max(1, -(-n // max_nodes))]
    nn = cKDTree(nodes).query(nodes, k=2)[0][:, 1]
    cell = gap_factor * max(float(np.median(nn)), 1e-12)
    lo = z.min(axis=0)
    idx = np.floor((z - lo) / cell).astype(np.int64)
    shape = idx.max(axis=0) + 1
    if z.shape[1] != 2 or np.prod(shape) > max_cells:
        raise ValueError("grid grouping needs 2-D points with a bounded extent")
    grid = np.zeros(shape, dtype=bool)
    grid[idx[:, 0], idx[:, 1]] = True
    cells, _ = ndimage.label(grid, structure=np.ones((3, 3), dtype=bool))
    raw = cells[idx[:, 0], idx[:, 1]] - 1
    sizes = np.bincount(raw)
    order = np.argsort(-sizes, kind="stable")
    keep = order[sizes[order] >= min_fraction * n]
    relabel = np.full(len(sizes), -1)
    relabel[keep] = np.arange(len(keep))
    return relabel[raw], len(keep)


def reconcile_components(slots: SlotState, points, gap_factor: float, var_floor: float = VAR_FLOOR):
    """Give every spatially connected point group exactly one slot.

    Slots sharing a group are fused and slots spanning several groups are
    split: each group (largest first) takes the active slot that owns most of
    its points, or a spare slot, and gets the group's moments and mass share.
    Unused slots become inactive with zero weight. Slot indices are inherited
    from ``slots``, so the slot order of the input fit is kept. When there are
    more groups than slots the input is returned unchanged. Tiny groups (below
    ``min_fraction`` of the points) carry no slot and do not enter the moments.

    Returns the new state and whether anything changed.
    """
    z = check_points(points, slots.d)
    labels, n_groups = point_components(z, gap_factor)
    if n_groups == 0 or n_groups > slots.k:
        return slots, False
    owner = np.argmax(_e_step_t(slots, _transposed(z))[0], axis=0)
    counts = np.zeros((n_groups, slots.k))
    live = labels >= 0
    np.add.at(counts, (labels[live], owner[live]), 1.0)
    counts[:, slots.inactive | (slots.pi <= 0)] = -1.0
    mu, s2 = slots.mu.copy(), slots.sigma2.copy()
    pi = np.zeros(slots.k)
    taken = np.zeros(slots.k, dtype=bool)
    for g in range(n_groups):
        score = np.where(taken, -np.inf, counts[g])
        k = int(np.argmax(score))
        taken[k] = True
        zg = z[labels == g]
        mu[k] = zg.mean(axis=0)
        s2[k] = np.maximum(zg.var(axis=0), var_floor)
        pi[k] = len(zg)
    pi /= pi.sum()
    # soft EM means are pulled by neighbouring tails; group moments are exact
    same = (np.array_equal(taken, slots.active())
            and np.allclose(mu[taken], slots.mu[taken], rtol=0, atol=1e-12)
            and np.allclose(s2[taken], slots.sigma2[taken], rtol=0, atol=1e-12)
            and np.allclose(pi, slots.pi, rtol=0, atol=1e-12))
    if same:
        return slots, False
    return SlotState(mu, s2, pi, ~taken), True


def fit_slots(points, cfg: PsaConfig, rng=None, init: SlotState | None = None):
    """EM followed, when configured, by component reconciliation.

    The returned attention and trace include one final E step when the
    reconciliation changed the slots.
    """
    slots, attn, trace = run(points, cfg, rng, init)
    if cfg.gap_factor is not None:
        fixed, changed = reconcile_components(slots, points, cfg.gap_factor, cfg.var_floor)
        if changed:
            slots = fixed
            attn = e_step(slots, points)
            trace = trace + [attn.loglik]
    return slots, attn, trace


class ProbabilisticSlotAttention(BaseEstimator):
    """Estimator wrapper around the slot EM loop.

    Parameters
    ----------
    n_slots : int, default=3
    n_iter : int, default=20
    var_floor : float, default=1e-6
    init_means : array of shape (n_slots, n_features), optional
        Use these initial means instead of drawing them from N(0, I).
    gap_factor : float, optional
        Reconcile slots with spatially connected point groups after EM;
        see :func:`reconcile_components`.
    random_state : int, Generator or None

    Attributes
    ----------
    means_, variances_ : arrays of shape (n_slots, n_features)
    weights_ : array of shape (n_slots,)
    inactive_ : bool array of shape (n_slots,)
    loglik_trace_ : list of float
    """

    def __init__(self, n_slots=3, n_iter=20, var_floor=VAR_FLOOR, init_means=None,
                 gap_factor=None, random_state=None):
        self.n_slots = n_slots
        self.n_iter = n_iter
        self.var_floor = var_floor
        self.init_means = init_means
        self.gap_factor = gap_factor
        self.random_state = random_state

    def _config(self) -> PsaConfig:
        init = "standard_normal_means" if self.init_means is None else "provided_means"
        means = None if self.init_means is None else tuple(map(tuple, np.asarray(self.init_means, float)))
        return PsaConfig(k_slots=self.n_slots, iterations=self.n_iter, var_floor=self.var_floor,
                         init=init, means=means, gap_factor=self.gap_factor)

    def fit(self, X, y=None):
        X = check_points(X, name="X")
        cfg = self._config()
        slots, attn, trace = fit_slots(X, cfg, as_rng(self.random_state))
        self.slot_state_ = slots
        self.means_ = slots.mu
        self.variances_ = slots.sigma2
        self.weights_ = slots.pi
        self.inactive_ = slots.inactive
        self.loglik_trace_ = trace
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "slot_state_")
        return e_step(self.slot_state_, check_points(X, self.n_features_in_, name="X")).a

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def score_samples(self, X):
        check_is_fitted(self, "slot_state_")
        return self.slot_state_.to_gmm().log_pdf(check_points(X, self.n_features_in_, name="X"))

    def score(self, X, y=None):
        return float(np.mean(self.score_samples(X)))

    def fit_predict(self, X, y=None):
        return self.fit(X).predict(X)


def with_means(cfg: PsaConfig, means) -> PsaConfig:
    return replace(cfg, init="provided_means", means=tuple(map(tuple, np.asarray(means, float))))
