"""Identifiability metrics: SMCC with its permutation/affine witness, and MCC."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .matching import INACTIVE_PENALTY, Permutation, hungarian, rectangular_assignment


class RankDeficientError(ValueError):
    """The regression design does not determine an affine map."""


class DegenerateSeriesError(ValueError):
    """A correlated series has (numerically) zero variance."""


def fit_affine_ls(X, Y):
    """Least-squares ``(H, a)`` minimizing ``sum_i |X_i H + a - Y_i|^2``."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim != 2 or Y.ndim != 2 or len(X) != len(Y):
        raise ValueError(f"X and Y must be matching 2-D arrays, got {X.shape} and {Y.shape}")
    n, d = X.shape
    if n < d + 1:
        raise RankDeficientError(f"need at least {d + 1} rows, got {n}")
    design = np.hstack([X, np.ones((n, 1))])
    sol, _, rank, sv = np.linalg.lstsq(design, Y, rcond=None)
    if rank < d + 1 or sv[-1] <= 1e-10 * sv[0]:
        raise RankDeficientError("rows of X are not affinely independent")
    return sol[:d], sol[d]


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=float) - np.mean(x)
    y = np.asarray(y, dtype=float) - np.mean(y)
    scale = max(np.max(np.abs(x)), np.max(np.abs(y)), 1e-300)
    x, y = x / scale, y / scale
    sxx, syy = x @ x, y @ y
    if sxx <= 1e-24 * len(x) or syy <= 1e-24 * len(y):
        raise DegenerateSeriesError("series with zero variance")
    # one square root of the product, so exact copies and negations give exactly +-1
    return float(np.clip(x @ y / np.sqrt(sxx * syy), -1.0, 1.0))


@dataclass
class SmccReport:
    score: float
    permutation: Permutation
    H: np.ndarray
    a: np.ndarray
    per_slot: np.ndarray
    excluded: list = field(default_factory=list)
    sample_permutations: np.ndarray | None = None
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "score": self.score,
            "permutation": self.permutation.tolist(),
            "affine": {"H": self.H.tolist(), "a": self.a.tolist()},
            "per_slot": [None if np.isnan(v) else float(v) for v in self.per_slot],
            "excluded": list(self.excluded),
            "warnings": list(self.warnings),
        }


@dataclass
class MccReport:
    score: float
    assignment: np.ndarray
    corr_matrix: np.ndarray

    def to_dict(self) -> dict:
        return {"score": self.score, "assignment": self.assignment.tolist(),
                "corr_matrix": self.corr_matrix.tolist()}


def _as_batch(s, active):
    s = np.asarray(s, dtype=float)
    if s.ndim == 2:
        s = s[:, None, :]
    if s.ndim != 3:
        raise ValueError(f"slot means must be (n, K, d), got shape {s.shape}")
    act = np.ones(s.shape[:2], dtype=bool) if active is None else np.asarray(active, dtype=bool)
    if act.shape != s.shape[:2]:
        raise ValueError("activity mask must be (n, K)")
    return s, act


def _pair_residual(x, y):
    # relative residual of the best affine map x -> y
    H, a = fit_affine_ls(x, y)
    res = y - (x @ H + a)
    tot = np.sum((y - y.mean(axis=0)) ** 2)
    return float(np.sum(res ** 2) / max(tot, 1e-300))


def smcc(s, s_tilde, active=None, active_tilde=None, match: str = "global") -> SmccReport:
    """Slot mean correlation coefficient between two batches of slot means.

    ``s`` and ``s_tilde`` are (n, K, d): per evaluation sample, K slot means.
    Slot i of ``s`` is paired with slot ``tau(i)`` of ``s_tilde`` by Hungarian
    matching on per-pair affine residuals, one affine map ``(H, a)`` is fitted
    on all matched active pairs, and the score averages, over included slots
    and dimensions, the Pearson correlation between ``s`` and the mapped
    partner. Slots with too few active samples are excluded and listed.

    With ``match="per_sample"`` each sample's slot order in ``s_tilde`` is
    first resolved against ``s`` (slots carry no global order across samples
    when every sample is fitted independently); see
    :func:`resolve_sample_permutations`.
    """
    s, act = _as_batch(s, active)
    st, act_t = _as_batch(s_tilde, active_tilde)
    if s.shape != st.shape:
        raise ValueError(f"shape mismatch {s.shape} vs {st.shape}")
    n, K, d = s.shape
    need = max(3, d + 1)
    sample_perms = None
    if match == "per_sample":
        sample_perms = resolve_sample_permutations(s, st, act, act_t)
        rows = np.arange(n)[:, None]
        st, act_t = st[rows, sample_perms], act_t[rows, sample_perms]
    elif match != "global":
        raise ValueError(f"unknown match mode {match!r}")

    cost = np.full((K, K), INACTIVE_PENALTY)
    for i in range(K):
        for j in range(K):
            both = act[:, i] & act_t[:, j]
            if both.sum() >= need:
                try:
                    cost[i, j] = _pair_residual(st[both, j], s[both, i])
                except (RankDeficientError, np.linalg.LinAlgError):
                    pass
    tau, _ = hungarian(cost)

    valid = act & act_t[:, tau.map]                   # (n, K) per matched pair
    counts = valid.sum(axis=0)
    included = counts >= need
    if not included.any():
        raise ValueError(f"insufficient samples: fewer than {need} active pairs for every slot")
    matched_t = st[:, tau.map]
    X = matched_t[valid & included]
    Y = s[valid & included]
    H, a = fit_affine_ls(X, Y)
    mapped = matched_t @ H + a

    per_slot = np.full(K, np.nan)
    for i in np.flatnonzero(included):
        m = valid[:, i]
        per_slot[i] = np.mean([pearson(s[m, i, j], mapped[m, i, j]) for j in range(d)])
    excluded = np.flatnonzero(~included).tolist()
    score = float(np.nanmean(per_slot))
    return SmccReport(score, tau, H, a, per_slot, excluded, sample_perms)


def _all_perms(K):
    return np.array(list(itertools.permutations(range(K))), dtype=int)


def _match_under_map(s, st, act, act_t, H, a, perms=None):
    """Best per-sample permutation of ``st`` given a fixed affine map onto ``s``."""
    n, K, _ = s.shape
    mapped = st @ H + a
    D = np.sum((s[:, :, None, :] - mapped[:, None, :, :]) ** 2, axis=-1)    # (n, K, K)
    D = np.where(act[:, :, None] & act_t[:, None, :], D, INACTIVE_PENALTY)
    if perms is not None:
        totals = D[:, np.arange(K)[None, :], perms].sum(axis=-1)            # (n, K!)
        best = np.argmin(totals, axis=1)
        return perms[best], totals[np.arange(n), best]
    out = np.empty((n, K), dtype=int)
    tot = np.empty(n)
    for m in range(n):
        out[m] = rectangular_assignment(D[m])
        tot[m] = D[m, np.arange(K), out[m]].sum()
    return out, tot


def resolve_sample_permutations(s, st, act, act_t, max_iter: int = 25, n_seeds: int = 8):
    """Per-sample slot orderings of ``st`` that best agree with ``s`` under one affine map.

    The map is seeded by exhaustively trying slot orders on a few fully active
    samples (enough correspondences to determine it), keeping the candidate
    with the smallest total matched residual, then alternating per-sample
    assignment with a global least-squares refit until the orderings settle.
    """
    s, act = _as_batch(s, act)
    st, act_t = _as_batch(st, act_t)
    n, K, d = s.shape
    perms = _all_perms(K) if K <= 6 else None
    identity = np.tile(np.arange(K), (n, 1))
    if K == 1:
        return identity

    full = np.flatnonzero(act.all(axis=1) & act_t.all(axis=1))
    group = math.ceil((d + 1) / K)
    candidates = []
    if perms is not None and len(full) >= group and len(perms) ** group <= 50000:
        for start in range(0, min(len(full) - group + 1, n_seeds * group), group):
            idx = full[start:start + group]
            for combo in itertools.product(range(len(perms)), repeat=group):
                X = np.concatenate([st[m, perms[c]] for m, c in zip(idx, combo)])
                Y = np.concatenate([s[m] for m in idx])
                try:
                    candidates.append(fit_affine_ls(X, Y))
                except RankDeficientError:
                    continue
    if not candidates:
        candidates.append((np.eye(d), np.zeros(d)))

    best = None
    for H, a in candidates:
        order, tot = _match_under_map(s, st, act, act_t, H, a, perms)
        score = float(np.sum(np.minimum(tot, INACTIVE_PENALTY)))
        if best is None or score < best[0]:
            best = (score, order)
    order = best[1]
    for _ in range(max_iter):
        rows = np.arange(n)[:, None]
        pair_ok = act & act_t[rows, order]
        try:
            H, a = fit_affine_ls(st[rows, order][pair_ok], s[pair_ok])
        except RankDeficientError:
            break
        new_order, _ = _match_under_map(s, st, act, act_t, H, a, perms)
        if np.array_equal(new_order, order):
            break
        order = new_order
    return order


def inv_smcc(contents_a, contents_b, active_a=None, active_b=None, sufficient_a=None,
             sufficient_b=None, match: str = "per_sample", min_sufficient: float = 0.95) -> SmccReport:
    """SMCC between per-scene contents inferred from two different view subsets.

    ``sufficient_*`` are optional per-scene booleans; a subset that is not
    viewpoint-sufficient on at least ``min_sufficient`` of the scenes adds a
    warning to the report instead of failing.
    """
    report = smcc(contents_a, contents_b, active_a, active_b, match=match)
    for name, flags in (("A", sufficient_a), ("B", sufficient_b)):
        if flags is not None:
            frac = float(np.mean(flags))
            if frac < min_sufficient:
                report.warnings.append(f"subset {name} is viewpoint-sufficient on only {frac:.1%} of scenes")
    return report


def mcc(v_hat, v_true) -> MccReport:
    """Mean absolute correlation between matched inferred and true factor dimensions."""
    v_hat = np.asarray(v_hat, dtype=float)
    v_true = np.asarray(v_true, dtype=float)
    if v_hat.ndim != 2 or v_true.ndim != 2 or len(v_hat) != len(v_true):
        raise ValueError("v_hat and v_true must be (n, p) and (n, q) with equal n")
    n, p = v_hat.shape
    q = v_true.shape[1]
    if n < 3:
        raise ValueError("need at least 3 samples")
    if p < q:
        raise ValueError(f"need at least as many inferred dims ({p}) as true factors ({q})")
    C = np.empty((p, q))
    for i in range(p):
        for j in range(q):
            C[i, j] = abs(pearson(v_hat[:, i], v_true[:, j]))
    rows = rectangular_assignment(-C.T)                # true factor j -> inferred dim rows[j]
    score = float(np.mean(C[rows, np.arange(q)]))
    return MccReport(score, rows, C)
