"""Cross-view slot correspondence by minimum-cost assignment."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .psa import SlotState

INACTIVE_PENALTY = 1e12


@dataclass(frozen=True)
class Permutation:
    """Bijection on ``0..K-1``; ``map[i]`` is the column matched to row ``i``."""

    map: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.map, dtype=int).copy()
        if m.ndim != 1 or not np.array_equal(np.sort(m), np.arange(m.size)):
            raise ValueError(f"not a permutation: {m.tolist()}")
        m.setflags(write=False)
        object.__setattr__(self, "map", m)

    @classmethod
    def identity(cls, k: int) -> "Permutation":
        return cls(np.arange(k))

    def __len__(self):
        return self.map.size

    def __eq__(self, other):
        return isinstance(other, Permutation) and np.array_equal(self.map, other.map)

    def __hash__(self):
        return hash(self.map.tobytes())

    def inverse(self) -> "Permutation":
        inv = np.empty_like(self.map)
        inv[self.map] = np.arange(self.map.size)
        return Permutation(inv)

    def compose(self, other: "Permutation") -> "Permutation":
        """Permutation applying ``other`` first: ``(self o other)[i] = other[self[i]]``."""
        return Permutation(np.asarray(other.map)[self.map])

    @property
    def is_identity(self) -> bool:
        return bool(np.array_equal(self.map, np.arange(self.map.size)))

    def tolist(self) -> list[int]:
        return self.map.tolist()


def hungarian(cost) -> tuple[Permutation, float]:
    """Exact minimum-cost perfect assignment on a square matrix.

    Shortest augmenting path with row/column potentials, O(K^3). Rows are
    inserted in index order and columns scanned in index order, so ties resolve
    toward the lowest indices, deterministically.
    """
    c = np.asarray(cost, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"cost must be square, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost entries must be finite")
    cols = _assign(c)
    return Permutation(cols), float(c[np.arange(c.shape[0]), cols].sum())


def rectangular_assignment(cost) -> np.ndarray:
    """Minimum-cost assignment of every row to a distinct column (rows <= cols)."""
    c = np.asarray(cost, dtype=float)
    if c.shape[0] > c.shape[1]:
        raise ValueError("need at least as many columns as rows")
    return _assign(c)


def _assign(c: np.ndarray) -> np.ndarray:
    n, m = c.shape
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=int)      # owner[j] = row (1-based) holding column j; 0 = free
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            delta = inf
            j1 = -1
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = c[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[owner[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while True:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
            if j0 == 0:
                break
    cols = np.empty(n, dtype=int)
    for j in range(1, m + 1):
        if owner[j]:
            cols[owner[j] - 1] = j - 1
    return cols


def slot_cost(base: SlotState, other: SlotState, metric: str = "sqeuclidean",
              gate: float | None = None) -> np.ndarray:
    """Pairwise matching cost between two slot sets.

    ``cost[i, j]`` is the squared distance between base mean i and other mean
    j (or the symmetric KL divergence of the two slot Gaussians with
    ``metric="symmetric_kl"``). Pairs touching an inactive slot cost
    ``INACTIVE_PENALTY`` so that active slots are matched first.

    With ``gate`` set, a pair of one active and one inactive slot instead
    costs ``gate**2`` times the mean total variance of the active slots (for
    the KL metric, ``gate**2``) and two inactive slots cost 0, so two active
    slots further apart than the gate are left unpaired, each matched to an
    absent slot of the other view.
    """
    if base.mu.shape != other.mu.shape:
        raise ValueError(f"slot sets differ in shape: {base.mu.shape} vs {other.mu.shape}")
    diff = base.mu[:, None, :] - other.mu[None, :, :]
    if metric == "sqeuclidean":
        cost = np.sum(diff * diff, axis=-1)
    elif metric == "symmetric_kl":
        va, vb = base.sigma2[:, None, :], other.sigma2[None, :, :]
        cost = 0.5 * np.sum(va / vb + vb / va - 2.0 + diff * diff * (1.0 / va + 1.0 / vb), axis=-1)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    act_b, act_o = base.active()[:, None], other.active()[None, :]
    if gate is None:
        return np.where(act_b & act_o, cost, INACTIVE_PENALTY)
    live = np.concatenate([base.sigma2[base.active()], other.sigma2[other.active()]])
    unit = 1.0 if metric == "symmetric_kl" or live.size == 0 else float(np.mean(live.sum(axis=1)))
    out = np.where(act_b & act_o, cost, gate * gate * unit)
    return np.where(~act_b & ~act_o, 0.0, out)


def align_to_base(states: Sequence[SlotState], base_index: int = 0, metric: str = "sqeuclidean",
                  gate: float | None = None, accumulate: bool = False):
    """Permute every slot set into the slot order of ``states[base_index]``.

    Returns the aligned states and, per state, the permutation used: aligned
    slot i is original slot ``perm.map[i]``.

    With ``accumulate`` the states are matched in order against a running
    reference: a reference slot that is absent so far is filled by the first
    view in which its matched slot is active. Objects the base view does not
    see then keep one index across the remaining views.
    """
    states = list(states)
    if not states:
        raise ValueError("no states to align")
    base = states[base_index]
    for s in states:
        if s.mu.shape != base.mu.shape:
            raise ValueError("all slot sets must share K and d")
    ref_mu, ref_s2, ref_pi = base.mu.copy(), base.sigma2.copy(), base.pi.copy()
    ref_off = ~base.active()
    aligned, perms = [], []
    for idx, s in enumerate(states):
        if idx == base_index:
            perm = Permutation.identity(base.k)
        else:
            ref = SlotState(ref_mu, ref_s2, ref_pi, ref_off) if accumulate else base
            perm, _ = hungarian(slot_cost(ref, s, metric, gate))
        a = s.permute(perm.map)
        if accumulate:
            fill = ref_off & a.active()
            ref_mu[fill], ref_s2[fill], ref_pi[fill] = a.mu[fill], a.sigma2[fill], a.pi[fill]
            ref_off = ref_off & ~fill
        aligned.append(a)
        perms.append(perm)
    return aligned, perms


def mismatched_pairs(base: SlotState, aligned: SlotState) -> list[int]:
    """Slot indices whose matched pair joins an active slot with an inactive one."""
    return np.flatnonzero(base.active() != aligned.active()).tolist()
