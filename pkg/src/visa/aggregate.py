"""View-marginalizing content aggregation and the dataset-level aggregate posterior."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .gmm import VAR_FLOOR, DiagGaussian, DiagGmm, convex_combine, gaussian_product, project_mean
from .psa import SlotState


class ContentState(SlotState):
    """Aggregated per-object content mixture, in the common frame."""


def aggregate_content(aligned: Sequence[SlotState], var_floor: float = VAR_FLOOR) -> ContentState:
    """Convex combination of aligned slot sets weighted by their mixing coefficients.

    With |A| views, content weight ``pi~_k = sum_v pi^v_k / |A|`` and slot v
    enters component k with coefficient ``pi^v_k / (|A| pi~_k)``. A slot absent
    from every view comes back inactive with weight zero and the base view's
    parameters.
    """
    aligned = list(aligned)
    if not aligned:
        raise ValueError("nothing to aggregate")
    shape = aligned[0].mu.shape
    for s in aligned:
        if s.mu.shape != shape:
            raise ValueError(f"misaligned slot sets: {s.mu.shape} vs {shape}")
    n = len(aligned)
    mixed = convex_combine([s.to_gmm() for s in aligned], np.full(n, 1.0 / n), var_floor)
    absent = np.all(np.stack([~s.active() for s in aligned]), axis=0)
    return ContentState(np.array(mixed.means), np.array(mixed.vars), np.array(mixed.weights),
                        np.array(mixed.inactive) | absent)


def refine_with_feature_posterior(state: SlotState, points, var_floor: float = VAR_FLOOR) -> SlotState:
    """Multiply every slot Gaussian by the view's global feature Gaussian.

    The feature Gaussian is the mean and variance of the view's points. Slot
    weights are reweighted by the product normalizers and renormalized.
    """
    z = np.asarray(points, dtype=float)
    feature = DiagGaussian(z.mean(axis=0), np.maximum(z.var(axis=0), var_floor))
    mus, vs, logw = [], [], []
    for k in range(state.k):
        prod, log_norm = gaussian_product(DiagGaussian(state.mu[k], state.sigma2[k]), feature, var_floor)
        mus.append(prod.mean)
        vs.append(np.maximum(prod.var, var_floor))
        logw.append(np.log(state.pi[k]) + log_norm if state.pi[k] > 0 else -np.inf)
    logw = np.asarray(logw)
    w = np.exp(logw - logw.max())
    return SlotState(np.stack(mus), np.stack(vs), w / w.sum(), state.inactive.copy())


@dataclass(frozen=True)
class AggregatePrior:
    """Mixture with one component per (scene, slot) pair."""

    mixture: DiagGmm
    provenance: tuple

    def to_dict(self) -> dict:
        out = self.mixture.to_dict()
        out["provenance"] = [list(p) for p in self.provenance]
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "AggregatePrior":
        return cls(DiagGmm.from_dict(payload), tuple(tuple(p) for p in payload["provenance"]))


def build_aggregate_posterior(contents: Sequence[SlotState], scene_ids: Sequence[int] | None = None) -> AggregatePrior:
    """Pool M content mixtures into one M*K-component mixture with weights ``pi_ik / M``."""
    contents = list(contents)
    if not contents:
        raise ValueError("need at least one content state")
    shape = contents[0].mu.shape
    if any(c.mu.shape != shape for c in contents):
        raise ValueError("content states must share K and d")
    if scene_ids is None:
        scene_ids = range(len(contents))
    m = len(contents)
    weights = np.concatenate([c.pi for c in contents]) / m
    weights = weights / weights.sum()
    means = np.concatenate([c.mu for c in contents])
    vars_ = np.concatenate([c.sigma2 for c in contents])
    inactive = np.concatenate([c.inactive for c in contents])
    provenance = tuple((int(sid), k) for sid in scene_ids for k in range(shape[0]))
    return AggregatePrior(DiagGmm(weights, means, vars_, inactive), provenance)


def projected_aggregate(prior: AggregatePrior) -> DiagGmm:
    """The aggregate posterior pushed through the coordinate average."""
    return project_mean(prior.mixture)


def histogram(g: DiagGmm, bins: int = 50, span: float = 4.0):
    """Density of a 1-D mixture on a regular grid covering ``span`` std around the components."""
    if g.dim != 1:
        raise ValueError("histogram expects a 1-D mixture")
    live = g.weights > 0
    sd = np.sqrt(g.vars[live, 0])
    lo = float(np.min(g.means[live, 0] - span * sd))
    hi = float(np.max(g.means[live, 0] + span * sd))
    edges = np.linspace(lo, hi, bins + 1)
    centers = 0.5 * (edges[1:] + edges[:-1])
    return centers, g.pdf(centers[:, None])
