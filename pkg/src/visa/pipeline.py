"""End-to-end view-invariant inference: per-view slots, matching, view alignment, aggregation."""
from __future__ import annotations

import itertools
import os
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import derived_rng
from .aggregate import AggregatePrior, ContentState, aggregate_content, build_aggregate_posterior, \
    refine_with_feature_posterior
from .gmm import DegeneratePointError
from .matching import Permutation, align_to_base
from .psa import PsaConfig, SlotState, fit_slots, init_slots, log_likelihood
from .scenegen import Scene, viewpoint_sufficient
from .view import Affine2D, AlignmentError, ViewDescriptor, ViewPrior, apply, estimate_alignment, \
    fit_view_prior, invert

VIEW_MODES = ("oracle", "estimated")
FALLBACKS = ("prior", "oracle", "identity")
DEFAULT_GAP_FACTOR = 35.0
# estimated-mode alignment stops once theta moves less than this
ALIGN_TOL = 1e-6


@dataclass(frozen=True)
class PipelineConfig:
    psa: PsaConfig = field(default_factory=lambda: PsaConfig(gap_factor=DEFAULT_GAP_FACTOR))
    view_mode: str = "oracle"
    alignment_rounds: int = 3
    subset: tuple = (0, 1, 2)
    gaussian_product_refinement: bool = False
    matching_metric: str = "sqeuclidean"
    # slots further apart than this many pooled standard deviations stay unpaired; None = pair actives first
    match_gate: float | None = 2.0
    # in estimated mode, try every slot correspondence and keep the best point-cloud overlap
    permutation_search: bool = True
    # theta source for views whose alignment is not identifiable
    fallback: str = "prior"

    def __post_init__(self):
        object.__setattr__(self, "subset", tuple(sorted(int(v) for v in self.subset)))
        if not self.subset:
            raise ValueError("view subset must be nonempty")
        if len(set(self.subset)) != len(self.subset):
            raise ValueError("view subset has duplicates")
        if self.view_mode not in VIEW_MODES:
            raise ValueError(f"view_mode must be one of {VIEW_MODES}, got {self.view_mode!r}")
        if int(self.alignment_rounds) < 1:
            raise ValueError("alignment_rounds must be at least 1")
        if self.fallback not in FALLBACKS:
            raise ValueError(f"fallback must be one of {FALLBACKS}")

    @property
    def base_view(self) -> int:
        return self.subset[0]

    def to_dict(self) -> dict:
        return {"psa": self.psa.to_dict(), "view_mode": self.view_mode,
                "alignment_rounds": self.alignment_rounds, "subset": list(self.subset),
                "gaussian_product_refinement": self.gaussian_product_refinement,
                "matching_metric": self.matching_metric, "match_gate": self.match_gate,
                "permutation_search": self.permutation_search,
                "fallback": self.fallback}

    @classmethod
    def from_dict(cls, payload: dict) -> "PipelineConfig":
        payload = dict(payload)
        if "psa" in payload:
            psa = dict(payload["psa"])
            psa.setdefault("gap_factor", DEFAULT_GAP_FACTOR)
            payload["psa"] = PsaConfig.from_dict(psa)
        if "subset" in payload:
            payload["subset"] = tuple(payload["subset"])
        return cls(**payload)


@dataclass(frozen=True)
class ViewResult:
    descriptor: ViewDescriptor
    slots: SlotState          # aligned to the base slot order, common frame
    permutation: Permutation  # aligned slot i is fitted slot permutation.map[i]
    flagged: bool = False

    def to_dict(self) -> dict:
        return {"descriptor": self.descriptor.to_dict(), "slots": self.slots.to_dict(),
                "permutation": self.permutation.tolist(), "flagged": self.flagged}


@dataclass(frozen=True)
class SceneResult:
    scene_id: int
    per_view: tuple
    content: ContentState
    loglik: float
    sufficiency: bool

    @property
    def flagged_views(self) -> list[int]:
        return [r.descriptor.view_id for r in self.per_view if r.flagged]

    def to_dict(self) -> dict:
        return {"scene_id": self.scene_id, "per_view": [r.to_dict() for r in self.per_view],
                "content": self.content.to_dict(), "loglik": self.loglik, "sufficiency": self.sufficiency}


def _fit_view(points, theta: Affine2D, cfg: PipelineConfig, init: SlotState):
    z = apply(invert(theta), points)
    slots, _, _ = fit_slots(z, cfg.psa, init=init)
    if cfg.gaussian_product_refinement:
        slots = refine_with_feature_posterior(slots, z, cfg.psa.var_floor)
    return slots, z


def _chamfer(a: np.ndarray, b: np.ndarray) -> float:
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float(np.mean(da * da) + np.mean(db * db))


def _subsample(z: np.ndarray, n: int = 256) -> np.ndarray:
    return z[:: max(1, len(z) // n)]


def _update_theta(base: SlotState, base_points, slots: SlotState, theta: Affine2D, raw_points,
                  cfg: PipelineConfig):
    """Refit the common -> view map from matched slot means; None when unidentifiable."""
    (_, aligned), _ = align_to_base([base, slots], 0, cfg.matching_metric)
    live = np.flatnonzero(base.active() & aligned.active())
    if live.size < 3:
        return None
    src = base.mu[live]
    raw = apply(theta, aligned.mu[live])
    orders = [np.arange(live.size)]
    if cfg.permutation_search and live.size <= 4:
        orders = [np.array(p) for p in itertools.permutations(range(live.size))]
    best = None
    ref = _subsample(base_points)
    obs = _subsample(raw_points)
    for order in orders:
        try:
            cand = estimate_alignment(src, raw[order])
        except AlignmentError:
            continue
        score = _chamfer(apply(invert(cand), obs), ref) if len(orders) > 1 else 0.0
        if best is None or score < best[0]:
            best = (score, cand)
    return None if best is None else best[1]


def _fallback_theta(scene: Scene, view_id: int, cfg: PipelineConfig, view_prior: ViewPrior | None):
    if cfg.fallback == "prior" and view_prior is not None and view_id in view_prior.view_ids:
        return view_prior.component_mean(view_id)
    if cfg.fallback in ("prior", "oracle"):
        return scene.true_thetas[view_id].compose(invert(scene.true_thetas[cfg.base_view]))
    return Affine2D.identity()


@dataclass
class _Partial:
    """Per-view fits of one scene; views in ``pending`` still need a fallback transform."""

    thetas: dict
    flags: dict
    fits: dict
    pending: list


def _estimate_thetas(scene: Scene, cfg: PipelineConfig, init: SlotState) -> _Partial:
    """Alternating match-and-align for every non-base view of the subset."""
    base_id = cfg.base_view
    base_points = scene.view(base_id).points
    base_slots, _ = _fit_view(base_points, Affine2D.identity(), cfg, init)
    part = _Partial({base_id: Affine2D.identity()}, {base_id: False}, {base_id: base_slots}, [])
    for vid in cfg.subset[1:]:
        raw = scene.view(vid).points
        theta, found, slots = Affine2D.identity(), False, None
        for _ in range(cfg.alignment_rounds):
            slots, _ = _fit_view(raw, theta, cfg, init)
            new = _update_theta(base_slots, base_points, slots, theta, raw, cfg)
            if new is None:
                slots = None
                break
            found = True
            moved = np.max(np.abs(new.matrix - theta.matrix))
            theta, slots = new, (slots if moved < ALIGN_TOL else None)
            if slots is not None:
                break
        part.flags[vid] = not found
        if not found:
            part.pending.append(vid)
            continue
        if slots is None:
            slots, _ = _fit_view(raw, theta, cfg, init)
        part.thetas[vid], part.fits[vid] = theta, slots
    return part


def _start_scene(scene: Scene, cfg: PipelineConfig, rng) -> tuple[SlotState, _Partial]:
    missing = set(cfg.subset) - set(scene.view_ids)
    if missing:
        raise ValueError(f"scene {scene.scene_id} lacks views {sorted(missing)}")
    init = init_slots(cfg.psa, 2, derived_rng(0, 0) if rng is None else rng)
    if cfg.view_mode == "oracle":
        thetas = {v: scene.true_thetas[v] for v in cfg.subset}
        fits = {v: _fit_view(scene.view(v).points, thetas[v], cfg, init)[0] for v in cfg.subset}
        return init, _Partial(thetas, {v: False for v in cfg.subset}, fits, [])
    return init, _estimate_thetas(scene, cfg, init)


def _finish_scene(scene: Scene, cfg: PipelineConfig, init: SlotState, part: _Partial,
                  view_prior: ViewPrior | None) -> SceneResult:
    for vid in part.pending:
        theta = _fallback_theta(scene, vid, cfg, view_prior)
        part.thetas[vid] = theta
        part.fits[vid] = _fit_view(scene.view(vid).points, theta, cfg, init)[0]
    part.pending = []
    states = [part.fits[v] for v in cfg.subset]
    aligned, perms = align_to_base(states, 0, cfg.matching_metric, cfg.match_gate, accumulate=True)
    loglik = 0.0
    for v, s in zip(cfg.subset, states):
        loglik += log_likelihood(s, apply(invert(part.thetas[v]), scene.view(v).points))
    per_view = tuple(ViewResult(ViewDescriptor(v, part.thetas[v]), a, p, part.flags[v])
                     for v, a, p in zip(cfg.subset, aligned, perms))
    content = aggregate_content(aligned, cfg.psa.var_floor)
    return SceneResult(int(scene.scene_id), per_view, content, float(loglik),
                       viewpoint_sufficient(scene, cfg.subset))


def infer_scene(scene: Scene, cfg: PipelineConfig, rng=None, view_prior: ViewPrior | None = None) -> SceneResult:
    """Infer per-view slots, view transforms and aggregated content for one scene.

    All views start EM from the same initial slot means, drawn once from ``rng``.
    In oracle mode the view transforms are the scene's true cameras and the
    common frame is the scene's canonical frame. In estimated mode the base
    view (smallest id in the subset) defines the common frame and every other
    view's map is estimated by alternating slot fitting and least-squares
    alignment of matched slot means. Views with fewer than three matched
    active slots are flagged and take the fallback transform: the view
    prior's component mean, else the relative true camera (``fallback`` in
    the config selects the order).
    """
    init, part = _start_scene(scene, cfg, rng)
    return _finish_scene(scene, cfg, init, part, view_prior)


def scene_rng(seed: int, scene_id: int):
    return derived_rng(seed, 1, scene_id)


_ERRORS = (DegeneratePointError, AlignmentError, np.linalg.LinAlgError, ValueError)


def _start_chunk(args):
    scenes, cfg, seed, view_prior = args
    out = []
    for scene in scenes:
        try:
            init, part = _start_scene(scene, cfg, scene_rng(seed, scene.scene_id))
            if part.pending and view_prior is None:
                out.append((init, part))
            else:
                out.append(_finish_scene(scene, cfg, init, part, view_prior))
        except _ERRORS as exc:
            out.append((scene.scene_id, f"{type(exc).__name__}: {exc}"))
    return out


def _finish_chunk(args):
    items, cfg, view_prior = args
    out = []
    for scene, (init, part) in items:
        try:
            out.append(_finish_scene(scene, cfg, init, part, view_prior))
        except _ERRORS as exc:
            out.append((scene.scene_id, f"{type(exc).__name__}: {exc}"))
    return out


def resolve_workers(workers: int | None = None) -> int:
    """Worker count: VISA_WORKERS when set, else ``workers``, at least 1."""
    env = os.environ.get("VISA_WORKERS")
    if env:
        workers = int(env)
    return max(1, int(workers or 1))


def _fan_out(fn, items, extra, workers):
    """Apply ``fn`` to contiguous chunks of ``items``; results keep input order."""
    workers = resolve_workers(workers)
    if workers == 1 or len(items) < 2:
        return fn((items, *extra))
    n_chunks = min(len(items), 4 * workers)
    bounds = np.linspace(0, len(items), n_chunks + 1).astype(int)
    chunks = [(items[a:b], *extra) for a, b in zip(bounds[:-1], bounds[1:])]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(fn, chunks))
    return [r for part in parts for r in part]


@dataclass
class DatasetResult:
    results: list
    aggregate_prior: AggregatePrior | None
    view_prior: ViewPrior | None
    failures: list = field(default_factory=list)

    @property
    def n_failed(self) -> int:
        return len(self.failures)

    @property
    def n_flagged_views(self) -> int:
        return sum(len(r.flagged_views) for r in self.results)


def _descriptors(items):
    for item in items:
        if isinstance(item, SceneResult):
            yield from (r.descriptor for r in item.per_view if not r.flagged)
        elif isinstance(item, tuple) and isinstance(item[1], _Partial):
            part = item[1]
            yield from (ViewDescriptor(v, t) for v, t in sorted(part.thetas.items()) if not part.flags[v])


def _view_prior(items) -> ViewPrior | None:
    # views identified in fewer than two scenes get no component
    descs = list(_descriptors(items))
    counts = Counter(d.view_id for d in descs)
    descs = [d for d in descs if counts[d.view_id] >= 2]
    return fit_view_prior(descs) if descs else None


def infer_dataset(scenes: Sequence[Scene], cfg: PipelineConfig, seed: int = 0, workers: int | None = None,
                  view_prior: ViewPrior | None = None) -> DatasetResult:
    """Run the per-scene inference on every scene with per-scene derived seeds.

    In estimated mode without a given ``view_prior``, views whose alignment
    is not identifiable are held back while a view prior is fitted from every
    identifiable view; they then take its component means as transforms.
    Failed scenes are dropped and listed as ``(scene_id, message)``. Results
    are in input order and do not depend on the worker count.
    """
    scenes = list(scenes)
    if not scenes:
        raise ValueError("empty dataset")
    out = _fan_out(_start_chunk, scenes, (cfg, seed, view_prior), workers)
    held = [i for i, r in enumerate(out) if isinstance(r, tuple) and isinstance(r[1], _Partial)]
    if held:
        view_prior = _view_prior(out)
        done = _fan_out(_finish_chunk, [(scenes[i], out[i]) for i in held], (cfg, view_prior), workers)
        for i, r in zip(held, done):
            out[i] = r
    results = [r for r in out if isinstance(r, SceneResult)]
    failures = [r for r in out if not isinstance(r, SceneResult)]
    if view_prior is None:
        view_prior = _view_prior(results)
    prior = None
    if results:
        prior = build_aggregate_posterior([r.content for r in results], [r.scene_id for r in results])
    return DatasetResult(results, prior, view_prior, failures)


def content_means(results: Sequence[SceneResult]):
    """Stacked content means (M, K, d) and activity flags (M, K)."""
    mu = np.stack([r.content.mu for r in results])
    act = np.stack([r.content.active() for r in results])
    return mu, act


class ViewInvariantSlotAttention(TransformerMixin, BaseEstimator):
    """Scene-level estimator returning view-invariant content means.

    Parameters
    ----------
    n_slots : int, default=3
    n_iter : int, default=20
    view_mode : {"oracle", "estimated"}, default="oracle"
    subset : tuple of int, default=(0, 1, 2)
    alignment_rounds : int, default=3
    gap_factor : float or None, default=35.0
        Spatial-gap reconciliation of slots after EM, None to disable.
    var_floor : float, default=1e-6
    gaussian_product_refinement : bool, default=False
    random_state : int, default=0
    n_jobs : int or None
        Worker processes; the VISA_WORKERS environment variable overrides it.

    Attributes
    ----------
    results_ : list of SceneResult
    aggregate_prior_ : AggregatePrior
    view_prior_ : ViewPrior or None
    failures_ : list of (scene_id, message)
    """

    def __init__(self, n_slots=3, n_iter=20, view_mode="oracle", subset=(0, 1, 2), alignment_rounds=3,
                 gap_factor=DEFAULT_GAP_FACTOR, var_floor=1e-6, gaussian_product_refinement=False,
                 random_state=0, n_jobs=None):
        self.n_slots = n_slots
        self.n_iter = n_iter
        self.view_mode = view_mode
        self.subset = subset
        self.alignment_rounds = alignment_rounds
        self.gap_factor = gap_factor
        self.var_floor = var_floor
        self.gaussian_product_refinement = gaussian_product_refinement
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _config(self) -> PipelineConfig:
        psa = PsaConfig(k_slots=self.n_slots, iterations=self.n_iter, var_floor=self.var_floor,
                        seed=int(self.random_state), gap_factor=self.gap_factor)
        return PipelineConfig(psa=psa, view_mode=self.view_mode, alignment_rounds=self.alignment_rounds,
                              subset=tuple(self.subset),
                              gaussian_product_refinement=self.gaussian_product_refinement)

    def fit(self, X, y=None):
        cfg = self._config()
        res = infer_dataset(X, cfg, int(self.random_state), self.n_jobs)
        if not res.results:
            raise RuntimeError("inference failed on every scene")
        self.results_ = res.results
        self.aggregate_prior_ = res.aggregate_prior
        self.view_prior_ = res.view_prior
        self.failures_ = res.failures
        self.n_slots_ = cfg.psa.k_slots
        return self

    def transform(self, X):
        check_is_fitted(self, "results_")
        res = infer_dataset(X, self._config(), int(self.random_state), self.n_jobs, self.view_prior_)
        if res.failures:
            ids = [f[0] for f in res.failures]
            raise RuntimeError(f"inference failed on scenes {ids}")
        return content_means(res.results)[0]

    def fit_transform(self, X, y=None):
        self.fit(X)
        if self.failures_:
            return self.transform(X)
        return content_means(self.results_)[0]
