"""Synthetic multi-view point-cloud scenes with ground truth.

Objects are 2-D outlines (square, rectangle, triangle, circle) placed at
locations drawn from a 5-component Gaussian mixture. Each camera is a planar
affine map, and occlusion hides whole objects from individual views.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ._validation import derived_rng, check_positive_int
from .gmm import DiagGmm
from .view import Affine2D, apply

SHAPE_RADIUS = 0.5


class ShapeKind(str, enum.Enum):
    CUBE = "cube"
    CYLINDER = "cylinder"
    PYRAMID = "pyramid"
    SPHERE = "sphere"


def _polygon(kind: ShapeKind) -> np.ndarray | None:
    r = SHAPE_RADIUS
    if kind is ShapeKind.CUBE:
        return np.array([[-r, -r], [r, -r], [r, r], [-r, r]])
    if kind is ShapeKind.CYLINDER:
        return np.array([[-0.7 * r, -r], [0.7 * r, -r], [0.7 * r, r], [-0.7 * r, r]])
    if kind is ShapeKind.PYRAMID:
        ang = np.pi / 2 + 2 * np.pi * np.arange(3) / 3
        return r * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return None


def outline_points(kind: ShapeKind, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points uniform by arc length on the canonical outline centered at 0."""
    kind = ShapeKind(kind)
    poly = _polygon(kind)
    if poly is None:
        t = rng.uniform(0.0, 2 * np.pi, n)
        return SHAPE_RADIUS * np.stack([np.cos(t), np.sin(t)], axis=1)
    edges = np.roll(poly, -1, axis=0) - poly
    lengths = np.linalg.norm(edges, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    s = rng.uniform(0.0, cum[-1], n)
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(poly) - 1)
    frac = (s - cum[idx]) / lengths[idx]
    return poly[idx] + frac[:, None] * edges[idx]


@dataclass(frozen=True)
class OcclusionPolicy:
    """Whole-object visibility per view.

    ``kind`` is ``"none"``, ``"random_dropout"`` (each object hidden from
    each view with probability ``rate``) or ``"scripted"`` (``hidden[v]`` lists
    the object indices hidden from view v). For random dropout,
    ``min_visible_views`` re-reveals objects seen in too few views, and every
    view keeps at least one object.
    """

    kind: str = "none"
    rate: float = 0.0
    hidden: tuple = ()
    min_visible_views: int = 1
    # fraction of points of a visible object dropped per view
    point_dropout: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "random_dropout", "scripted"):
            raise ValueError(f"unknown occlusion policy {self.kind!r}")
        if not 0.0 <= self.rate < 1.0 or not 0.0 <= self.point_dropout < 1.0:
            raise ValueError("dropout rates must lie in [0, 1)")
        object.__setattr__(self, "hidden", tuple(frozenset(h) for h in self.hidden))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "rate": self.rate, "hidden": [sorted(h) for h in self.hidden],
                "min_visible_views": self.min_visible_views, "point_dropout": self.point_dropout}

    @classmethod
    def from_dict(cls, payload: dict) -> "OcclusionPolicy":
        payload = dict(payload)
        payload["hidden"] = tuple(payload.get("hidden", ()))
        return cls(**payload)


def default_location_mixture(radius: float = 3.0, variance: float = 0.04, n_components: int = 5) -> DiagGmm:
    ang = 2 * np.pi * np.arange(n_components) / n_components
    means = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return DiagGmm(np.full(n_components, 1.0 / n_components), means, np.full((n_components, 2), variance))


def default_cameras(n_views: int = 4, seed: int = 0) -> list[Affine2D]:
    """Random planar cameras: rotation within 60 degrees, shear up to 0.2, shift up to 2.

    The first camera is the identity.
    """
    rng = np.random.default_rng(seed)
    cams = [Affine2D.identity()]
    for _ in range(n_views - 1):
        angle = np.deg2rad(rng.uniform(-60, 60))
        shear = rng.uniform(-0.2, 0.2)
        r = rng.uniform(0, 2.0)
        phi = rng.uniform(0, 2 * np.pi)
        cams.append(Affine2D.from_params(angle, (1.0, 1.0), shear, (r * np.cos(phi), r * np.sin(phi))))
    return cams[:n_views]


@dataclass(frozen=True)
class SceneSpec:
    location_mixture: DiagGmm = field(default_factory=default_location_mixture)
    n_objects: int = 3
    points_per_object: int = 1000
    cameras: tuple = field(default_factory=lambda: tuple(default_cameras()))
    occlusion: OcclusionPolicy = field(default_factory=OcclusionPolicy)
    # per-scene random perturbation of every camera (0 keeps cameras fixed)
    camera_jitter: float = 0.0

    def __post_init__(self):
        check_positive_int(self.n_objects, "n_objects")
        check_positive_int(self.points_per_object, "points_per_object")
        if self.n_objects > self.location_mixture.n_components:
            raise ValueError("n_objects cannot exceed the number of location components")
        object.__setattr__(self, "cameras", tuple(self.cameras))
        if not self.cameras:
            raise ValueError("need at least one camera")
        if self.occlusion.kind == "scripted" and len(self.occlusion.hidden) not in (0, len(self.cameras)):
            raise ValueError("scripted occlusion needs one hidden set per camera")

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    def to_dict(self) -> dict:
        return {
            "location_mixture": self.location_mixture.to_dict(),
            "n_objects": self.n_objects,
            "points_per_object": self.points_per_object,
            "cameras": [c.to_dict() for c in self.cameras],
            "occlusion": self.occlusion.to_dict(),
            "camera_jitter": self.camera_jitter,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SceneSpec":
        kwargs = {}
        if "location_mixture" in payload:
            kwargs["location_mixture"] = DiagGmm.from_dict(payload["location_mixture"])
        if "cameras" in payload:
            kwargs["cameras"] = tuple(Affine2D.from_dict(c) for c in payload["cameras"])
        elif "n_views" in payload:
            kwargs["cameras"] = tuple(default_cameras(payload["n_views"], payload.get("camera_seed", 0)))
        if "occlusion" in payload:
            kwargs["occlusion"] = OcclusionPolicy.from_dict(payload["occlusion"])
        for key in ("n_objects", "points_per_object", "camera_jitter"):
            if key in payload:
                kwargs[key] = payload[key]
        return cls(**kwargs)


@dataclass(frozen=True)
class ObjectRecord:
    location: np.ndarray
    shape: ShapeKind
    component: int
    canonical: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class View:
    view_id: int
    points: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    visible_objects: frozenset


@dataclass(frozen=True)
class Scene:
    scene_id: int
    views: tuple
    true_thetas: tuple
    object_records: tuple

    @property
    def view_ids(self) -> list[int]:
        return [v.view_id for v in self.views]

    def view(self, view_id: int) -> View:
        for v in self.views:
            if v.view_id == view_id:
                return v
        raise KeyError(f"scene {self.scene_id} has no view {view_id}")

    def to_dict(self) -> dict:
        return {
            "scene_id": int(self.scene_id),
            "views": [{"view_id": int(v.view_id), "points": v.points.tolist(), "labels": v.labels.tolist(),
                       "visible_objects": sorted(int(o) for o in v.visible_objects)} for v in self.views],
            "true_thetas": [t.to_dict() for t in self.true_thetas],
            "object_records": [{"location": o.location.tolist(), "shape": o.shape.value,
                                "component": int(o.component), "points": o.canonical.tolist()}
                               for o in self.object_records],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "Scene":
        views = tuple(View(int(v["view_id"]), np.asarray(v["points"], dtype=float).reshape(-1, 2),
                           np.asarray(v["labels"], dtype=int), frozenset(v["visible_objects"]))
                      for v in payload["views"])
        records = tuple(ObjectRecord(np.asarray(o["location"], dtype=float), ShapeKind(o["shape"]),
                                     int(o.get("component", -1)),
                                     np.asarray(o["points"], dtype=float).reshape(-1, 2))
                        for o in payload["object_records"])
        thetas = tuple(Affine2D.from_dict(t) for t in payload["true_thetas"])
        return cls(int(payload["scene_id"]), views, thetas, records)

    def transformed(self, h: Affine2D) -> "Scene":
        """The same scene seen through an extra input-plane map ``h`` after every camera."""
        views = tuple(View(v.view_id, apply(h, v.points), v.labels, v.visible_objects) for v in self.views)
        return Scene(self.scene_id, views, tuple(h.compose(t) for t in self.true_thetas), self.object_records)


def _visibility(spec: SceneSpec, rng: np.random.Generator) -> list[frozenset]:
    n_obj, n_views = spec.n_objects, spec.n_views
    occ = spec.occlusion
    if occ.kind == "none":
        return [frozenset(range(n_obj)) for _ in range(n_views)]
    if occ.kind == "scripted":
        if not occ.hidden:
            return [frozenset(range(n_obj)) for _ in range(n_views)]
        return [frozenset(range(n_obj)) - occ.hidden[v] for v in range(n_views)]
    visible = rng.random((n_views, n_obj)) >= occ.rate
    need = min(occ.min_visible_views, n_views)
    for o in range(n_obj):
        short = need - visible[:, o].sum()
        if short > 0:
            hidden = np.flatnonzero(~visible[:, o])
            visible[rng.choice(hidden, size=short, replace=False), o] = True
    for v in range(n_views):
        if not visible[v].any():
            visible[v, rng.integers(n_obj)] = True
    return [frozenset(np.flatnonzero(visible[v]).tolist()) for v in range(n_views)]


def _jitter(rng: np.random.Generator, scale: float) -> Affine2D:
    return Affine2D.from_params(rng.normal(0.0, scale), np.exp(rng.normal(0.0, scale / 2, 2)),
                                rng.normal(0.0, scale / 4), rng.normal(0.0, scale, 2))


def sample_scene(spec: SceneSpec, rng: np.random.Generator, scene_id: int = 0) -> Scene:
    """Place objects, draw their outlines, then observe them through every camera."""
    comps = rng.choice(spec.location_mixture.n_components, size=spec.n_objects, replace=False)
    records = []
    shapes = list(ShapeKind)
    for c in comps:
        g = spec.location_mixture
        loc = g.means[c] + np.sqrt(g.vars[c]) * rng.standard_normal(g.dim)
        kind = shapes[rng.integers(len(shapes))]
        canonical = outline_points(kind, spec.points_per_object, rng) + loc
        records.append(ObjectRecord(loc, kind, int(c), canonical))
    visibility = _visibility(spec, rng)
    thetas = []
    for cam in spec.cameras:
        thetas.append(cam.compose(_jitter(rng, spec.camera_jitter)) if spec.camera_jitter > 0 else cam)
    views = []
    for v, (cam, vis) in enumerate(zip(thetas, visibility)):
        objs = sorted(vis)
        pts = np.concatenate([records[o].canonical for o in objs])
        labels = np.repeat(objs, spec.points_per_object)
        if spec.occlusion.point_dropout > 0:
            keep = rng.random(len(pts)) >= spec.occlusion.point_dropout
            pts, labels = pts[keep], labels[keep]
        views.append(View(v, apply(cam, pts), labels, frozenset(objs)))
    return Scene(int(scene_id), tuple(views), tuple(thetas), tuple(records))


def scene_rng(seed: int, scene_id: int) -> np.random.Generator:
    return derived_rng(seed, 0, scene_id)


def sample_dataset(spec: SceneSpec, m: int, seed: int) -> list[Scene]:
    check_positive_int(m, "M")
    return [sample_scene(spec, scene_rng(seed, i), scene_id=i) for i in range(m)]


def viewpoint_sufficient(scene: Scene, subset: Iterable[int]) -> bool:
    """True when the views in ``subset`` jointly see every placed object."""
    subset = list(subset)
    if not subset:
        raise ValueError("view subset must be nonempty")
    seen = set()
    for vid in subset:
        seen |= scene.view(vid).visible_objects
    return seen == set(range(len(scene.object_records)))


def sufficient_for_sets(visible_sets: Sequence[Iterable[int]], all_objects: Iterable[int]) -> bool:
    """Sufficiency for raw visibility sets, e.g. a hand-written occlusion table."""
    seen = set()
    for s in visible_sets:
        seen |= set(s)
    return seen == set(all_objects)


def write_jsonl(scenes: Sequence[Scene], path) -> None:
    with open(path, "w") as fh:
        for s in scenes:
            fh.write(json.dumps(s.to_dict(), separators=(",", ":")))
            fh.write("\n")


def read_jsonl(path) -> list[Scene]:
    with open(path) as fh:
        return [Scene.from_dict(json.loads(line)) for line in fh if line.strip()]


def summarize(scenes: Sequence[Scene]) -> dict:
    """Per-dataset statistics: object counts, shapes, and a visibility table."""
    n_views = max(len(s.views) for s in scenes)
    visible = np.zeros(n_views)
    objects = []
    shapes = {k.value: 0 for k in ShapeKind}
    for s in scenes:
        objects.append(len(s.object_records))
        for o in s.object_records:
            shapes[o.shape.value] += 1
        for v in s.views:
            visible[v.view_id] += len(v.visible_objects) / len(s.object_records)
    return {
        "n_scenes": len(scenes),
        "n_views": n_views,
        "objects_per_scene": float(np.mean(objects)),
        "shape_counts": shapes,
        "visible_fraction_per_view": (visible / len(scenes)).tolist(),
        "sufficient_all_views": float(np.mean([viewpoint_sufficient(s, s.view_ids) for s in scenes])),
    }
