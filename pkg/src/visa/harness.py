"""Experiment runners behind the ``visa`` command line.

Every runner takes a resolved :class:`ExperimentConfig` and a master seed and
returns a report dictionary plus CSV tables. Timing lives under the report's
``timing`` key only, so two reports from the same inputs agree byte for byte
once that key is dropped, whatever the worker count.
"""
from __future__ import annotations

import copy
import csv
import io
import itertools
import json
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .aggregate import histogram, projected_aggregate
from .matching import hungarian
from .metrics import fit_affine_ls, inv_smcc, mcc, smcc
from .pipeline import DatasetResult, PipelineConfig, content_means, infer_dataset
from .scenegen import OcclusionPolicy, SceneSpec, read_jsonl, sample_dataset, summarize
from .view import Affine2D, apply

COMMANDS = ("generate", "infer", "eval-identifiability", "eval-invariance", "eval-equivariance", "views-sweep")


class ConfigError(ValueError):
    """The experiment configuration is malformed or violates a precondition."""


def _schema(name: str) -> dict:
    return json.loads(resources.files("visa").joinpath("schemas", name).read_text())


def default_dataset(command: str) -> dict:
    """Per-command default scene specification and scale."""
    occ = OcclusionPolicy("random_dropout", 0.25)
    if command == "eval-invariance":
        spec = SceneSpec(cameras=SceneSpec.from_dict({"n_views": 3}).cameras,
                         occlusion=replace(occ, min_visible_views=2))
        return {"spec": spec.to_dict(), "n_scenes": 1000}
    if command == "eval-equivariance":
        return {"spec": SceneSpec(camera_jitter=0.1).to_dict(), "n_scenes": 100}
    if command == "views-sweep":
        return {"spec": SceneSpec(occlusion=occ).to_dict(), "n_scenes": 500}
    return {"spec": SceneSpec(occlusion=occ).to_dict(), "n_scenes": 2000}


@dataclass
class ExperimentConfig:
    command: str
    dataset: dict
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    runs: int = 5
    run_seeds: list | None = None
    subsets: list = field(default_factory=lambda: [[0, 1], [1, 2], [0, 2]])
    n_transforms: int = 25
    transform: dict = field(default_factory=lambda: {"scale": [0.5, 2.0], "max_shear": 0.3, "max_shift": 2.0})
    view_counts: list = field(default_factory=lambda: [1, 2, 3, 4])
    histogram: dict = field(default_factory=lambda: {"bins": 50, "span": 4.0})
    match: str = "per_sample"

    @classmethod
    def from_dict(cls, command: str, payload: dict) -> "ExperimentConfig":
        if command not in COMMANDS:
            raise ConfigError(f"unknown command {command!r}")
        try:
            jsonschema.validate(payload, _schema("config.schema.json"))
        except jsonschema.ValidationError as exc:
            raise ConfigError(f"config: {exc.message} at {list(exc.absolute_path)}") from exc
        payload = copy.deepcopy(payload)
        dataset = payload.pop("dataset", None) or default_dataset(command)
        if "path" not in dataset and "spec" not in dataset:
            dataset = {**default_dataset(command), **dataset}
        try:
            pipeline = PipelineConfig.from_dict(payload.pop("pipeline", {}))
            if "spec" in dataset:
                SceneSpec.from_dict(dataset["spec"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg = cls(command, dataset, pipeline, **payload)
        cfg.validate()
        return cfg

    def validate(self):
        if self.command == "eval-identifiability" and self.n_run_seeds < 2:
            raise ConfigError("identifiability needs at least 2 runs")
        if self.command == "views-sweep" and self.n_run_seeds < 2:
            raise ConfigError("views sweep needs at least 2 runs per view count")
        if self.command == "eval-invariance" and len(self.subsets) < 2:
            raise ConfigError("invariance needs at least 2 view subsets")
        if self.command == "eval-equivariance" and self.n_transforms < 10:
            raise ConfigError("equivariance needs at least 10 transforms")
        if self.run_seeds is not None and len(self.run_seeds) != self.runs:
            raise ConfigError("run_seeds must list one seed per run")

    @property
    def n_run_seeds(self) -> int:
        return self.runs if self.run_seeds is None else len(self.run_seeds)

    def to_dict(self) -> dict:
        out = {"dataset": self.dataset, "pipeline": self.pipeline.to_dict(), "runs": self.runs,
               "match": self.match, "histogram": self.histogram}
        if self.run_seeds is not None:
            out["run_seeds"] = list(self.run_seeds)
        if self.command == "eval-invariance":
            out["subsets"] = self.subsets
        if self.command == "eval-equivariance":
            out["n_transforms"] = self.n_transforms
            out["transform"] = self.transform
        if self.command == "views-sweep":
            out["view_counts"] = self.view_counts
        return out


def derived_seed(seed: int, *key: int) -> int:
    """A 63-bit integer seed derived from ``seed`` and ``key``."""
    state = np.random.SeedSequence([int(seed), *map(int, key)]).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def run_seeds(cfg: ExperimentConfig, seed: int) -> list[int]:
    if cfg.run_seeds is not None:
        return [int(s) for s in cfg.run_seeds]
    return [derived_seed(seed, 2, r) for r in range(cfg.runs)]


def load_scenes(cfg: ExperimentConfig, seed: int, n_scenes: int | None = None):
    ds = cfg.dataset
    if "path" in ds:
        scenes = read_jsonl(ds["path"])
        return scenes[:n_scenes] if n_scenes is not None else scenes
    spec = SceneSpec.from_dict(ds["spec"])
    m = n_scenes if n_scenes is not None else int(ds.get("n_scenes", 2000))
    return sample_dataset(spec, m, int(ds.get("seed", seed)))


# ---------------------------------------------------------------- tables

def to_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _csv_value(row.get(k)) for k in columns})
    return buf.getvalue()


def _csv_value(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return " ".join(str(x) for x in v)
    return v


def _mean_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return float("nan"), float("nan")
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def _paired_contents(a: DatasetResult, b: DatasetResult):
    ids = {r.scene_id for r in a.results} & {r.scene_id for r in b.results}
    ra = sorted((r for r in a.results if r.scene_id in ids), key=lambda r: r.scene_id)
    rb = sorted((r for r in b.results if r.scene_id in ids), key=lambda r: r.scene_id)
    (ma, aa), (mb, ab) = content_means(ra), content_means(rb)
    return ma, aa, mb, ab, ra, rb


def _run_summary(res: DatasetResult) -> dict:
    return {"n_scenes": len(res.results), "n_failed": res.n_failed, "n_flagged_views": res.n_flagged_views,
            "sufficient_fraction": float(np.mean([r.sufficiency for r in res.results])) if res.results else 0.0,
            "failures": [[int(i), str(m)] for i, m in res.failures]}


def content_error(results, scenes, cfg: PipelineConfig) -> float:
    """Mean per-scene worst matched distance between active content means and true object locations.

    Locations are expressed in the pipeline's common frame: the canonical
    frame in oracle mode, the base camera frame in estimated mode. Only
    scenes whose active slot count equals the object count enter.
    """
    by_id = {s.scene_id: s for s in scenes}
    errs = []
    for r in results:
        s = by_id[r.scene_id]
        locs = np.stack([o.location for o in s.object_records])
        if cfg.view_mode == "estimated":
            locs = apply(s.true_thetas[cfg.base_view], locs)
        act = r.content.active()
        mu = r.content.mu[act]
        if len(mu) != len(locs):
            continue
        d2 = np.sum((mu[:, None, :] - locs[None, :, :]) ** 2, axis=-1)
        perm, _ = hungarian(d2)
        errs.append(float(np.sqrt(d2[np.arange(len(mu)), perm.map]).max()))
    return float(np.mean(errs)) if errs else float("nan")


# ---------------------------------------------------------------- commands

def cmd_generate(cfg: ExperimentConfig, seed: int, n_scenes: int | None = None):
    scenes = load_scenes(cfg, seed, n_scenes)
    summary = summarize(scenes)
    return {"result": {"summary": summary}}, {}, scenes


def cmd_infer(cfg: ExperimentConfig, seed: int, workers=None):
    scenes = load_scenes(cfg, seed)
    t0 = time.perf_counter()
    res = infer_dataset(scenes, cfg.pipeline, run_seeds(cfg, seed)[0], workers)
    elapsed = time.perf_counter() - t0
    rows = [{"scene_id": r.scene_id, "loglik": r.loglik, "sufficiency": r.sufficiency,
             "n_active": int(r.content.active().sum()), "flagged_views": r.flagged_views} for r in res.results]
    result = {"run": _run_summary(res), "content_error": content_error(res.results, scenes, cfg.pipeline),
              "mean_loglik": _mean_std([r.loglik for r in res.results])[0]}
    tables = {"scenes.csv": to_csv(rows, ["scene_id", "loglik", "sufficiency", "n_active", "flagged_views"])}
    return {"result": result, "timing": {"inference_seconds": elapsed}}, tables, res


def _identifiability(cfg: ExperimentConfig, scenes, seeds, workers, pipeline: PipelineConfig):
    runs, times = [], []
    for s in seeds:
        t0 = time.perf_counter()
        runs.append(infer_dataset(scenes, pipeline, s, workers))
        times.append(time.perf_counter() - t0)
    pairwise = []
    for i, j in itertools.combinations(range(len(runs)), 2):
        ma, aa, mb, ab, _, _ = _paired_contents(runs[i], runs[j])
        rep = smcc(ma, mb, aa, ab, match=cfg.match)
        pairwise.append({"pair": [i, j], "score": rep.score, "n_excluded": len(rep.excluded),
                         "per_slot": rep.to_dict()["per_slot"], "permutation": rep.permutation.tolist()})
    return runs, pairwise, times


def cmd_eval_identifiability(cfg: ExperimentConfig, seed: int, workers=None):
    scenes = load_scenes(cfg, seed)
    seeds = run_seeds(cfg, seed)
    t0 = time.perf_counter()
    runs, pairwise, times = _identifiability(cfg, scenes, seeds, workers, cfg.pipeline)
    mean, std = _mean_std([p["score"] for p in pairwise])
    tables = {"pairwise.csv": to_csv(pairwise, ["pair", "score", "n_excluded"])}
    bins, span = int(cfg.histogram.get("bins", 50)), float(cfg.histogram.get("span", 4.0))
    for r, res in enumerate(runs):
        centers, dens = histogram(projected_aggregate(res.aggregate_prior), bins, span)
        tables[f"histogram_run{r}.csv"] = to_csv(
            [{"center": float(c), "density": float(d)} for c, d in zip(centers, dens)], ["center", "density"])
    result = {"smcc_mean": mean, "smcc_std": std, "pairwise": pairwise, "runs": len(runs), "run_seeds": seeds,
              "per_run": [_run_summary(r) for r in runs],
              "content_error": [content_error(r.results, scenes, cfg.pipeline) for r in runs]}
    timing = {"total_seconds": time.perf_counter() - t0, "per_run_seconds": times}
    return {"result": result, "timing": timing}, tables, runs


def cmd_eval_invariance(cfg: ExperimentConfig, seed: int, workers=None):
    scenes = load_scenes(cfg, seed)
    run_seed = run_seeds(cfg, seed)[0]
    t0 = time.perf_counter()
    subsets = [tuple(sorted(s)) for s in cfg.subsets]
    n_views = min(len(s.views) for s in scenes)
    for s in subsets:
        if max(s) >= n_views:
            raise ConfigError(f"subset {list(s)} refers to views the dataset lacks")
    runs = [infer_dataset(scenes, replace(cfg.pipeline, subset=s), run_seed, workers) for s in subsets]
    pairs = []
    for i, j in itertools.combinations(range(len(runs)), 2):
        ma, aa, mb, ab, ra, rb = _paired_contents(runs[i], runs[j])
        rep = inv_smcc(ma, mb, aa, ab, [r.sufficiency for r in ra], [r.sufficiency for r in rb], match=cfg.match)
        pairs.append({"pair": [list(subsets[i]), list(subsets[j])], "score": rep.score,
                      "n_excluded": len(rep.excluded), "per_slot": rep.to_dict()["per_slot"],
                      "sufficient_fraction": [float(np.mean([r.sufficiency for r in ra])),
                                              float(np.mean([r.sufficiency for r in rb]))],
                      "warnings": rep.warnings})
    mean, std = _mean_std([p["score"] for p in pairs])
    result = {"inv_smcc_mean": mean, "inv_smcc_std": std, "pairs": pairs, "subsets": [list(s) for s in subsets],
              "per_subset": [_run_summary(r) for r in runs],
              "warnings": sorted({w for p in pairs for w in p["warnings"]})}
    rows = [{"pair": f"{p['pair'][0]}|{p['pair'][1]}", "score": p["score"], "n_excluded": p["n_excluded"]}
            for p in pairs]
    tables = {"pairs.csv": to_csv(rows, ["pair", "score", "n_excluded"])}
    bins, span = int(cfg.histogram.get("bins", 50)), float(cfg.histogram.get("span", 4.0))
    for s, res in zip(subsets, runs):
        centers, dens = histogram(projected_aggregate(res.aggregate_prior), bins, span)
        tables["histogram_subset" + "_".join(map(str, s)) + ".csv"] = to_csv(
            [{"center": float(c), "density": float(d)} for c, d in zip(centers, dens)], ["center", "density"])
    return {"result": result, "timing": {"total_seconds": time.perf_counter() - t0}}, tables, runs


def random_affine(rng: np.random.Generator, scale=(0.5, 2.0), max_shear=0.3, max_shift=2.0,
                  max_angle=np.pi) -> Affine2D:
    """Rotation, axis scales in ``scale``, shear and offset, all uniform."""
    lo, hi = scale
    return Affine2D.from_params(rng.uniform(-max_angle, max_angle), rng.uniform(lo, hi, 2),
                                rng.uniform(-max_shear, max_shear), rng.uniform(-max_shift, max_shift, 2))


def _view_vectors(res: DatasetResult, keep: set | None, views):
    out = {}
    for r in res.results:
        for vr in r.per_view:
            vid = vr.descriptor.view_id
            if vid in views and not vr.flagged and (keep is None or r.scene_id in keep):
                out[(r.scene_id, vid)] = vr.descriptor.v
    return out


def cmd_eval_equivariance(cfg: ExperimentConfig, seed: int, workers=None):
    scenes = load_scenes(cfg, seed)
    run_seed = run_seeds(cfg, seed)[0]
    pipe = cfg.pipeline
    t0 = time.perf_counter()
    # the base view's map is the identity by construction in estimated mode
    views = set(pipe.subset[1:]) if pipe.view_mode == "estimated" else set(pipe.subset)
    if not views:
        raise ConfigError("estimated-mode equivariance needs at least two views in the subset")
    base = infer_dataset(scenes, pipe, run_seed, workers)
    base_v = _view_vectors(base, None, views)
    rows = []
    for t in range(cfg.n_transforms):
        h = random_affine(np.random.default_rng(derived_seed(seed, 3, t)), tuple(cfg.transform.get("scale", (0.5, 2.0))),
                          float(cfg.transform.get("max_shear", 0.3)), float(cfg.transform.get("max_shift", 2.0)),
                          float(cfg.transform.get("max_angle", np.pi)))
        moved = infer_dataset([s.transformed(h) for s in scenes], pipe, run_seed, workers)
        new_v = _view_vectors(moved, None, views)
        keys = sorted(set(base_v) & set(new_v))
        X = np.stack([base_v[k] for k in keys])
        Y = np.stack([new_v[k] for k in keys])
        H, a = fit_affine_ls(X, Y)
        rep = mcc(Y, X @ H + a)
        rows.append({"transform": t, "mcc": rep.score, "n_vectors": len(keys),
                     "h": h.to_vector().tolist(), "n_flagged_views": moved.n_flagged_views})
    mean, std = _mean_std([r["mcc"] for r in rows])
    result = {"mcc_mean": mean, "mcc_std": std, "mcc_min": float(min(r["mcc"] for r in rows)),
              "transforms": rows, "baseline": _run_summary(base)}
    tables = {"transforms.csv": to_csv(rows, ["transform", "mcc", "n_vectors", "n_flagged_views"])}
    return {"result": result, "timing": {"total_seconds": time.perf_counter() - t0}}, tables, None


def cmd_views_sweep(cfg: ExperimentConfig, seed: int, workers=None):
    scenes = load_scenes(cfg, seed)
    n_views = min(len(s.views) for s in scenes)
    if n_views < max(cfg.view_counts):
        raise ConfigError(f"dataset has {n_views} views, sweep needs {max(cfg.view_counts)}")
    if n_views < 4:
        raise ConfigError("views sweep needs a dataset with at least 4 views")
    seeds = run_seeds(cfg, seed)
    t0 = time.perf_counter()
    table, timing = [], {}
    for n in cfg.view_counts:
        pipe = replace(cfg.pipeline, subset=tuple(range(n)))
        runs, pairwise, times = _identifiability(cfg, scenes, seeds, workers, pipe)
        mean, std = _mean_std([p["score"] for p in pairwise])
        err = _mean_std([content_error(r.results, scenes, pipe) for r in runs])[0]
        table.append({"n_views": n, "smcc_mean": mean, "smcc_std": std, "runs": len(runs),
                      "content_error": err,
                      "sufficient_fraction": float(np.mean([r.sufficiency for r in runs[0].results]))})
        timing[f"n_views_{n}_seconds"] = float(sum(times))
    drops = [table[k]["smcc_mean"] - table[k + 1]["smcc_mean"] for k in range(len(table) - 1)]
    result = {"rows": table, "max_drop": float(max(drops)) if drops else 0.0}
    timing["total_seconds"] = time.perf_counter() - t0
    tables = {"views_sweep.csv": to_csv(table, ["n_views", "smcc_mean", "smcc_std", "runs"])}
    return {"result": result, "timing": timing}, tables, None


RUNNERS = {
    "infer": cmd_infer,
    "eval-identifiability": cmd_eval_identifiability,
    "eval-invariance": cmd_eval_invariance,
    "eval-equivariance": cmd_eval_equivariance,
    "views-sweep": cmd_views_sweep,
}


# ---------------------------------------------------------------- reports

def build_report(command: str, cfg: ExperimentConfig, seed: int, body: dict) -> dict:
    report = {"command": command, "version": __version__, "seed": int(seed), "config": cfg.to_dict(),
              "result": body["result"], "timing": body.get("timing", {})}
    jsonschema.validate(json.loads(dumps(report)), _schema("report.schema.json"))
    return report


def dumps(obj) -> str:
    return json.dumps(_plain(obj), indent=2, sort_keys=True, allow_nan=True) + "\n"


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def lookup(report: dict, path: str):
    """Dotted-path lookup into a report, relative to ``result`` unless rooted there."""
    node = report if path.split(".")[0] in report else report["result"]
    for part in path.split("."):
        if isinstance(node, list):
            node = node[int(part)]
        else:
            node = node[part]
    return node


def check_thresholds(report: dict, thresholds: dict) -> list[dict]:
    """Evaluate ``{"metric.path": {"min": x, "max": y}}`` bounds against a report."""
    checks = []
    for metric, bound in sorted(thresholds.items()):
        if not isinstance(bound, dict):
            bound = {"min": bound}
        try:
            value = float(lookup(report, metric))
        except (KeyError, IndexError, ValueError, TypeError):
            checks.append({"metric": metric, "value": None, **bound, "passed": False})
            continue
        ok = np.isfinite(value)
        if "min" in bound:
            ok = ok and value >= bound["min"]
        if "max" in bound:
            ok = ok and value <= bound["max"]
        checks.append({"metric": metric, "value": value, **bound, "passed": bool(ok)})
    return checks


def write_outputs(out_dir: Path, report: dict, tables: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(dumps(report))
    for name, text in tables.items():
        (out_dir / name).write_text(text)


def strip_timing(report: dict) -> dict:
    out = dict(report)
    out.pop("timing", None)
    return out
