import csv
import hashlib
import io
import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from visa import __version__, cli, harness
from visa.harness import ConfigError, ExperimentConfig

GOLDEN = Path(__file__).parent / "golden"

TINY = {
    "eval-identifiability": {"dataset": {"n_scenes": 12}, "runs": 2},
    "eval-invariance": {"dataset": {"n_scenes": 12}},
    "eval-equivariance": {"dataset": {"n_scenes": 12}, "n_transforms": 10},
    "views-sweep": {"dataset": {"n_scenes": 12}, "runs": 2},
    "infer": {"dataset": {"n_scenes": 6}},
}


def skeleton(node):
    """Key and type structure of a JSON value, ignoring values and list lengths."""
    if isinstance(node, dict):
        return {k: skeleton(v) for k, v in sorted(node.items())}
    if isinstance(node, list):
        return [skeleton(node[0])] if node else []
    if isinstance(node, bool):
        return "bool"
    if isinstance(node, (int, float)) or node is None:
        return "number"
    return type(node).__name__


def run_cli(tmp_path, command, payload, *extra, name="out"):
    cfg = tmp_path / f"{name}.json"
    cfg.write_text(json.dumps(payload))
    out = tmp_path / name
    code = cli.main([command, "--config", str(cfg), "--seed", "7", "--out", str(out), *extra])
    return code, out


def report(out):
    return json.loads((out / "report.json").read_text())


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig.from_dict("eval-identifiability", {})
        assert cfg.runs == 5 and cfg.dataset["n_scenes"] == 2000
        assert cfg.pipeline.subset == (0, 1, 2)

    @pytest.mark.parametrize("command, payload", [
        ("eval-identifiability", {"runs": 1}),
        ("views-sweep", {"runs": 1}),
        ("eval-invariance", {"subsets": [[0, 1]]}),
        ("eval-equivariance", {"n_transforms": 9}),
        ("eval-identifiability", {"runs": 3, "run_seeds": [1, 2]}),
        ("infer", {"unknown_key": 1}),
        ("infer", {"pipeline": {"view_mode": "learned"}}),
        ("infer", {"dataset": {"spec": {"n_objects": 9}}}),
        ("bogus", {}),
    ])
    def test_rejected(self, command, payload):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(command, payload)

    def test_dataset_merges_defaults(self):
        cfg = ExperimentConfig.from_dict("eval-invariance", {"dataset": {"n_scenes": 5}})
        assert cfg.dataset["n_scenes"] == 5 and len(cfg.dataset["spec"]["cameras"]) == 3

    def test_round_trip(self):
        cfg = ExperimentConfig.from_dict("eval-equivariance", {"n_transforms": 12})
        again = ExperimentConfig.from_dict("eval-equivariance", json.loads(harness.dumps(cfg.to_dict())))
        assert again.to_dict() == json.loads(harness.dumps(cfg.to_dict()))


class TestSeeds:
    def test_derived_seed(self):
        assert harness.derived_seed(1, 2, 3) == harness.derived_seed(1, 2, 3)
        assert harness.derived_seed(1, 2, 3) != harness.derived_seed(1, 2, 4)
        assert 0 <= harness.derived_seed(2 ** 64 - 1, 0) < 2 ** 63

    def test_explicit_run_seeds(self):
        cfg = ExperimentConfig.from_dict("eval-identifiability", {"runs": 2, "run_seeds": [4, 4]})
        assert harness.run_seeds(cfg, 0) == [4, 4]


class TestGenerate:
    def test_default_summary(self, tmp_path):
        code, out = run_cli(tmp_path, "generate", {}, "--format", "summary")
        assert code == cli.EXIT_OK
        summary = json.loads((out / "summary.json").read_text())
        assert summary["n_scenes"] == 2000 and summary["objects_per_scene"] == 3.0
        assert not (out / "dataset.jsonl").exists()

    def test_scene_count_and_hash(self, tmp_path):
        digests = set()
        for name in ("a", "b"):
            code, out = run_cli(tmp_path, "generate", {}, "--scenes", "10", name=name)
            assert code == cli.EXIT_OK
            data = (out / "dataset.jsonl").read_bytes()
            assert len(data.decode().splitlines()) == 10
            digests.add(hashlib.sha256(data).hexdigest())
        assert len(digests) == 1

    def test_generated_file_feeds_infer(self, tmp_path):
        _, gen = run_cli(tmp_path, "generate", {}, "--scenes", "4", name="gen")
        code, out = run_cli(tmp_path, "infer", {"dataset": {"path": str(gen / "dataset.jsonl")}}, name="inf")
        assert code == cli.EXIT_OK
        assert len((out / "results.jsonl").read_text().splitlines()) == 4
        assert (out / "aggregate_prior.json").exists()


class TestIdentifiability:
    def test_same_seed_is_one(self):
        cfg = ExperimentConfig.from_dict("eval-identifiability",
                                         {"dataset": {"n_scenes": 15}, "runs": 2, "run_seeds": [3, 3]})
        body, tables, _ = harness.cmd_eval_identifiability(cfg, 0)
        assert body["result"]["smcc_mean"] == pytest.approx(1.0, abs=1e-9)
        assert set(tables) == {"pairwise.csv", "histogram_run0.csv", "histogram_run1.csv"}
        rows = list(csv.DictReader(io.StringIO(tables["histogram_run0.csv"])))
        assert len(rows) == 50

    def test_report_schema(self):
        cfg = ExperimentConfig.from_dict("eval-identifiability", TINY["eval-identifiability"])
        body, _, _ = harness.cmd_eval_identifiability(cfg, 1)
        rep = harness.build_report("eval-identifiability", cfg, 1, body)
        assert rep["version"] == __version__ and rep["config"] == cfg.to_dict()
        assert len(rep["result"]["pairwise"]) == 1


class TestInvariance:
    def test_same_subset_is_one(self):
        cfg = ExperimentConfig.from_dict("eval-invariance", {"dataset": {"n_scenes": 15}, "subsets": [[0, 1], [0, 1]]})
        body, _, _ = harness.cmd_eval_invariance(cfg, 0)
        assert body["result"]["inv_smcc_mean"] == pytest.approx(1.0, abs=1e-9)

    def test_insufficient_subset_warns(self):
        payload = {"dataset": {"n_scenes": 30}, "subsets": [[0], [0, 1, 2]]}
        body, _, _ = harness.cmd_eval_invariance(ExperimentConfig.from_dict("eval-invariance", payload), 0)
        res = body["result"]
        assert res["per_subset"][0]["sufficient_fraction"] < 0.95
        assert res["warnings"] and res["pairs"][0]["warnings"]

    def test_unknown_view(self):
        cfg = ExperimentConfig.from_dict("eval-invariance", {"dataset": {"n_scenes": 3}, "subsets": [[0, 1], [0, 5]]})
        with pytest.raises(ConfigError):
            harness.cmd_eval_invariance(cfg, 0)


class TestEquivariance:
    def test_identity_transform(self):
        payload = {"dataset": {"n_scenes": 12}, "n_transforms": 10,
                   "transform": {"scale": [1.0, 1.0], "max_shear": 0.0, "max_shift": 0.0, "max_angle": 0.0}}
        body, _, _ = harness.cmd_eval_equivariance(ExperimentConfig.from_dict("eval-equivariance", payload), 0)
        for row in body["result"]["transforms"]:
            np.testing.assert_allclose(row["h"], [1, 0, 0, 0, 1, 0], atol=1e-15)
            assert row["mcc"] == pytest.approx(1.0, abs=1e-12)

    def test_oracle_composition_exact(self):
        body, tables, _ = harness.cmd_eval_equivariance(
            ExperimentConfig.from_dict("eval-equivariance", TINY["eval-equivariance"]), 0)
        assert body["result"]["mcc_min"] >= 1 - 1e-9
        assert len(tables["transforms.csv"].splitlines()) == 11

    def test_random_affine_invertible(self, rng):
        for _ in range(50):
            h = harness.random_affine(rng)
            assert abs(np.linalg.det(h.linear)) > 0.1


class TestViewsSweep:
    def test_rows_and_columns(self):
        body, tables, _ = harness.cmd_views_sweep(ExperimentConfig.from_dict("views-sweep", TINY["views-sweep"]), 0)
        assert [r["n_views"] for r in body["result"]["rows"]] == [1, 2, 3, 4]
        reader = csv.DictReader(io.StringIO(tables["views_sweep.csv"]))
        assert reader.fieldnames == ["n_views", "smcc_mean", "smcc_std", "runs"]
        assert len(list(reader)) == 4

    def test_needs_four_views(self):
        cfg = ExperimentConfig.from_dict("views-sweep", {"dataset": {"spec": {"n_views": 3}, "n_scenes": 3},
                                                         "runs": 2, "view_counts": [1, 2, 3]})
        with pytest.raises(ConfigError):
            harness.cmd_views_sweep(cfg, 0)


class TestThresholds:
    def test_lookup_and_check(self):
        rep = {"result": {"a": {"b": [0.5, 0.9]}, "nan": float("nan")}, "seed": 3}
        assert harness.lookup(rep, "a.b.1") == 0.9 and harness.lookup(rep, "seed") == 3
        checks = harness.check_thresholds(rep, {"a.b.0": {"min": 0.4, "max": 0.6}, "a.b.1": 0.95,
                                                "nan": 0.0, "missing": 0.0})
        assert [c["passed"] for c in checks] == [True, False, False, False]


class TestCli:
    def test_exit_config(self, tmp_path):
        assert run_cli(tmp_path, "eval-identifiability", {"runs": 1})[0] == cli.EXIT_CONFIG
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert cli.main(["infer", "--config", str(bad), "--seed", "0", "--out", str(tmp_path / "x")]) == cli.EXIT_CONFIG

    def test_seed_range(self, tmp_path):
        (tmp_path / "c.json").write_text("{}")
        with pytest.raises(SystemExit):
            cli.main(["infer", "--config", str(tmp_path / "c.json"), "--seed", str(2 ** 64), "--out", str(tmp_path)])

    def test_exit_runtime(self, tmp_path):
        payload = {"dataset": {"path": str(tmp_path / "missing.jsonl")}}
        assert run_cli(tmp_path, "infer", payload)[0] == cli.EXIT_RUNTIME

    def test_exit_threshold(self, tmp_path):
        (tmp_path / "t.json").write_text(json.dumps({"smcc_mean": {"min": 2.0}}))
        code, out = run_cli(tmp_path, "eval-identifiability", TINY["eval-identifiability"],
                            "--assert", str(tmp_path / "t.json"))
        assert code == cli.EXIT_THRESHOLD
        assert report(out)["assertions"][0]["passed"] is False
        (tmp_path / "t.json").write_text(json.dumps({"smcc_mean": {"min": 0.5}}))
        code, out = run_cli(tmp_path, "eval-identifiability", TINY["eval-identifiability"],
                            "--assert", str(tmp_path / "t.json"), name="ok")
        assert code == cli.EXIT_OK

    def test_workers_env_override(self, monkeypatch):
        monkeypatch.setenv("VISA_WORKERS", "3")
        from visa.pipeline import resolve_workers
        assert resolve_workers(1) == 3
        monkeypatch.delenv("VISA_WORKERS")
        assert resolve_workers(2) == 2

    def test_deterministic_across_workers(self, tmp_path, monkeypatch):
        monkeypatch.delenv("VISA_WORKERS", raising=False)
        payload = TINY["eval-identifiability"]
        _, a = run_cli(tmp_path, "eval-identifiability", payload, "--workers", "1", name="a")
        _, b = run_cli(tmp_path, "eval-identifiability", payload, "--workers", "2", name="b")
        ra, rb = report(a), report(b)
        assert harness.dumps(harness.strip_timing(ra)) == harness.dumps(harness.strip_timing(rb))
        assert (a / "pairwise.csv").read_bytes() == (b / "pairwise.csv").read_bytes()


@pytest.mark.parametrize("command", sorted(TINY))
def test_report_structure_golden(tmp_path, command):
    code, out = run_cli(tmp_path, command, TINY[command])
    assert code == cli.EXIT_OK
    rep = report(out)
    schema = json.loads((Path(harness.__file__).parent / "schemas" / "report.schema.json").read_text())
    jsonschema.validate(rep, schema)
    rep.pop("timing")
    golden = json.loads((GOLDEN / f"{command}.json").read_text())
    assert skeleton(rep) == golden
