import numpy as np
import pytest
from sklearn.base import clone

from oracles import reference_em
from visa.aggregate import aggregate_content
from visa.matching import hungarian
from visa.pipeline import (PipelineConfig, SceneResult, ViewInvariantSlotAttention, content_means,
                           infer_dataset, infer_scene, resolve_workers, scene_rng)
from visa.psa import PsaConfig
from visa.scenegen import OcclusionPolicy, SceneSpec, sample_dataset, sample_scene
from visa.view import Affine2D, apply, invert


def spec(**kw):
    kw.setdefault("points_per_object", 300)
    return SceneSpec(**kw)


def locations(scene):
    return np.stack([o.location for o in scene.object_records])


def matched_error(mu, locs):
    d2 = np.sum((mu[:, None] - locs[None]) ** 2, axis=-1)
    perm, _ = hungarian(d2)
    return np.sqrt(d2[np.arange(len(mu)), perm.map]).max()


def coverage_error(result, scene):
    """Mean over objects of the distance to its content slot; a missed object takes the nearest active mean."""
    locs = locations(scene)
    mu = result.content.mu[result.content.active()]
    d = np.linalg.norm(locs[:, None] - mu[None], axis=-1)
    if len(mu) >= len(locs):
        perm, _ = hungarian(np.pad(d ** 2, ((0, len(mu) - len(locs)), (0, 0))))
        return float(np.mean(d[np.arange(len(locs)), perm.map[:len(locs)]]))
    return float(np.mean(np.sort(d.min(axis=1))[::-1]))


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            PipelineConfig(subset=())
        with pytest.raises(ValueError):
            PipelineConfig(alignment_rounds=0)
        with pytest.raises(ValueError):
            PipelineConfig(view_mode="learned")
        with pytest.raises(ValueError):
            PipelineConfig(subset=(1, 1))

    def test_base_view_is_smallest(self):
        assert PipelineConfig(subset=(3, 1, 2)).base_view == 1

    def test_round_trip(self):
        cfg = PipelineConfig(view_mode="estimated", subset=(0, 2), match_gate=None)
        assert PipelineConfig.from_dict(cfg.to_dict()) == cfg


class TestInferScene:
    def test_single_view_recovers_locations(self):
        sp = spec(cameras=(Affine2D.identity(),))
        cfg = PipelineConfig(subset=(0,))
        for i in range(10):
            scene = sample_scene(sp, np.random.default_rng(i), i)
            res = infer_scene(scene, cfg, scene_rng(0, i))
            assert matched_error(res.content.mu, locations(scene)) < 0.1

    def test_single_view_matches_reference_em_from_same_start(self):
        # well-separated objects: plain EM started at the true centroids stays put,
        # and the pipeline lands on the same means
        scene = sample_scene(spec(cameras=(Affine2D.identity(),)), np.random.default_rng(3))
        z = scene.view(0).points
        cents = np.stack([z[scene.view(0).labels == o].mean(axis=0) for o in range(3)])
        snaps, _ = reference_em(z, cents, 20)
        res = infer_scene(scene, PipelineConfig(subset=(0,)), scene_rng(0, 0))
        mu_ref = snaps[-1][0]
        d2 = np.sum((res.content.mu[:, None] - mu_ref[None]) ** 2, axis=-1)
        perm, _ = hungarian(d2)
        assert np.max(np.sqrt(d2[np.arange(3), perm.map])) < 0.1

    def test_oracle_views_agree(self):
        scene = sample_scene(spec(), np.random.default_rng(1))
        res = infer_scene(scene, PipelineConfig(subset=(0, 1, 2)), scene_rng(0, 1))
        base = res.per_view[0].slots.mu
        for vr in res.per_view[1:]:
            assert np.max(np.abs(vr.slots.mu - base)) < 0.1
        assert res.sufficiency
        assert [vr.descriptor.view_id for vr in res.per_view] == [0, 1, 2]
        for vr in res.per_view:
            np.testing.assert_array_equal(vr.descriptor.theta.matrix, scene.true_thetas[vr.descriptor.view_id].matrix)

    def test_scripted_occlusion(self):
        hidden = (set(), {0}, set(), set())
        scene = sample_scene(spec(occlusion=OcclusionPolicy("scripted", hidden=hidden)), np.random.default_rng(2))
        res = infer_scene(scene, PipelineConfig(subset=(0, 1, 2)), scene_rng(0, 2))
        loc0 = scene.object_records[0].location
        k = int(np.argmin(np.linalg.norm(res.content.mu - loc0, axis=1)))
        assert not res.per_view[1].slots.active()[k]
        others = aggregate_content([res.per_view[0].slots, res.per_view[2].slots])
        assert np.max(np.abs(res.content.mu[k] - others.mu[k])) < 0.1
        assert np.linalg.norm(res.content.mu[k] - loc0) < 0.1

    def test_estimated_recovers_relative_cameras(self):
        scene = sample_scene(spec(), np.random.default_rng(4))
        res = infer_scene(scene, PipelineConfig(view_mode="estimated", subset=(0, 1, 2)), scene_rng(0, 4))
        for vr in res.per_view:
            true = scene.true_thetas[vr.descriptor.view_id].compose(invert(scene.true_thetas[0]))
            np.testing.assert_allclose(vr.descriptor.theta.matrix, true.matrix, atol=1e-8)
            assert not vr.flagged
        locs = apply(scene.true_thetas[0], locations(scene))
        assert matched_error(res.content.mu, locs) < 0.1

    def test_estimated_flags_unidentifiable_view(self):
        hidden = (set(), {0, 1}, set(), set())
        scene = sample_scene(spec(occlusion=OcclusionPolicy("scripted", hidden=hidden)), np.random.default_rng(5))
        res = infer_scene(scene, PipelineConfig(view_mode="estimated", subset=(0, 1)), scene_rng(0, 5))
        assert res.flagged_views == [1]
        true = scene.true_thetas[1].compose(invert(scene.true_thetas[0]))
        np.testing.assert_allclose(res.per_view[1].descriptor.theta.matrix, true.matrix, atol=1e-12)

    def test_identity_fallback(self):
        hidden = (set(), {0, 1}, set(), set())
        scene = sample_scene(spec(occlusion=OcclusionPolicy("scripted", hidden=hidden)), np.random.default_rng(5))
        cfg = PipelineConfig(view_mode="estimated", subset=(0, 1), fallback="identity")
        res = infer_scene(scene, cfg, scene_rng(0, 5))
        np.testing.assert_array_equal(res.per_view[1].descriptor.theta.matrix, Affine2D.identity().matrix)

    def test_missing_view(self):
        scene = sample_scene(spec(cameras=(Affine2D.identity(),)), np.random.default_rng(0))
        with pytest.raises(ValueError):
            infer_scene(scene, PipelineConfig(subset=(0, 1)))

    def test_deterministic(self):
        scene = sample_scene(spec(occlusion=OcclusionPolicy("random_dropout", 0.25)), np.random.default_rng(6))
        for mode in ("oracle", "estimated"):
            cfg = PipelineConfig(view_mode=mode)
            a = infer_scene(scene, cfg, scene_rng(9, 6)).to_dict()
            b = infer_scene(scene, cfg, scene_rng(9, 6)).to_dict()
            assert a == b

    def test_frame_consistency_across_subsets(self):
        scenes = sample_dataset(spec(occlusion=OcclusionPolicy("random_dropout", 0.25)), 15, 3)
        for scene in scenes:
            fits = {}
            for sub in ((0, 1, 2), (1, 2, 3), (0, 3), (0, 1, 2, 3)):
                res = infer_scene(scene, PipelineConfig(subset=sub), scene_rng(0, scene.scene_id))
                if res.sufficiency:
                    fits[sub] = res.content.mu[res.content.active()]
            ref = locations(scene)
            for mu in fits.values():
                assert matched_error(mu, ref) < 0.1

    def test_gaussian_product_refinement_runs(self):
        scene = sample_scene(spec(), np.random.default_rng(7))
        res = infer_scene(scene, PipelineConfig(gaussian_product_refinement=True), scene_rng(0, 7))
        assert abs(res.content.pi.sum() - 1) < 1e-12


class TestInferDataset:
    def test_single_scene_prior(self):
        scenes = sample_dataset(spec(), 1, 0)
        out = infer_dataset(scenes, PipelineConfig(), seed=0)
        np.testing.assert_array_equal(out.aggregate_prior.mixture.means, out.results[0].content.mu)
        np.testing.assert_array_equal(out.aggregate_prior.mixture.weights, out.results[0].content.pi)

    def test_duplicated_dataset_same_density(self, rng):
        scenes = sample_dataset(spec(), 3, 1)
        one = infer_dataset(scenes, PipelineConfig(), seed=0).aggregate_prior
        two = infer_dataset(scenes + scenes, PipelineConfig(), seed=0).aggregate_prior
        x = rng.normal(scale=3, size=(100, 2))
        np.testing.assert_allclose(two.mixture.pdf(x), one.mixture.pdf(x), rtol=1e-12)

    def test_worker_count_does_not_matter(self, monkeypatch):
        scenes = sample_dataset(spec(occlusion=OcclusionPolicy("random_dropout", 0.25)), 12, 2)
        cfg = PipelineConfig(view_mode="estimated")
        monkeypatch.delenv("VISA_WORKERS", raising=False)
        a = infer_dataset(scenes, cfg, seed=5, workers=1)
        b = infer_dataset(scenes, cfg, seed=5, workers=3)
        assert [r.to_dict() for r in a.results] == [r.to_dict() for r in b.results]
        assert a.view_prior.to_dict() == b.view_prior.to_dict()

    def test_workers_env(self, monkeypatch):
        monkeypatch.setenv("VISA_WORKERS", "3")
        assert resolve_workers(1) == 3
        monkeypatch.delenv("VISA_WORKERS")
        assert resolve_workers(None) == 1 and resolve_workers(4) == 4

    def test_failures_are_counted(self):
        good = sample_dataset(spec(), 2, 0)
        bad = sample_dataset(spec(cameras=(Affine2D.identity(),)), 1, 0)
        out = infer_dataset(good + bad, PipelineConfig(), seed=0)
        assert out.n_failed == 1 and len(out.results) == 2
        assert out.aggregate_prior.mixture.n_components == 6

    def test_empty(self):
        with pytest.raises(ValueError):
            infer_dataset([], PipelineConfig())

    def test_more_views_do_not_hurt(self):
        occ = OcclusionPolicy("random_dropout", 0.4, point_dropout=0.3)
        scenes = sample_dataset(spec(occlusion=occ), 40, 11)
        errs = []
        for n in (1, 2, 3, 4):
            out = infer_dataset(scenes, PipelineConfig(subset=tuple(range(n))), seed=0)
            by_id = {s.scene_id: s for s in scenes}
            errs.append(np.mean([coverage_error(r, by_id[r.scene_id]) for r in out.results]))
        assert all(b <= a + 1e-9 for a, b in zip(errs, errs[1:])), errs

    def test_content_means_shape(self):
        out = infer_dataset(sample_dataset(spec(), 2, 0), PipelineConfig(), seed=0)
        mu, act = content_means(out.results)
        assert mu.shape == (2, 3, 2) and act.shape == (2, 3)
        assert isinstance(out.results[0], SceneResult)


class TestEstimator:
    def test_fit_transform(self):
        scenes = sample_dataset(spec(), 4, 0)
        est = ViewInvariantSlotAttention(random_state=1)
        z = est.fit_transform(scenes)
        assert z.shape == (4, 3, 2)
        np.testing.assert_array_equal(est.transform(scenes), z)
        assert est.aggregate_prior_.mixture.n_components == 12

    def test_clone(self):
        est = ViewInvariantSlotAttention(view_mode="estimated", subset=(0, 1))
        assert clone(est).get_params() == est.get_params()

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            ViewInvariantSlotAttention().transform(sample_dataset(spec(), 1, 0))

    def test_psa_config_passthrough(self):
        est = ViewInvariantSlotAttention(n_slots=4, n_iter=5, gap_factor=None)
        cfg = est._config()
        assert cfg.psa == PsaConfig(k_slots=4, iterations=5, gap_factor=None)
