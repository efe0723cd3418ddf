import numpy as np
import pytest

from conftest import calibration_instances
from pixelbox.dataio import filter_instances
from pixelbox.errors import GenerationExhausted
from pixelbox.geometry import CornerSet
from pixelbox.metrics import evaluate
from pixelbox.synth import (
    NoiseSpec,
    SceneConfig,
    generate_scene,
    generate_scenes,
    perturb,
    perturb_box,
    random_rotation,
)


class TestGenerate:
    def test_bitwise_deterministic(self):
        cfg = SceneConfig(instances=4, seed=7)
        a = generate_scene(cfg)
        b = generate_scene(cfg)
        assert a.width == b.width and a.height == b.height
        assert np.array_equal(a.intrinsics.matrix, b.intrinsics.matrix)
        for ia, ib in zip(a.instances, b.instances):
            assert np.array_equal(ia.corners, ib.corners)
            assert np.array_equal(ia.depths, ib.depths)

    def test_batch_deterministic_and_distinct(self):
        cfg = SceneConfig(instances=2, seed=1)
        a = generate_scenes(cfg, 5)
        b = generate_scenes(cfg, 5)
        for sa, sb in zip(a, b):
            assert np.array_equal(sa.instances[0].corners, sb.instances[0].corners)
        assert not np.array_equal(a[0].instances[0].corners, a[1].instances[0].corners)

    def test_every_instance_passes_filter(self):
        count = 0
        for i, scene in enumerate(generate_scenes(SceneConfig(instances=4, seed=13), 250)):
            kept, rejected = filter_instances(scene)
            assert rejected == []
            count += len(kept)
        assert count == 1000

    def test_self_evaluation_is_perfect(self):
        scenes = generate_scenes(SceneConfig(instances=3, seed=2), 3)
        preds = {i.instance_id: i.corner_set() for s in scenes for i in s.instances}
        o = evaluate(preds, scenes).overall()
        assert o["pag_uv"] == pytest.approx(0.0, abs=1e-9)
        assert o["nhd"] == pytest.approx(0.0, abs=1e-9)
        assert o["iou3d"] == pytest.approx(1.0, abs=1e-6)

    def test_rotation_sampler_is_proper(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            r = random_rotation(rng)
            assert np.allclose(r @ r.T, np.eye(3), atol=1e-12)
            assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)

    def test_infeasible_config_exhausts(self):
        # boxes far too large to ever project inside the image
        cfg = SceneConfig(
            instances=1,
            size_range=(500.0, 600.0),
            depth_range=(2.0, 3.0),
            seed=0,
        )
        with pytest.raises(GenerationExhausted):
            generate_scene(cfg)


class TestPerturb:
    def _corner_set(self):
        rng = np.random.default_rng(4)
        return CornerSet(rng.uniform(0, 512, (8, 2)), rng.uniform(1, 10, 8))

    def test_zero_sigma_is_identity(self):
        cs = self._corner_set()
        out = perturb(cs, NoiseSpec(seed=1))
        assert np.array_equal(out.uv, cs.uv)
        assert np.array_equal(out.depths, cs.depths)

    def test_deterministic(self):
        cs = self._corner_set()
        spec = NoiseSpec(sigma_uv=2.0, sigma_depth=0.05, seed=9)
        a, b = perturb(cs, spec), perturb(cs, spec)
        assert np.array_equal(a.uv, b.uv) and np.array_equal(a.depths, b.depths)

    def test_depth_floor(self):
        cs = CornerSet(np.zeros((8, 2)), np.full(8, 0.011))
        out = perturb(cs, NoiseSpec(sigma_depth=5.0, seed=2))
        assert np.all(out.depths >= 0.01)

    def test_box_jitter_default_magnitude(self):
        spec = NoiseSpec(seed=5)
        assert spec.sigma_box == 0.02
        box = np.array([0.2, 0.2, 0.8, 0.8])
        out = perturb_box(box, spec)
        assert np.all(np.abs(out - box) < 0.2)

    def test_corner_noise_matches_rayleigh_mean(self):
        scenes, preds = calibration_instances(400, sigma_uv=2.0)
        report = evaluate(preds, scenes, rectify=False)
        expected = 2.0 * np.sqrt(np.pi / 2.0)
        assert report.overall()["pag_uv"] == pytest.approx(expected, rel=0.05)

    def test_depth_noise_matches_half_normal_mean(self):
        scenes, preds = calibration_instances(400, sigma_depth=0.05)
        report = evaluate(preds, scenes, rectify=False)
        expected = 5.0 * np.sqrt(2.0 / np.pi)
        assert report.overall()["pag_d"] == pytest.approx(expected, rel=0.05)
