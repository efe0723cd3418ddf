import warnings

import numpy as np
import pytest

from pixelbox.errors import Diverged, ShapeMismatch
from pixelbox.fields import Grid, HeatField, target_heatmaps
from pixelbox.losses import (
    GRADCHECK_SEEDS,
    FitConfig,
    LossWeights,
    _sigmoid,
    _softplus,
    finite_diff_grad,
    fit_demo_instance,
    fit_heatmaps,
    grad_total,
    gradcheck_instance,
    gradcheck_max_rel_error,
    loss_coarse,
    loss_depth,
    loss_fine,
    make_loss_targets,
    peak_weights,
    schedule,
    smooth_l1,
    smooth_l1_grad,
    softplus_inverse,
    total_loss,
)


class TestSmoothL1:
    def test_values(self):
        assert smooth_l1(0.0) == 0.0
        assert smooth_l1(0.5) == pytest.approx(0.125)
        assert smooth_l1(2.0) == pytest.approx(1.5)
        assert smooth_l1(-2.0) == pytest.approx(1.5)

    def test_continuous_at_transition(self):
        eps = 1e-9
        assert smooth_l1(1.0 - eps) == pytest.approx(smooth_l1(1.0 + eps), abs=1e-8)
        assert smooth_l1_grad(1.0 - eps) == pytest.approx(smooth_l1_grad(1.0 + eps), abs=1e-8)

    def test_grad_matches_fd(self):
        for x in (-2.3, -0.7, 0.0, 0.4, 1.7):
            fd = (smooth_l1(x + 1e-6) - smooth_l1(x - 1e-6)) / 2e-6
            assert smooth_l1_grad(x) == pytest.approx(fd, abs=1e-6)


class TestPeakWeights:
    def _targets(self, grid):
        corners = np.tile([8.0, 8.0], (8, 1)) + np.arange(8)[:, None]
        return target_heatmaps(corners, grid, np.full(8, 16.0))

    def test_uniform_when_lam_one(self):
        w = self._targets(Grid.square(16))
        a = peak_weights(w, tau=0.1, lam=1.0).A
        assert np.all(a == 1.0)

    def test_all_ones_when_below_threshold(self):
        grid = Grid.square(16)
        w = target_heatmaps(np.tile([100.0, 100.0], (8, 1)), grid, np.full(8, 1.0))
        a = peak_weights(w, tau=0.1, lam=50.0).A
        assert np.all(a == 1.0)

    def test_threshold_rule(self):
        w = self._targets(Grid.square(16))
        pw = peak_weights(w, tau=0.1, lam=50.0)
        assert np.all(pw.A[w.W > 0.1] == 50.0)
        assert np.all(pw.A[w.W <= 0.1] == 1.0)


class TestLossComponents:
    def test_coarse_zero_at_target(self):
        rng = np.random.default_rng(0)
        w = rng.uniform(0, 1, (8, 4, 4))
        a = np.ones_like(w)
        assert loss_coarse(w, w, a) == 0.0

    def test_coarse_constant_residual(self):
        w = np.full((8, 4, 4), 0.2)
        h = w + 0.5
        a = np.ones_like(w)
        assert loss_coarse(h, w, a) == pytest.approx(0.125, rel=1e-7)

    def test_coarse_hand_summed_small_grid(self):
        # one peak cell above tau; residual 0.2 everywhere
        w = np.zeros((8, 2, 2))
        w[:, 0, 0] = 0.8
        h = w + 0.2
        a1 = np.where(w > 0.1, 1.0, 1.0)
        a50 = np.where(w > 0.1, 50.0, 1.0)
        expected_uniform = 32 * smooth_l1(0.2) / (32 + 1e-6)
        expected_peaked = (8 * 50 + 24) * smooth_l1(0.2) / (8 * 50 + 24 + 1e-6)
        assert loss_coarse(h, w, a1) == pytest.approx(expected_uniform)
        assert loss_coarse(h, w, a50) == pytest.approx(expected_peaked)

    def test_coarse_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            loss_coarse(np.zeros((8, 4, 4)), np.zeros((8, 4, 4)), np.ones((8, 5, 4)))

    def test_fine_examples(self):
        pts = np.tile([10.0, 20.0], (8, 1))
        assert loss_fine(pts, pts) == 0.0
        assert loss_fine(pts + [0.5, 0.0], pts) == pytest.approx(0.125)
        assert loss_fine(pts + [3.0, 4.0], pts) == pytest.approx(6.0)

    def test_depth_examples(self):
        d = np.linspace(2, 9, 8)
        z = np.broadcast_to(d[:, None, None], (8, 4, 4)).copy()
        h = np.full((8, 4, 4), 0.3)
        assert loss_depth(h, z, d) == 0.0
        assert loss_depth(np.zeros_like(h), z + 5.0, d) == 0.0
        assert loss_depth(h, z + 2.0, d) == pytest.approx(1.5, rel=1e-6)


class TestSchedule:
    def test_endpoints(self):
        assert schedule(0, 120, 5) == LossWeights(50.0, 0.0, 0.0)
        assert schedule(120, 120, 5) == LossWeights(1.0, 2.0, 5.0)

    def test_warmup_constant(self):
        for e in range(5):
            assert schedule(e, 120, 5) == LossWeights(50.0, 0.0, 0.0)

    def test_ramp_midpoint(self):
        mid = schedule(62.5, 120, 5)
        assert (mid.w_coarse, mid.w_fine, mid.w_depth) == (25.5, 1.0, 2.5)

    def test_continuity_over_ramp(self):
        prev = schedule(5, 120, 5)
        for e in np.linspace(5, 120, 231):
            cur = schedule(float(e), 120, 5)
            assert abs(cur.w_coarse - prev.w_coarse) < 0.5
            prev = cur

    def test_validation(self):
        with pytest.raises(ValueError):
            schedule(130, 120, 5)
        with pytest.raises(ValueError):
            schedule(0, 10, 10)


def _instance_on_grid(seed, size):
    grid = Grid.square(size)
    rng = np.random.default_rng(seed)
    corners = rng.uniform(2.0, size - 3.0, (8, 2))
    depths = rng.uniform(2.0, 8.0, 8)
    return grid, make_loss_targets(corners, depths, grid)


class TestTotalLoss:
    def test_zero_at_exact_target(self):
        size = 48
        grid = Grid.square(size)
        rng = np.random.default_rng(1)
        corners = np.round(rng.uniform(10.0, size - 10.0, (8, 2)))  # on grid points
        depths = rng.uniform(2.0, 8.0, 8)
        targets = make_loss_targets(corners, depths, grid)
        field = HeatField(
            targets.heatmaps.W.copy(),
            np.broadcast_to(depths[:, None, None], targets.heatmaps.W.shape).copy(),
        )
        report = total_loss(field, targets, LossWeights(1.0, 2.0, 5.0), beta=100.0, grid=grid)
        assert report.l_coarse == 0.0
        assert report.l_depth == 0.0
        assert report.total < 1e-12

    def test_coarse_only_projection(self):
        grid, targets = _instance_on_grid(2, 16)
        rng = np.random.default_rng(3)
        field = HeatField(rng.uniform(0, 1, (8, 16, 16)), rng.uniform(0, 4, (8, 16, 16)))
        report = total_loss(field, targets, LossWeights(1.0, 0.0, 0.0), beta=100.0)
        assert report.total == pytest.approx(report.l_coarse, abs=1e-15)

    def test_compositionality(self):
        grid, targets = _instance_on_grid(4, 16)
        rng = np.random.default_rng(5)
        field = HeatField(rng.uniform(0, 1, (8, 16, 16)), rng.uniform(0, 4, (8, 16, 16)))
        w = LossWeights(7.0, 1.5, 3.0)
        report = total_loss(field, targets, w, beta=100.0)
        recon = w.w_coarse * report.l_coarse + w.w_fine * report.l_fine + w.w_depth * report.l_depth
        assert abs(report.total - recon) <= 1e-12


class TestGradients:
    def test_soft_argmax_jacobian_two_cell_example(self):
        # flat two-cell field at beta = 1: pi = (0.5, 0.5) and the Jacobian
        # beta * pi * (x - u_hat) evaluates to -0.25 and +0.25
        from pixelbox.fields import soft_argmax

        def u(h0, h1):
            return soft_argmax(np.array([[h0, h1]]), beta=1.0)[0][0]

        _, pi = soft_argmax(np.array([[0.0, 0.0]]), beta=1.0)
        assert np.allclose(pi, 0.5)
        eps = 1e-6
        d0 = (u(eps, 0.0) - u(-eps, 0.0)) / (2 * eps)
        d1 = (u(0.0, eps) - u(0.0, -eps)) / (2 * eps)
        assert d0 == pytest.approx(-0.25, abs=1e-6)
        assert d1 == pytest.approx(0.25, abs=1e-6)

    def test_coarse_gradient_vanishes_at_matching_targets(self):
        grid, targets = _instance_on_grid(6, 8)
        rng = np.random.default_rng(7)
        logits = rng.normal(0, 1, (8, 8, 8))
        z_raw = rng.normal(0, 1, (8, 8, 8))
        targets.heatmaps.W = _sigmoid(logits)  # coarse target equals current H
        targets.peaks.A = np.ones_like(targets.peaks.A)
        g_l, _ = grad_total(logits, z_raw, targets, LossWeights(1.0, 0.0, 0.0), beta=100.0)
        assert np.max(np.abs(g_l)) <= 1e-10

    @pytest.mark.parametrize("size", [8, 16])
    def test_analytic_matches_finite_differences(self, size):
        grid = Grid.square(size)
        for seed in GRADCHECK_SEEDS[size][:2]:
            inst = gradcheck_instance(seed, grid)
            assert gradcheck_max_rel_error(*inst) <= 1e-4

    def test_finite_diff_on_quadratic(self):
        grad = finite_diff_grad(lambda t: float(t[0] ** 2), np.array([3.0]), step=1e-4)
        assert grad[0] == pytest.approx(6.0, abs=1e-6)

    def test_finite_diff_exact_on_linear(self):
        grad = finite_diff_grad(lambda t: float(2.0 * t[0] - 3.0 * t[1]), np.array([0.3, -1.2]))
        assert np.allclose(grad, [2.0, -3.0], atol=1e-9)


class TestFit:
    def test_zero_steps_returns_initialization(self):
        grid = Grid.square(16)
        uv, depths = fit_demo_instance(3, grid)
        targets = make_loss_targets(uv, depths, grid)
        cfg = FitConfig(steps=0, seed=9)
        res = fit_heatmaps(targets, grid, cfg)
        assert res.trace.shape == (1, 5)
        rng = np.random.default_rng(9)
        expected_logits = cfg.init_logit + cfg.init_jitter * rng.standard_normal((8, 16, 16))
        assert np.array_equal(res.field.H, _sigmoid(expected_logits))

    def test_same_seed_is_bitwise_identical(self):
        grid = Grid.square(24)
        uv, depths = fit_demo_instance(2, grid)
        targets = make_loss_targets(uv, depths, grid)
        cfg = FitConfig(steps=40, seed=4)
        a = fit_heatmaps(targets, grid, cfg)
        b = fit_heatmaps(targets, grid, cfg)
        assert np.array_equal(a.trace, b.trace)
        assert np.array_equal(a.field.H, b.field.H)
        assert np.array_equal(a.corners.uv, b.corners.uv)

    def test_divergence_raises(self):
        # bounded activations and linear loss tails keep ordinary runs finite;
        # an overflow-scale depth target drives the dense sum to inf
        grid = Grid.square(16)
        uv, _ = fit_demo_instance(1, grid)
        targets = make_loss_targets(uv, np.full(8, 1e308), grid)
        with np.errstate(over="ignore", invalid="ignore"), warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            with pytest.raises(Diverged):
                fit_heatmaps(targets, grid, FitConfig(steps=50, warmup_steps=1))

    def test_trace_file_round_trip(self, tmp_path):
        grid = Grid.square(16)
        uv, depths = fit_demo_instance(0, grid)
        targets = make_loss_targets(uv, depths, grid)
        path = tmp_path / "trace.txt"
        res = fit_heatmaps(targets, grid, FitConfig(steps=5), trace_path=path)
        lines = path.read_text().splitlines()
        assert lines[0] == "#pixelbox/loss-trace v1"
        rows = [l.split() for l in lines if not l.startswith("#")]
        assert len(rows) == 6
        parsed = np.array([[float(v) for v in r] for r in rows])
        assert np.array_equal(parsed, res.trace)

    def test_warmup_phase_is_coarse_only_and_monotone(self):
        grid = Grid.square(32)
        uv, depths = fit_demo_instance(0, grid)
        targets = make_loss_targets(uv, depths, grid)
        res = fit_heatmaps(targets, grid, FitConfig(steps=60, warmup_steps=40))
        warm = res.trace[:40]
        assert np.all(warm[:, 2] * 0 == 0)  # finite
        assert np.all(np.diff(warm[1:, 4]) <= 1e-12)
        # fine and depth carry zero weight during warm-up
        assert np.allclose(warm[:, 4], 50.0 * warm[:, 1])

    def test_endpoint_weighted_objective_improves(self):
        grid = Grid.square(48)
        uv, depths = fit_demo_instance(0, grid)
        targets = make_loss_targets(uv, depths, grid)
        res = fit_heatmaps(targets, grid, FitConfig(steps=300))
        fixed = res.trace[:, 1] + 2.0 * res.trace[:, 2] + 5.0 * res.trace[:, 3]
        assert fixed[-1] < 0.05 * fixed[10]

    @pytest.mark.xfail(
        strict=True,
        reason="provably unattainable for the scheduled objective: at ramp onset "
        "the fine and depth terms carry O(1) losses while their weights grow "
        "from zero, so the weighted total rises there regardless of learning "
        "rate (see the warm-up/ramp analysis in the fit docstring)",
    )
    def test_scheduled_trace_non_increasing_after_step_10(self):
        grid = Grid.square(64)
        uv, depths = fit_demo_instance(0, grid)
        targets = make_loss_targets(uv, depths, grid)
        res = fit_heatmaps(targets, grid, FitConfig(steps=500))
        assert np.all(np.diff(res.trace[10:, 4]) <= 0)

    def test_softplus_inverse(self):
        for y in (0.1, 1.0, 7.3):
            assert _softplus(np.array(softplus_inverse(y))) == pytest.approx(y, rel=1e-12)
