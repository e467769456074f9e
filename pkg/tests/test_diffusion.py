import math

import numpy as np
import pytest
import torch

from natpatch.diffusion import (
    NoisePredictor,
    PredictorDescriptor,
    PredictorMismatchError,
    ScheduleError,
    ScheduleSpec,
    ToyDenoiser,
    build_schedule,
    ddim_step,
    forward_noise,
    load_denoiser,
    purify,
    save_denoiser,
    toy_predictor,
)


def const_schedule(alpha_bars):
    """Schedule whose cumulative products hit the given values exactly."""
    ab = np.asarray(alpha_bars, dtype=np.float64)
    alphas = np.concatenate([[ab[0]], ab[1:] / ab[:-1]])
    return build_schedule(len(ab), {"name": "explicit", "params": {"alphas": alphas.tolist()}},
                          respaced_stride=1, entry_timestep=len(ab))


def zero_predictor(channels=3):
    return NoisePredictor(lambda x, t: torch.zeros_like(x), PredictorDescriptor("zero", channels=channels))


def exact_noise_predictor(x0, schedule):
    def fn(x, t):
        ab = schedule.alpha_bar(int(t))
        return (x - math.sqrt(ab) * x0) / math.sqrt(1 - ab)

    return NoisePredictor(fn, PredictorDescriptor("exact", channels=x0.shape[0]))


def smooth_predictor():
    # analytic and differentiable; depends on t so each step differs
    def fn(x, t):
        return 0.3 * torch.tanh(x) + 0.01 * t * x.roll(1, dims=-1)

    return NoisePredictor(fn, PredictorDescriptor("smooth", channels=3))


class TestSchedule:
    def test_default_ladder(self):
        s = build_schedule(1000, {"name": "linear", "params": {"start": 1e-4, "end": 0.02}}, 100, 200)
        assert s.ladder() == [200, 100]

    def test_constant_alpha_cumulative(self):
        s = build_schedule(10, {"name": "constant_alpha", "params": {"alpha": 0.9}}, 1, 3)
        np.testing.assert_allclose(s.alpha_bars[:3], [0.9, 0.81, 0.729], rtol=0, atol=1e-15)
        assert s.ladder() == [3, 2, 1]

    def test_stride_beyond_entry_rejected(self):
        with pytest.raises(ScheduleError):
            build_schedule(1000, "linear", 1001, 500)

    @pytest.mark.parametrize("stride", [0, -5])
    def test_non_positive_stride_rejected(self, stride):
        with pytest.raises(ScheduleError):
            build_schedule(1000, "linear", stride, 200)

    def test_entry_beyond_total_rejected(self):
        with pytest.raises(ScheduleError):
            build_schedule(100, "linear", 10, 101)

    @pytest.mark.parametrize("curve", ["linear", "cosine"])
    def test_invariants(self, curve):
        s = build_schedule(1000, curve, 100, 1000)
        ab = s.alpha_bars
        assert np.all(np.diff(ab) < 0)
        assert np.all((ab > 0) & (ab <= 1))
        np.testing.assert_array_equal(ab[1:], ab[:-1] * s.alphas[1:])
        assert s.alpha_bar(0) == 1.0

    def test_alpha_bar_range(self):
        s = build_schedule(10, "linear", 1, 5)
        with pytest.raises(ScheduleError):
            s.alpha_bar(11)

    def test_ladder_ends_below_stride(self):
        s = build_schedule(1000, "linear", 70, 500)
        ladder = s.ladder()
        assert ladder[0] == 500 and ladder[-1] - 70 < 70
        assert all(1 <= t <= 1000 for t in ladder)

    def test_spec_round_trip(self):
        spec = ScheduleSpec(entry_timestep=300, respaced_stride=50)
        assert ScheduleSpec.from_dict(spec.to_dict()) == spec
        with pytest.raises(ScheduleError):
            ScheduleSpec.from_dict({"bogus": 1})


class TestForwardNoise:
    def test_unit_alpha_bar_returns_input(self):
        s = build_schedule(4, {"name": "explicit", "params": {"alphas": [1.0, 0.9, 0.9, 0.9]}}, 1, 1)
        x0 = torch.rand(3, 4, 4, dtype=torch.float64)
        z = torch.randn(3, 4, 4, dtype=torch.float64)
        assert torch.equal(forward_noise(x0, 1, z, s), x0)

    def test_hand_value(self):
        s = const_schedule([0.25])
        out = forward_noise(torch.zeros(1, 2, 2, dtype=torch.float64), 1, torch.ones(1, 2, 2, dtype=torch.float64), s)
        np.testing.assert_allclose(out.numpy(), 0.8660254037844386, rtol=0, atol=1e-12)

    def test_shape_mismatch(self):
        s = const_schedule([0.5])
        with pytest.raises(ValueError):
            forward_noise(torch.zeros(3, 4, 4), 1, torch.zeros(3, 4, 5), s)

    def test_timestep_out_of_range(self):
        s = const_schedule([0.5])
        with pytest.raises(ValueError):
            forward_noise(torch.zeros(3, 4, 4), 2, torch.zeros(3, 4, 4), s)

    def test_monte_carlo_moments(self):
        s = build_schedule(1000, "linear", 100, 200)
        t = 200
        ab = s.alpha_bar(t)
        gen = torch.Generator().manual_seed(0)
        x0 = torch.linspace(0, 1, 12, dtype=torch.float64).reshape(3, 2, 2)
        n = 10_000
        z = torch.randn((n, 3, 2, 2), generator=gen, dtype=torch.float64)
        xs = forward_noise(x0.expand(n, -1, -1, -1), t, z, s)
        mean = xs.mean(0)
        var = xs.var(0)
        sigma2 = 1 - ab
        se_mean = math.sqrt(sigma2 / n)
        se_var = sigma2 * math.sqrt(2 / (n - 1))
        assert torch.all((mean - math.sqrt(ab) * x0).abs() < 3 * se_mean)
        assert torch.all((var - sigma2).abs() < 3 * se_var)


class TestDdimStep:
    def test_hand_case(self):
        s = const_schedule([0.8, 0.5])
        eps = NoisePredictor(lambda x, t: torch.full_like(x, 0.1), PredictorDescriptor("c", channels=1))
        out = ddim_step(torch.ones(1, 2, 2, dtype=torch.float64), 2, 1, eps, s)
        expected = math.sqrt(0.8) * ((1 - math.sqrt(0.5) * 0.1) / math.sqrt(0.5)) + math.sqrt(0.2) * 0.1
        np.testing.assert_allclose(out.numpy(), expected, rtol=0, atol=1e-12)

    def test_perfect_predictor_inverts(self):
        s = build_schedule(1000, "linear", 100, 200)
        gen = torch.Generator().manual_seed(3)
        x0 = torch.rand((3, 8, 8), generator=gen, dtype=torch.float64)
        z = torch.randn((3, 8, 8), generator=gen, dtype=torch.float64)
        xt = forward_noise(x0, 200, z, s)
        out = ddim_step(xt, 200, 0, exact_noise_predictor(x0, s), s)
        assert (out - x0).norm() / x0.norm() < 1e-12

    def test_order_enforced(self):
        s = const_schedule([0.8, 0.5])
        with pytest.raises(ValueError):
            ddim_step(torch.ones(3, 2, 2), 1, 1, zero_predictor(), s)
        with pytest.raises(ValueError):
            ddim_step(torch.ones(3, 2, 2), 1, 2, zero_predictor(), s)

    def test_bit_identical_repeats(self):
        s = build_schedule(1000, "linear", 100, 200)
        x = torch.rand(3, 6, 6)
        p = smooth_predictor()
        assert torch.equal(ddim_step(x, 200, 100, p, s), ddim_step(x, 200, 100, p, s))


class TestPurify:
    def test_degenerate_chain_is_clamp(self):
        s = build_schedule(4, {"name": "explicit", "params": {"alphas": [1.0, 0.9, 0.9, 0.9]}}, 1, 1)
        seed = torch.rand(3, 5, 5, dtype=torch.float64)
        pert = torch.randn(3, 5, 5, dtype=torch.float64)
        out = purify(seed, pert, torch.randn(3, 5, 5, dtype=torch.float64), zero_predictor(), s)
        assert torch.equal(out.final_patch, (seed + pert).clamp(0, 1))
        assert out.timesteps_visited == [1, 0]

    def test_deterministic(self):
        s = build_schedule(1000, "linear", 100, 200)
        seed = torch.rand(3, 8, 8)
        z = torch.randn(3, 8, 8)
        a = purify(seed, torch.zeros_like(seed), z, smooth_predictor(), s).final_patch
        b = purify(seed, torch.zeros_like(seed), z, smooth_predictor(), s).final_patch
        assert torch.equal(a, b)

    def test_compositional_oracle(self):
        s = build_schedule(1000, "linear", 100, 200)
        gen = torch.Generator().manual_seed(1)
        seed = torch.rand((3, 8, 8), generator=gen, dtype=torch.float64)
        pert = 0.05 * torch.randn((3, 8, 8), generator=gen, dtype=torch.float64)
        z = torch.randn((3, 8, 8), generator=gen, dtype=torch.float64)
        p = smooth_predictor()
        res = purify(seed, pert, z, p, s, keep_trajectory=True)
        # independent composition from the closed forms
        ab = {t: s.alpha_bar(t) for t in (0, 100, 200)}
        x = math.sqrt(ab[200]) * (seed + pert) + math.sqrt(1 - ab[200]) * z
        for t, tp in ((200, 100), (100, 0)):
            e = 0.3 * torch.tanh(x) + 0.01 * t * x.roll(1, dims=-1)
            x = math.sqrt(ab[tp]) * (x - math.sqrt(1 - ab[t]) * e) / math.sqrt(ab[t]) + math.sqrt(1 - ab[tp]) * e
        torch.testing.assert_close(res.final_patch, x.clamp(0, 1), rtol=0, atol=1e-12)
        assert res.timesteps_visited == [200, 100, 0]
        assert len(res.trajectory) == 3

    def test_output_clamped(self):
        s = build_schedule(1000, "linear", 100, 200)
        seed = torch.rand(3, 8, 8)
        out = purify(seed, 5 * torch.randn(3, 8, 8), torch.randn(3, 8, 8), smooth_predictor(), s).final_patch
        assert out.min() >= 0 and out.max() <= 1

    def test_gradient_matches_finite_differences(self):
        s = build_schedule(1000, "linear", 100, 300)  # three ladder steps
        gen = torch.Generator().manual_seed(2)
        seed = 0.2 + 0.6 * torch.rand((3, 8, 8), generator=gen, dtype=torch.float64)
        z = torch.randn((3, 8, 8), generator=gen, dtype=torch.float64)
        w = torch.randn((3, 8, 8), generator=gen, dtype=torch.float64)
        p = smooth_predictor()

        def f(d):
            out = purify(seed, d, 0.1 * z, p, s).final_patch
            return (w * out).sum() + out.pow(2).sum()

        d = torch.zeros(3, 8, 8, dtype=torch.float64, requires_grad=True)
        (g,) = torch.autograd.grad(f(d), d)
        fd = torch.zeros_like(g)
        h = 1e-6
        for i in range(d.numel()):
            e = torch.zeros(d.numel(), dtype=torch.float64)
            e[i] = h
            e = e.view_as(d)
            fd.view(-1)[i] = (f(d.detach() + e) - f(d.detach() - e)) / (2 * h)
        assert ((g - fd).norm() / fd.norm()).item() < 1e-3

    def test_size_mismatch_signalled(self):
        s = build_schedule(1000, "linear", 100, 200)
        p = NoisePredictor(lambda x, t: torch.zeros_like(x), PredictorDescriptor("fixed", spatial_size=16))
        with pytest.raises(PredictorMismatchError):
            purify(torch.rand(3, 8, 8), torch.zeros(3, 8, 8), torch.zeros(3, 8, 8), p, s)

    def test_shape_mismatch(self):
        s = build_schedule(1000, "linear", 100, 200)
        with pytest.raises(ValueError):
            purify(torch.rand(3, 8, 8), torch.zeros(3, 7, 8), torch.zeros(3, 8, 8), smooth_predictor(), s)

    def test_non_differentiable_predictor_uses_straight_through(self):
        s = build_schedule(1000, "linear", 100, 200)
        p = NoisePredictor(lambda x, t: torch.zeros_like(x).detach(), PredictorDescriptor("nd"), differentiable=False)
        d = torch.zeros(3, 8, 8, requires_grad=True)
        out = purify(torch.full((3, 8, 8), 0.5), d, torch.zeros(3, 8, 8), p, s).final_patch
        (g,) = torch.autograd.grad(out.sum(), d)
        assert torch.isfinite(g).all() and g.abs().sum() > 0


class TestPredictor:
    def test_output_shape_checked(self):
        p = NoisePredictor(lambda x, t: x[..., :-1], PredictorDescriptor("bad"))
        with pytest.raises(PredictorMismatchError):
            p(torch.zeros(3, 4, 4), 1)

    def test_toy_denoiser_checkpoint_round_trip(self, tmp_path):
        torch.manual_seed(0)
        net = ToyDenoiser()
        save_denoiser(net, tmp_path / "d.pt")
        loaded = load_denoiser(tmp_path / "d.pt")
        x = torch.rand(3, 9, 9)
        assert torch.equal(toy_predictor(net)(x, 150), loaded(x, 150))
        assert loaded(x, 150).shape == x.shape
