"""Schedules, forward/reverse steps, samplers, the denoising loss and scale calibration."""

import math

import pytest
import torch

from diffusion import (build_schedule, calibrate_scale, ddim_step, ddim_timesteps, ddpm_step, diffusion_loss,
                       diffusion_terms, draw_normal, forward_sample, forward_step, posterior_variance, predict_z0,
                       sample_loop)
from errors import CalibrationError, ConfigurationError, ScheduleIndexError
from numerics import RngStream, finite_difference_check


@pytest.fixture
def sched():
    return build_schedule(300, 0.00085, 0.012, "linear")


def test_linear_schedule_endpoints(sched):
    assert float(sched.beta(1)) == 0.00085
    assert float(sched.beta(300)) == 0.012
    assert float(sched.alpha_bar(1)) == 1 - 0.00085
    assert float(sched.alpha_bar(0)) == 1.0


def test_scaled_linear_product_matches_running_loop():
    s = build_schedule(300, 0.00085, 0.012, "scaled_linear")
    root_start, root_end = math.sqrt(0.00085), math.sqrt(0.012)
    product = 1.0
    for i in range(300):
        beta = (root_start + (root_end - root_start) * i / 299) ** 2
        product *= 1.0 - beta
    assert abs(float(s.alpha_bar(300)) - product) < 1e-14


def test_alpha_bar_strictly_decreasing(sched):
    ab = torch.stack([sched.alpha_bar(t) for t in range(301)])
    assert bool((ab[1:] < ab[:-1]).all())
    assert float(ab[-1]) > 0.0


@pytest.mark.parametrize("kind", ["linear", "scaled_linear"])
def test_signal_and_noise_coefficients_sum_to_one(kind):
    s = build_schedule(300, 0.00085, 0.012, kind)
    ab = torch.stack([s.alpha_bar(t) for t in range(301)])
    total = torch.sqrt(ab) ** 2 + torch.sqrt(1.0 - ab) ** 2
    assert float((total - 1.0).abs().max()) <= 4 * torch.finfo(torch.float64).eps


def test_schedule_rejects_bad_config():
    with pytest.raises(ConfigurationError):
        build_schedule(300, 0.02, 0.01)
    with pytest.raises(ConfigurationError):
        build_schedule(0)
    with pytest.raises(ConfigurationError):
        build_schedule(10, kind="cosine")


def test_forward_sample_limits(sched):
    z0 = torch.randn(2, 4, 3, 3)
    eps = torch.randn(2, 4, 3, 3)
    ab = float(sched.alpha_bar(120))
    assert torch.allclose(forward_sample(z0, 120, torch.zeros_like(z0), sched), math.sqrt(ab) * z0, atol=1e-15)
    assert torch.allclose(forward_sample(torch.zeros_like(z0), 120, eps, sched), math.sqrt(1 - ab) * eps,
                          atol=1e-15)


@pytest.mark.parametrize("t", [1, 150, 300])
def test_forward_sample_monte_carlo_moments(sched, t):
    n = 10000
    z0 = torch.full((n, 1), 0.7)
    eps = RngStream(0, "mc").normal((n, 1))
    z_t = forward_sample(z0, t, eps, sched)
    ab = float(sched.alpha_bar(t))
    sigma = math.sqrt(1 - ab)
    assert abs(float(z_t.mean()) - math.sqrt(ab) * 0.7) < 3 * sigma / math.sqrt(n)
    assert abs(float(z_t.var()) / (1 - ab) - 1.0) < 0.05


def test_variance_preservation(sched):
    z0 = RngStream(1, "z0").normal((10000,))
    eps = RngStream(1, "eps").normal((10000,))
    for t in (1, 50, 150, 300):
        var = float(forward_sample(z0, t, eps, sched).var())
        assert 0.95 <= var <= 1.05


def test_single_steps_compose_to_the_marginal(sched):
    n, t_end = 20000, 100
    z = torch.full((n, 1), 0.7)
    for t in range(1, t_end + 1):
        z = forward_step(z, t, RngStream(0, f"step-{t}").normal((n, 1)), sched)
    ab = float(sched.alpha_bar(t_end))
    assert abs(float(z.mean()) / (math.sqrt(ab) * 0.7) - 1.0) < 0.05
    assert abs(float(z.var()) / (1 - ab) - 1.0) < 0.05


def test_forward_step_matches_formula(sched):
    z, eps = torch.randn(3, 4), torch.randn(3, 4)
    beta = float(sched.beta(40))
    assert torch.allclose(forward_step(z, 40, eps, sched), math.sqrt(1 - beta) * z + math.sqrt(beta) * eps,
                          atol=1e-15)
    with pytest.raises(ScheduleIndexError):
        forward_step(z, 0, eps, sched)


def test_predict_z0_inverts_forward_sample(sched):
    z0 = torch.randn(3, 4, 2, 2)
    eps = torch.randn(3, 4, 2, 2)
    for t in range(1, 301):
        z_t = forward_sample(z0, t, eps, sched)
        assert float((predict_z0(z_t, t, eps, sched) - z0).abs().max()) <= 1e-10


def test_predict_z0_per_item_timesteps(sched):
    z0 = torch.randn(3, 4, 2, 2)
    eps = torch.randn(3, 4, 2, 2)
    t = torch.tensor([1, 150, 300])
    z_t = forward_sample(z0, t, eps, sched)
    for i, ti in enumerate(t.tolist()):
        ab = float(sched.alpha_bar(ti))
        assert torch.allclose(z_t[i], math.sqrt(ab) * z0[i] + math.sqrt(1 - ab) * eps[i], atol=1e-14)
    assert torch.allclose(predict_z0(z_t, t, eps, sched), z0, atol=1e-10)


def test_predict_z0_with_zero_noise(sched):
    z_t = torch.randn(2, 4)
    assert torch.allclose(predict_z0(z_t, 40, torch.zeros_like(z_t), sched),
                          z_t / math.sqrt(float(sched.alpha_bar(40))), atol=1e-14)


def test_out_of_range_timesteps(sched):
    z = torch.zeros(1, 4)
    with pytest.raises(ScheduleIndexError):
        forward_sample(z, 0, z, sched)
    with pytest.raises(ScheduleIndexError):
        predict_z0(z, 301, z, sched)
    with pytest.raises(ScheduleIndexError):
        ddim_step(z, 10, 10, z, sched)
    with pytest.raises(ScheduleIndexError):
        forward_sample(z, 5, torch.zeros(1, 5), sched)


def test_ddpm_step_at_one_is_deterministic(sched):
    z = torch.randn(2, 4)
    eps_hat = torch.randn(2, 4)
    a = ddpm_step(z, 1, eps_hat, sched, rng=RngStream(0, "a"))
    b = ddpm_step(z, 1, eps_hat, sched, rng=RngStream(9, "b"))
    assert torch.equal(a, b)


def test_ddpm_step_without_noise(sched):
    z = torch.randn(2, 4)
    out = ddpm_step(z, 77, torch.zeros_like(z), sched, noise=torch.zeros_like(z))
    assert torch.allclose(out, z / math.sqrt(float(sched.alpha(77))), atol=1e-14)


def test_ddpm_step_matches_formula(sched):
    z = torch.randn(3, 4)
    eps_hat = torch.randn(3, 4)
    xi = torch.randn(3, 4)
    t = 200
    beta = 0.00085 + (0.012 - 0.00085) * (t - 1) / 299
    ab_t = math.prod(1 - (0.00085 + (0.012 - 0.00085) * i / 299) for i in range(t))
    ab_prev = ab_t / (1 - beta)
    mean = (z - beta / math.sqrt(1 - ab_t) * eps_hat) / math.sqrt(1 - beta)
    var = (1 - ab_prev) / (1 - ab_t) * beta
    expected = mean + math.sqrt(var) * xi
    assert abs(posterior_variance(t, sched) - var) < 1e-12
    assert torch.allclose(ddpm_step(z, t, eps_hat, sched, noise=xi), expected, atol=1e-12)


def test_ddpm_step_needs_a_noise_source(sched):
    with pytest.raises(ConfigurationError):
        ddpm_step(torch.zeros(1, 2), 5, torch.zeros(1, 2), sched)


def test_ddim_single_jump_recovers_z0(sched):
    z0 = torch.randn(2, 4, 2, 2)
    eps = torch.randn(2, 4, 2, 2)
    for t in (1, 100, 300):
        z_t = forward_sample(z0, t, eps, sched)
        assert float((ddim_step(z_t, t, 0, eps, sched) - z0).abs().max()) <= 1e-10


def test_ddim_step_with_zero_noise(sched):
    z = torch.randn(2, 4)
    ratio = math.sqrt(float(sched.alpha_bar(20)) / float(sched.alpha_bar(80)))
    assert torch.allclose(ddim_step(z, 80, 20, torch.zeros_like(z), sched), ratio * z, atol=1e-14)


def test_ddim_timesteps():
    assert ddim_timesteps(300, 50) == list(range(300, 0, -6))
    assert ddim_timesteps(10, 3) == [10, 6, 2]
    assert ddim_timesteps(300, 300) == list(range(300, 0, -1))
    with pytest.raises(ConfigurationError):
        ddim_timesteps(300, 301)
    with pytest.raises(ConfigurationError):
        ddim_timesteps(300, 0)


@pytest.mark.parametrize("T, steps", [(300, 200), (300, 151), (300, 7), (10, 4), (20, 20), (1, 1)])
def test_ddim_timesteps_have_the_requested_length(T, steps):
    ts = ddim_timesteps(T, steps)
    assert len(ts) == steps
    assert ts[0] == T and ts[-1] >= 1
    assert len({a - b for a, b in zip(ts, ts[1:])}) <= 1


def test_ddim_timesteps_fall_back_to_a_smaller_stride():
    assert ddim_timesteps(300, 200) == list(range(300, 100, -1))


def test_per_window_noise_ignores_batch_layout():
    streams = [RngStream(5, f"window-{b}") for b in range(3)]
    batch = draw_normal(streams, (3, 4, 2))
    for b in range(3):
        assert torch.equal(batch[b], RngStream(5, f"window-{b}").normal((4, 2)))
    with pytest.raises(ConfigurationError):
        draw_normal(streams, (2, 4, 2))


@pytest.mark.parametrize("sampler", ["ddim", "ddpm"])
def test_sample_loop_rows_follow_their_own_streams(sampler):
    small = build_schedule(20, 0.001, 0.02, "linear")
    eps_model = lambda z, t, cond: 0.3 * z
    whole = sample_loop((3, 4), None, eps_model, small, sampler, steps=5,
                        rng=[RngStream(2, f"window-{b}") for b in range(3)])
    for b in range(3):
        alone = sample_loop((1, 4), None, eps_model, small, sampler, steps=5,
                            rng=[RngStream(2, f"window-{b}")])
        assert torch.allclose(whole[b], alone[0], rtol=0.0, atol=1e-14)


def _perfect_eps(z0, sched):
    def eps_model(z_t, t, cond):
        ab = sched.alpha_bar(t).reshape(-1, *([1] * (z_t.dim() - 1)))
        return (z_t - torch.sqrt(ab) * z0) / torch.sqrt(1 - ab)
    return eps_model


def test_ddim_loop_with_perfect_noise_collapses_to_z0(sched):
    z0 = torch.randn(2, 4, 2, 2)
    visited = []

    def record(t, z_t, eps_hat):
        visited.append(t)

    out = sample_loop(z0.shape, None, _perfect_eps(z0, sched), sched, "ddim", steps=300,
                      rng=RngStream(0, "sample"), callback=record)
    assert visited == list(range(300, 0, -1))
    assert float((out - z0).abs().max()) <= 1e-9


def test_ddim_loop_is_bit_identical_across_runs(sched):
    eps_model = lambda z, t, cond: 0.1 * z + 0.01 * cond
    cond = torch.randn(3, 4)

    def run():
        return sample_loop((3, 4), cond, eps_model, sched, "ddim", steps=50, rng=RngStream(5, "sample"))

    assert torch.equal(run(), run())


def test_ddpm_loop_is_reproducible_and_finite():
    small = build_schedule(20, 0.001, 0.02, "linear")
    eps_model = lambda z, t, cond: 0.5 * z
    a = sample_loop((2, 3), None, eps_model, small, "ddpm", rng=RngStream(1, "ddpm"))
    b = sample_loop((2, 3), None, eps_model, small, "ddpm", rng=RngStream(1, "ddpm"))
    assert torch.equal(a, b)
    assert torch.isfinite(a).all()


def test_sample_loop_rejects_unknown_sampler(sched):
    with pytest.raises(ConfigurationError):
        sample_loop((1, 2), None, lambda z, t, c: z, sched, "euler", rng=RngStream(0, "x"))


def test_loss_is_zero_for_perfect_noise_prediction(sched):
    z0 = torch.randn(4, 4, 2, 2)
    terms = diffusion_terms(z0, None, _perfect_eps(z0, sched), sched, RngStream(0, "loss"))
    assert float(terms.loss) < 1e-20
    assert int(terms.t.min()) >= 1 and int(terms.t.max()) <= 300


def test_loss_with_constant_offset_is_one(sched):
    z0 = torch.randn(4, 4, 2, 2)
    offset = _perfect_eps(z0, sched)
    loss = diffusion_loss(z0, None, lambda z, t, c: offset(z, t, c) + 1.0, sched, RngStream(0, "loss"))
    assert abs(float(loss) - 1.0) < 1e-10


def test_loss_gradient_matches_finite_differences(sched):
    torch.manual_seed(0)
    W = torch.randn(4, 4, requires_grad=True)
    z0 = torch.randn(6, 4)
    eps_model = lambda z, t, cond: z @ W
    fn = lambda: diffusion_loss(z0, None, eps_model, sched, RngStream(3, "loss"))
    assert finite_difference_check(fn, [W]) < 1e-4


def test_calibrate_scale_examples():
    latents = RngStream(0, "lat").normal((5000, 4))
    base = latents / latents.std(unbiased=False)
    assert abs(calibrate_scale(2.0 * base) - 0.5) < 1e-12
    assert abs(calibrate_scale(base) - 1.0) < 1e-12


def test_calibrate_scale_errors():
    with pytest.raises(CalibrationError):
        calibrate_scale(torch.ones(1, 4))
    with pytest.raises(CalibrationError):
        calibrate_scale(torch.ones(5, 4))
