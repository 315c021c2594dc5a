import numpy as np
import pytest

from scoredrive import diffusion
from toys import GaussianDenoiser, PointMassDenoiser, BimodalDenoiser


class TestSchedule:
    def test_identities_on_grid(self):
        sched = diffusion.CosineSchedule()
        t = np.linspace(0.0, 1.0, 1000)
        a, s = sched.alpha(t), sched.sigma(t)
        assert abs(a[0] - 1.0) <= 1e-12 and abs(s[0]) <= 1e-12
        assert abs(a[-1]) <= 1e-12 and abs(s[-1] - 1.0) <= 1e-12
        assert np.max(np.abs(a * a + s * s - 1.0)) <= 1e-12
        assert np.all(np.diff(a) < 0.0)
        assert np.all(np.diff(s) > 0.0)

    def test_rejects_out_of_range(self):
        sched = diffusion.CosineSchedule()
        with pytest.raises(ValueError):
            sched.alpha(1.2)
        with pytest.raises(ValueError):
            sched.sigma(-0.1)


class TestNoiseSample:
    def test_endpoints(self, rng):
        x0 = rng.normal(size=5)
        eps = rng.normal(size=5)
        assert np.allclose(diffusion.noise_sample(x0, 0.0, eps), x0)
        assert np.allclose(diffusion.noise_sample(x0, 1.0, eps), eps, atol=1e-15)

    def test_rejects_bad_time(self, rng):
        with pytest.raises(ValueError):
            diffusion.noise_sample(np.zeros(2), 1.5, np.zeros(2))

    def test_marginal_moments_match_closed_form(self, rng):
        # x0 ~ N(m, s^2): x_t should be N(alpha m, alpha^2 s^2 + sigma^2)
        m, s, t = 1.3, 0.7, 0.4
        n = 100_000
        x0 = rng.normal(m, s, size=n)
        eps = rng.standard_normal(n)
        xt = diffusion.noise_sample(x0, t, eps)
        sched = diffusion.CosineSchedule()
        a, sg = float(sched.alpha(t)), float(sched.sigma(t))
        want_mean = a * m
        want_var = a * a * s * s + sg * sg
        se_mean = np.sqrt(want_var / n)
        se_var = want_var * np.sqrt(2.0 / n)
        assert abs(xt.mean() - want_mean) < 3 * se_mean
        assert abs(xt.var() - want_var) < 3 * se_var


class TestTrainDenoiser:
    def test_initial_loss_matches_zero_predictor(self, rng):
        data = rng.standard_normal((2000, 6))
        _, losses = diffusion.train_denoiser(
            None, data, (16, 16), steps=1, batch_size=1024, lr=1e-3, rng=rng
        )
        # zero-initialized output layer: first loss is E||eps||^2 = action dim
        assert abs(losses[0] - 6.0) < 0.6

    def test_point_mass_closed_form_optimum(self, rng):
        a_star = 0.5
        data = np.full((512, 1), a_star)
        den, losses = diffusion.train_denoiser(
            None, data, (64, 64), steps=2500, batch_size=128, lr=1e-3, rng=rng
        )
        sched = den.schedule
        worst = 0.0
        for t in (0.2, 0.4, 0.6, 0.8):
            a, s = float(sched.alpha(t)), float(sched.sigma(t))
            # probe within the marginal of x_t = alpha a* + sigma eps
            for z in (-2.5, -1.5, 1.5, 2.5):
                x = a * a_star + s * z
                want = (x - a * a_star) / s  # equals z
                got = den.predict_eps(np.array([x]), None, t)[0]
                worst = max(worst, abs(got - want) / max(abs(want), 1e-9))
        assert worst <= 0.10

    def test_loss_beats_zero_predictor_on_held_out(self, rng):
        data = rng.standard_normal((4000, 3)) * np.array([1.0, 0.5, 2.0])
        den, _ = diffusion.train_denoiser(
            None, data[:3000], (64, 64), steps=1500, batch_size=128, lr=1e-3, rng=rng
        )
        held = diffusion.eps_loss(den, None, data[3000:], rng)
        assert held < 3.0  # strictly below the zero-predictor baseline (action dim)

    def test_rejects_empty_dataset(self, rng):
        with pytest.raises(ValueError):
            diffusion.train_denoiser(None, np.zeros((0, 2)), (8,), 10, 4, 1e-3, rng)


class TestScoreEstimate:
    def test_gaussian_behavior_score_is_minus_a(self):
        den = GaussianDenoiser()
        for a in (-1.5, -0.3, 0.8, 2.0):
            got = diffusion.score_estimate(den, np.array([a]), None, 0.02)[0]
            assert got == pytest.approx(-a, rel=0.01)

    def test_point_mass_score_points_at_target(self):
        den = PointMassDenoiser(np.array([0.7]))
        below = diffusion.score_estimate(den, np.array([0.2]), None, 0.05)[0]
        above = diffusion.score_estimate(den, np.array([1.2]), None, 0.05)[0]
        assert below > 0.0 and above < 0.0

    def test_bimodal_score_vanishes_at_midpoint(self):
        den = BimodalDenoiser()
        got = diffusion.score_estimate(den, np.array([0.0]), None, 0.05)[0]
        assert abs(got) < 1e-9

    def test_rejects_zero_time(self):
        with pytest.raises(ValueError):
            diffusion.score_estimate(GaussianDenoiser(), np.array([0.0]), None, 0.0)


class TestSampler:
    def test_point_mass_concentrates(self, rng):
        a_star = np.array([0.8, -0.4])
        den = PointMassDenoiser(a_star)
        for _ in range(5):
            out = diffusion.ddpm_sample(den, None, rng, action_dim=2, n_steps=20)
            assert np.linalg.norm(out - a_star) < 0.1

    def test_two_seeds_differ(self):
        den = GaussianDenoiser()
        a = diffusion.ddpm_sample(den, None, np.random.default_rng(1), action_dim=1)
        b = diffusion.ddpm_sample(den, None, np.random.default_rng(2), action_dim=1)
        assert a != b

    def test_output_always_inside_box(self, rng):
        den = GaussianDenoiser()
        for _ in range(50):
            out = diffusion.ddpm_sample(den, None, rng, action_dim=1, n_steps=8, box=1.5)
            assert np.all(np.abs(out) <= 1.5)
            assert np.all(np.isfinite(out))

    def test_gaussian_moments_at_fine_grid(self, rng):
        den = GaussianDenoiser()
        samples = np.array(
            [diffusion.ddpm_sample(den, None, rng, action_dim=1, n_steps=50)[0] for _ in range(3000)]
        )
        assert abs(samples.mean()) < 0.06
        assert 0.85 <= samples.var() <= 1.15

    def test_rejects_zero_steps(self, rng):
        with pytest.raises(ValueError):
            diffusion.ddpm_sample(GaussianDenoiser(), None, rng, action_dim=1, n_steps=0)
