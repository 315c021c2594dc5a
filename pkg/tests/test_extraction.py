import numpy as np
import pytest

from scoredrive import critic as critic_mod
from scoredrive import extraction, nets
from scoredrive.config import ExperimentConfig, SrpoConfig
from toys import (
    BimodalDenoiser,
    GaussianDenoiser,
    LinearCritic,
    PointMassDenoiser,
    QuadraticCritic,
    ZeroCritic,
)


def toy_hyper(**kw):
    defaults = dict(temperature=0.05, policy_lr=3e-3, train_steps=0, batch_size=16)
    defaults.update(kw)
    return SrpoConfig(**defaults)


def run_srpo(policy, critic, prior, hyper, rng, steps, n_states=16, state_dim=1):
    opt = nets.AdamState.for_params(policy.params, hyper.policy_lr)
    states = np.zeros((n_states, state_dim))
    diag = None
    for _ in range(steps):
        diag = extraction.srpo_step(policy, critic, prior, states, hyper, opt, rng)
    return diag


class TestSrpoToys:
    def test_pure_q_ascent_finds_quadratic_peak(self, rng):
        policy = extraction.PolicyNet.create(1, 1, (32, 32), 4.0, rng)
        hyper = toy_hyper(temperature=1e9, policy_lr=1e-2)
        run_srpo(policy, QuadraticCritic(0.7), GaussianDenoiser(), hyper, rng, 1500)
        assert policy.act(np.zeros(1))[0] == pytest.approx(0.7, abs=0.01)

    def test_pure_score_collapses_onto_point_mass(self, rng):
        policy = extraction.PolicyNet.create(1, 1, (32, 32), 4.0, rng)
        hyper = toy_hyper(policy_lr=1e-2)
        run_srpo(policy, ZeroCritic(), PointMassDenoiser(np.array([1.3])), hyper, rng, 2000)
        assert policy.act(np.zeros(1))[0] == pytest.approx(1.3, abs=0.05)

    def test_mode_seeking_beats_mode_covering(self, rng):
        # bimodal behavior at +-1 with Q(a) = a at matched temperature:
        # weighted regression interpolates near tanh(beta); the score-
        # regularized ascent climbs onto the favored mode
        beta = 0.05
        states = np.zeros((16, 1))
        awr_actions = np.array([[1.0], [-1.0]] * 8)
        weights = np.clip(np.exp(beta * awr_actions[:, 0]), 0, 100)
        policy = extraction.PolicyNet.create(1, 1, (64, 64), 4.0, rng)
        opt = nets.AdamState.for_params(policy.params, 1e-2)
        for _ in range(1200):
            critic_mod.weighted_regression_step(policy, opt, states, awr_actions, weights)
        awr_pi = policy.act(np.zeros(1))[0]
        assert -0.5 < awr_pi < 0.5

        srpo_policy = policy.clone()
        hyper = toy_hyper(temperature=beta)
        run_srpo(srpo_policy, LinearCritic(), BimodalDenoiser(), hyper, rng, 2500)
        assert srpo_policy.act(np.zeros(1))[0] > 0.8

    def test_distance_to_mode_shrinks_with_temperature(self, rng):
        # stronger regularization (smaller beta) pulls the converged policy
        # closer to the behavior mode, on the reward-dominated side
        dists = []
        for beta in (2.0, 0.5, 0.2):
            policy = extraction.PolicyNet.create(1, 1, (64, 64), 4.0, rng)
            opt = nets.AdamState.for_params(policy.params, 1e-2)
            for _ in range(600):
                critic_mod.weighted_regression_step(
                    policy, opt, np.zeros((4, 1)), np.full((4, 1), 0.3), np.ones(4)
                )
            run_srpo(policy, LinearCritic(), BimodalDenoiser(), toy_hyper(temperature=beta), rng, 3000)
            pi = policy.act(np.zeros(1))[0]
            dists.append(min(abs(pi - 1.0), abs(pi + 1.0)))
        assert dists[0] >= dists[1] >= dists[2]


class TestSrpoMechanics:
    def test_param_gradient_matches_finite_differences(self, rng):
        # with the score term disabled the step gradient is the exact
        # gradient of mean min-Q(s, pi(s))
        state_dim, action_dim = 3, 2
        policy = extraction.PolicyNet.create(state_dim, action_dim, (6, 5), 2.0, rng)
        bundle = critic_mod.CriticBundle.create(state_dim, action_dim, (8,), rng)
        states = rng.normal(size=(4, state_dim))
        hyper = toy_hyper()
        grad, _ = extraction.srpo_param_gradient(
            policy, bundle, GaussianDenoiser(), states, hyper, rng, include_score=False
        )

        def objective(params):
            probe = extraction.PolicyNet(spec=policy.spec, params=params)
            acts = probe.act_batch(states)
            return float(np.mean(bundle.min_q_online(states, acts)))

        h = 1e-5
        fd = np.zeros_like(policy.params)
        for i in range(len(policy.params)):
            p = policy.params.copy()
            p[i] += h
            f1 = objective(p)
            p[i] -= 2 * h
            f0 = objective(p)
            fd[i] = (f1 - f0) / (2 * h)
        scale = np.maximum(np.abs(fd), 1e-6)
        assert float(np.max(np.abs(grad - fd) / scale)) <= 1e-4

    def test_score_term_unbiased_in_sample_count(self, rng):
        # K-averaged estimates agree across K within Monte-Carlo error
        policy = extraction.PolicyNet.create(1, 1, (16,), 2.0, rng)
        prior = BimodalDenoiser()
        states = np.full((1, 1), 0.0)

        def score_term(k, reps):
            vals = []
            for _ in range(reps):
                _, _, upstream, _ = extraction.srpo_action_direction(
                    policy, ZeroCritic(), prior, states,
                    toy_hyper(score_samples=k), rng,
                )
                vals.append(upstream[0, 0])
            return np.array(vals)

        small = score_term(256, 48)
        big = score_term(4096, 8)
        se = np.sqrt(small.var() / len(small) + big.var() / len(big))
        assert abs(small.mean() - big.mean()) <= 3 * se + 1e-12

    def test_prior_and_critic_frozen(self, rng):
        policy = extraction.PolicyNet.create(2, 1, (8,), 2.0, rng)
        bundle = critic_mod.CriticBundle.create(2, 1, (8,), rng)

        class TrainedPrior(GaussianDenoiser):
            def __init__(self):
                self.params = rng.normal(size=10)

            def digest(self):
                return nets.params_digest(self.params)

        prior = TrainedPrior()
        before_prior = prior.digest()
        before_critic = bundle.digest()
        opt = nets.AdamState.for_params(policy.params, 1e-3)
        for _ in range(20):
            extraction.srpo_step(policy, bundle, prior, rng.normal(size=(4, 2)),
                                 toy_hyper(), opt, rng)
        assert prior.digest() == before_prior
        assert bundle.digest() == before_critic

    def test_nonfinite_upstream_dropped_and_counted(self, rng):
        policy = extraction.PolicyNet.create(1, 1, (8,), 2.0, rng)

        class NanPrior(GaussianDenoiser):
            def predict_eps(self, a_t, s_enc, t):
                out = super().predict_eps(a_t, s_enc, t)
                out = np.atleast_2d(out).copy()
                out[0] = np.nan
                return out

        _, _, upstream, diag = extraction.srpo_action_direction(
            policy, ZeroCritic(), NanPrior(), np.zeros((3, 1)), toy_hyper(), rng
        )
        assert diag.dropped == 1
        assert np.all(np.isfinite(upstream))


class TestExtractPolicy:
    def make_dataset(self, rng, n=64):
        from scoredrive.world import FeatureNormalizer
        from scoredrive.dataset import ReplayDataset

        states = rng.normal(size=(n, 2))
        actions = rng.normal(size=(n, 1))
        return ReplayDataset(
            states=states,
            actions=actions,
            rewards=rng.uniform(size=n),
            next_states=rng.normal(size=(n, 2)),
            dones=np.zeros(n, dtype=bool),
            kind_ids=np.zeros(n, dtype=np.uint8),
            seeds=np.zeros(n, dtype=np.uint32),
            step_idx=np.zeros(n, dtype=np.uint16),
            normalizer=FeatureNormalizer(
                np.zeros(2), np.ones(2), np.zeros(1), np.ones(1)
            ),
            world_hash="w",
            config_hash="c",
        )

    def test_zero_steps_returns_theta_init(self, rng):
        ds = self.make_dataset(rng)
        theta = extraction.PolicyNet.create(2, 1, (8,), 2.0, rng)
        theta.params = rng.normal(size=theta.params.shape)
        bundle = critic_mod.CriticBundle.create(2, 1, (8,), rng)
        out, _ = extraction.extract_policy(
            ds, bundle, GaussianDenoiser(), theta, toy_hyper(train_steps=0), rng
        )
        assert np.array_equal(out.params, theta.params)
        assert out.params is not theta.params

    def test_deterministic_given_seed(self, rng):
        ds = self.make_dataset(rng)
        theta = extraction.PolicyNet.create(2, 1, (8,), 2.0, rng)
        bundle = critic_mod.CriticBundle.create(2, 1, (8,), rng)
        hyper = toy_hyper(train_steps=25)
        from scoredrive.config import rng_stream

        a, _ = extraction.extract_policy(ds, bundle, GaussianDenoiser(), theta, hyper,
                                         rng_stream(7, "x"))
        b, _ = extraction.extract_policy(ds, bundle, GaussianDenoiser(), theta, hyper,
                                         rng_stream(7, "x"))
        assert a.params.tobytes() == b.params.tobytes()


class TestPlan:
    def setup_planner(self, rng):
        from scoredrive import world

        cfg = ExperimentConfig()
        scenario = world.generate_scenario(3, "lane_follow", cfg.world)
        policy = extraction.PolicyNet.create(
            cfg.world.state_dim, 3 * cfg.world.horizon, (16, 16), 4.0, rng
        )
        policy.params = rng.normal(size=policy.params.shape) * 0.05
        d = cfg.world.state_dim
        a = 3 * cfg.world.horizon
        normalizer = world.FeatureNormalizer(
            np.zeros(d), np.ones(d), np.zeros(a), np.ones(a)
        )
        return cfg, scenario, policy, normalizer

    def test_deterministic_plans(self, rng):
        cfg, scenario, policy, normalizer = self.setup_planner(rng)
        a = extraction.plan(policy, scenario.scene, cfg.world, normalizer)
        b = extraction.plan(policy, scenario.scene, cfg.world, normalizer)
        assert np.array_equal(a.poses, b.poses)

    def test_output_respects_action_box(self, rng):
        cfg, scenario, policy, normalizer = self.setup_planner(rng)
        traj = extraction.plan(policy, scenario.scene, cfg.world, normalizer)
        from scoredrive.world import poses_to_action

        z = normalizer.norm_action(
            poses_to_action(traj.poses, scenario.scene.centerline, scenario.scene.ego.pose)
        )
        assert np.all(np.abs(z) <= policy.spec.output_scale + 1e-6)
