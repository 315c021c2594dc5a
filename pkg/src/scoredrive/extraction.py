"""Stage 3: deterministic policy extraction with a frozen diffusion prior.

Each step ascends the surrogate objective whose action-space direction is::

    g = grad_a min(Q1, Q2)(s, a)|_{a = pi(s)}
        - (1 / beta) E_{t, eps} [ omega(t) (eps_net(a_t | s, t) - eps) ],
        a_t = alpha_t pi(s) + sigma_t eps

back-propagated through the policy network only. The critic supplies the
reward direction; the prior's noise residual pulls actions toward
high-density behavior regions, which makes the update mode-seeking instead
of mode-covering. The prior and the critic are bit-frozen throughout
(asserted by parameter digests).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nets
from .config import SrpoConfig, WorldConfig
from .world import FeatureNormalizer, SceneContext, Trajectory, action_to_poses, encode_state


def omega(t):
    """Score-sample weighting over diffusion time; uniform by design."""
    return np.ones_like(np.asarray(t, dtype=np.float64))


@dataclass
class PolicyNet:
    """Deterministic state -> action map bounded to the normalized action box."""

    spec: nets.NetworkSpec
    params: np.ndarray

    @classmethod
    def create(cls, state_dim: int, action_dim: int, hidden, box: float, rng) -> "PolicyNet":
        spec = nets.NetworkSpec(
            input_dim=state_dim,
            hidden=tuple(hidden),
            output_dim=action_dim,
            output_activation="tanh",
            output_scale=box,
        )
        return cls(spec=spec, params=nets.init_params(spec, rng, zero_output_layer=True))

    def act(self, state: np.ndarray) -> np.ndarray:
        return nets.forward(self.spec, self.params, state)

    def act_batch(self, states: np.ndarray) -> np.ndarray:
        return nets.forward_batch(self.spec, self.params, states)

    def clone(self) -> "PolicyNet":
        return PolicyNet(spec=self.spec, params=self.params.copy())

    def digest(self) -> str:
        return nets.params_digest(self.params)


@dataclass
class SrpoDiagnostics:
    q_grad_norm: float
    score_grad_norm: float
    dropped: int = 0


def srpo_action_direction(
    policy: PolicyNet,
    critic,
    prior,
    states: np.ndarray,
    hyper: SrpoConfig,
    rng: np.random.Generator,
    include_score: bool = True,
    include_q: bool = True,
):
    """Per-state ascent direction in action space, plus policy activations.

    Returns (actions, acts_cache, upstream, diagnostics).
    """
    states = np.atleast_2d(states)
    actions, acts = nets.forward_acts_batch(policy.spec, policy.params, states)
    n, adim = actions.shape

    g_q = np.zeros_like(actions)
    if include_q:
        g_q = critic.action_grad_min_q(states, actions)

    g_score = np.zeros_like(actions)
    if include_score:
        sched = prior.schedule
        for _ in range(hyper.score_samples):
            t = rng.uniform(hyper.t_lo, hyper.t_hi, size=n)
            eps = rng.standard_normal(actions.shape)
            a_t = sched.alpha(t)[:, None] * actions + sched.sigma(t)[:, None] * eps
            eps_hat = prior.predict_eps(a_t, states, t)
            g_score -= omega(t)[:, None] * (eps_hat - eps)
        g_score /= hyper.score_samples * hyper.temperature

    upstream = g_q + g_score
    bad = ~np.all(np.isfinite(upstream), axis=1)
    dropped = int(np.sum(bad))
    if dropped:
        upstream = np.where(bad[:, None], 0.0, upstream)
    diag = SrpoDiagnostics(
        q_grad_norm=float(np.mean(np.linalg.norm(g_q, axis=1))),
        score_grad_norm=float(np.mean(np.linalg.norm(g_score, axis=1))),
        dropped=dropped,
    )
    return actions, acts, upstream, diag


def srpo_param_gradient(
    policy, critic, prior, states, hyper, rng,
    include_score: bool = True, include_q: bool = True,
):
    """Parameter-space ascent gradient (mean over the batch of states)."""
    states = np.atleast_2d(states)
    _, acts, upstream, diag = srpo_action_direction(
        policy, critic, prior, states, hyper, rng, include_score, include_q
    )
    grad, _ = nets.vjp_from_acts(policy.spec, policy.params, acts, upstream)
    return grad / states.shape[0], diag


def srpo_step(
    policy: PolicyNet,
    critic,
    prior,
    states: np.ndarray,
    hyper: SrpoConfig,
    opt: nets.AdamState,
    rng: np.random.Generator,
) -> SrpoDiagnostics:
    """One ascent step on the policy; prior and critic stay bit-frozen."""
    prior_digest = prior.digest()
    critic_digest = critic.digest()
    grad, diag = srpo_param_gradient(policy, critic, prior, states, hyper, rng)
    policy.params = nets.adam_step(opt, policy.params, grad, direction="maximize")
    assert prior.digest() == prior_digest, "prior parameters changed during srpo_step"
    assert critic.digest() == critic_digest, "critic parameters changed during srpo_step"
    return diag


def extract_policy(
    dataset,
    critic,
    prior,
    theta_init: PolicyNet,
    hyper: SrpoConfig,
    rng: np.random.Generator,
):
    """Run the full extraction stage starting from the AWR initialization.

    Returns the trained policy and the per-step diagnostics rows
    (step, q-term norm, score-term norm, mean online min-Q of the policy).
    """
    from .dataset import sample_batch

    policy = theta_init.clone()
    opt = nets.AdamState.for_params(policy.params, hyper.policy_lr)
    rows = []
    for step in range(hyper.train_steps):
        batch = sample_batch(dataset, hyper.batch_size, rng)
        diag = srpo_step(policy, critic, prior, batch["states"], hyper, opt, rng)
        if step % 10 == 0 or step == hyper.train_steps - 1:
            q_pi = float(
                np.mean(critic.min_q_online(batch["states"], policy.act_batch(batch["states"])))
            )
            rows.append((step, diag.q_grad_norm, diag.score_grad_norm, q_pi))
    return policy, rows


def mean_policy_q(policy: PolicyNet, critic, states: np.ndarray) -> float:
    """Mean online min-Q of the policy's actions over the given states."""
    actions = policy.act_batch(np.atleast_2d(states))
    return float(np.mean(critic.min_q_online(states, actions)))


def plan(
    policy: PolicyNet,
    scene: SceneContext,
    cfg: WorldConfig,
    normalizer: FeatureNormalizer,
) -> Trajectory:
    """One deterministic forward pass from scene to world-frame trajectory."""
    enc = encode_state(scene, cfg, normalizer)
    z = policy.act(enc.features)
    action = normalizer.denorm_action(z)
    poses = action_to_poses(action, scene.centerline, scene.ego.pose)
    return Trajectory(poses=poses, dt=cfg.dt)
