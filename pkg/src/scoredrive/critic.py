"""Stage 2: expectile value function, twin TD Q-functions, AWR pretraining.

The value net regresses the tau-expectile of min(Q_target1, Q_target2) over
dataset actions, the Q nets regress the one-step target
``r + gamma (1 - done) V(s')``, and the policy is pretrained by behavior
cloning weighted with ``exp(beta_awr * (min Q - V))`` clamped at a maximum
weight. Target Q copies track the online nets by Polyak averaging.

Each step touches exactly one parameter set: value steps update only the
value net, Q steps only the Q nets and their targets, AWR steps only the
policy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nets
from .config import CriticConfig


def expectile_loss(u, tau: float):
    """Asymmetric squared loss |tau - 1[u < 0]| * u^2."""
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    u = np.asarray(u, dtype=np.float64)
    w = np.where(u < 0.0, 1.0 - tau, tau)
    return w * u * u


@dataclass
class CriticBundle:
    """Value net, twin Q nets, and Polyak-averaged target copies."""

    v_spec: nets.NetworkSpec
    v_params: np.ndarray
    q_spec: nets.NetworkSpec
    q1_params: np.ndarray
    q2_params: np.ndarray
    q1_target: np.ndarray
    q2_target: np.ndarray
    polyak: float = 0.005

    @classmethod
    def create(cls, state_dim: int, action_dim: int, hidden, rng, polyak: float = 0.005):
        v_spec = nets.NetworkSpec(input_dim=state_dim, hidden=tuple(hidden), output_dim=1)
        q_spec = nets.NetworkSpec(
            input_dim=state_dim + action_dim, hidden=tuple(hidden), output_dim=1
        )
        v_params = nets.init_params(v_spec, rng)
        q1 = nets.init_params(q_spec, rng)
        q2 = nets.init_params(q_spec, rng)
        return cls(
            v_spec=v_spec,
            v_params=v_params,
            q_spec=q_spec,
            q1_params=q1,
            q2_params=q2,
            q1_target=q1.copy(),
            q2_target=q2.copy(),
            polyak=polyak,
        )

    def value(self, states: np.ndarray) -> np.ndarray:
        return nets.forward_batch(self.v_spec, self.v_params, np.atleast_2d(states))[:, 0]

    def _q(self, params, states, actions) -> np.ndarray:
        x = np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=1)
        return nets.forward_batch(self.q_spec, params, x)[:, 0]

    def q_online(self, states, actions) -> tuple[np.ndarray, np.ndarray]:
        return self._q(self.q1_params, states, actions), self._q(self.q2_params, states, actions)

    def min_q_online(self, states, actions) -> np.ndarray:
        q1, q2 = self.q_online(states, actions)
        return np.minimum(q1, q2)

    def min_q_target(self, states, actions) -> np.ndarray:
        return np.minimum(
            self._q(self.q1_target, states, actions),
            self._q(self.q2_target, states, actions),
        )

    def action_grad_min_q(self, states, actions) -> np.ndarray:
        """d(min Q)/d(action), using the online nets, per sample."""
        states = np.atleast_2d(states)
        actions = np.atleast_2d(actions)
        x = np.concatenate([states, actions], axis=1)
        ones = np.ones((x.shape[0], 1))
        out1, acts1 = nets.forward_acts_batch(self.q_spec, self.q1_params, x)
        out2, acts2 = nets.forward_acts_batch(self.q_spec, self.q2_params, x)
        _, gx1 = nets.vjp_from_acts(self.q_spec, self.q1_params, acts1, ones)
        _, gx2 = nets.vjp_from_acts(self.q_spec, self.q2_params, acts2, ones)
        pick1 = (out1[:, 0] <= out2[:, 0])[:, None]
        gx = np.where(pick1, gx1, gx2)
        return gx[:, states.shape[1] :]

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for p in (self.v_params, self.q1_params, self.q2_params, self.q1_target, self.q2_target):
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()


@dataclass
class CriticOptimizers:
    value: nets.AdamState
    q1: nets.AdamState
    q2: nets.AdamState

    @classmethod
    def create(cls, bundle: CriticBundle, cfg: CriticConfig):
        return cls(
            value=nets.AdamState.for_params(bundle.v_params, cfg.value_lr),
            q1=nets.AdamState.for_params(bundle.q1_params, cfg.q_lr),
            q2=nets.AdamState.for_params(bundle.q2_params, cfg.q_lr),
        )


def value_step(bundle: CriticBundle, opt: nets.AdamState, states, q_values, tau: float) -> float:
    """One expectile-regression step of V toward the given Q values."""
    states = np.atleast_2d(states)
    q_values = np.asarray(q_values, dtype=np.float64)
    out, acts = nets.forward_acts_batch(bundle.v_spec, bundle.v_params, states)
    u = q_values - out[:, 0]
    loss = float(np.mean(expectile_loss(u, tau)))
    if not np.isfinite(loss):
        opt.skipped += 1
        return loss
    w = np.where(u < 0.0, 1.0 - tau, tau)
    upstream = (-2.0 * w * u / states.shape[0])[:, None]
    grad, _ = nets.vjp_from_acts(bundle.v_spec, bundle.v_params, acts, upstream)
    bundle.v_params = nets.adam_step(opt, bundle.v_params, grad)
    return loss


def train_value_step(bundle: CriticBundle, opt, batch: dict, tau: float) -> float:
    """Expectile step with targets min(Q_target1, Q_target2)(s, a), detached."""
    q = bundle.min_q_target(batch["states"], batch["actions"])
    return value_step(bundle, opt, batch["states"], q, tau)


def train_q_step(bundle: CriticBundle, opt_q1, opt_q2, batch: dict, gamma: float) -> float:
    """TD regression of both Q nets toward r + gamma (1-done) V(s')."""
    states = batch["states"]
    actions = batch["actions"]
    y = batch["rewards"] + gamma * (~batch["dones"]) * bundle.value(batch["next_states"])
    x = np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=1)
    n = x.shape[0]
    total = 0.0
    for params_name, opt in (("q1_params", opt_q1), ("q2_params", opt_q2)):
        params = getattr(bundle, params_name)
        out, acts = nets.forward_acts_batch(bundle.q_spec, params, x)
        resid = out[:, 0] - y
        loss = float(np.mean(resid * resid))
        total += loss
        if not np.isfinite(loss):
            opt.skipped += 1
            continue
        grad, _ = nets.vjp_from_acts(
            bundle.q_spec, params, acts, (2.0 * resid / n)[:, None]
        )
        setattr(bundle, params_name, nets.adam_step(opt, params, grad))
    rho = bundle.polyak
    bundle.q1_target = (1.0 - rho) * bundle.q1_target + rho * bundle.q1_params
    bundle.q2_target = (1.0 - rho) * bundle.q2_target + rho * bundle.q2_params
    return total / 2.0


def awr_weights(bundle: CriticBundle, states, actions, beta: float, clip: float) -> np.ndarray:
    """exp(beta * advantage) weights, clamped; detached from all nets."""
    adv = bundle.min_q_target(states, actions) - bundle.value(states)
    return np.clip(np.exp(beta * adv), 0.0, clip)


def weighted_regression_step(policy, opt: nets.AdamState, states, actions, weights) -> float:
    """One minimization step of mean w * ||a - pi(s)||^2 on the policy."""
    states = np.atleast_2d(states)
    actions = np.atleast_2d(actions)
    weights = np.asarray(weights, dtype=np.float64)
    out, acts = nets.forward_acts_batch(policy.spec, policy.params, states)
    resid = out - actions
    loss = float(np.mean(weights * np.sum(resid * resid, axis=1)))
    if not np.isfinite(loss):
        opt.skipped += 1
        return loss
    upstream = 2.0 * weights[:, None] * resid / states.shape[0]
    grad, _ = nets.vjp_from_acts(policy.spec, policy.params, acts, upstream)
    policy.params = nets.adam_step(opt, policy.params, grad)
    return loss


def awr_pretrain_step(policy, opt, bundle: CriticBundle, batch: dict, cfg: CriticConfig) -> float:
    """Advantage-weighted behavior cloning step on the policy."""
    w = awr_weights(
        bundle, batch["states"], batch["actions"], cfg.awr_temperature, cfg.awr_weight_clip
    )
    return weighted_regression_step(policy, opt, batch["states"], batch["actions"], w)


def train_critic(dataset, policy, cfg: CriticConfig, rng: np.random.Generator,
                 hidden=(128, 128)):
    """Run the joint value / Q / AWR training loop over the replay buffer.

    Mutates ``policy`` in place (it becomes the AWR-pretrained
    initialization) and returns the trained bundle plus per-step losses.
    """
    from .dataset import sample_batch

    bundle = CriticBundle.create(
        dataset.states.shape[1], dataset.actions.shape[1],
        hidden, rng, polyak=cfg.polyak,
    )
    opts = CriticOptimizers.create(bundle, cfg)
    opt_pi = nets.AdamState.for_params(policy.params, cfg.awr_lr)
    decay_at = (int(cfg.train_steps * 0.6), int(cfg.train_steps * 0.85))
    logs = []
    for step in range(cfg.train_steps):
        if step == decay_at[0]:
            opt_pi.lr = cfg.awr_lr * 0.3
        elif step == decay_at[1]:
            opt_pi.lr = cfg.awr_lr * 0.1
        batch = sample_batch(dataset, cfg.batch_size, rng)
        v_loss = train_value_step(bundle, opts.value, batch, cfg.expectile)
        q_loss = train_q_step(bundle, opts.q1, opts.q2, batch, cfg.discount)
        pi_loss = awr_pretrain_step(policy, opt_pi, bundle, batch, cfg)
        logs.append((step, v_loss, q_loss, pi_loss))
    return bundle, logs
