"""Diffusion behavior prior: forward noising, noise-prediction training,
score estimation, and an iterative ancestral sampler.

The forward process is continuous-time variance preserving with the cosine
schedule alpha(t) = cos(pi t / 2), sigma(t) = sin(pi t / 2), so
``x_t = alpha(t) x_0 + sigma(t) eps``. The denoiser predicts eps from
``(x_t, state, t)`` and is trained on uniformly sampled t in (t_lo, t_hi).
The behavior score follows as ``-eps(x_t | s, t) / sigma(t)`` for small t.

Actions are normalized per-coordinate before diffusion; the sampler clamps
its running clean-data estimate to the normalized action box and
de-normalizes only at the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nets
from .world import FeatureNormalizer

N_TIME_FEATURES = 9  # sin/cos of 2*pi*k*t for k = 1..4, plus raw t


class CosineSchedule:
    """Variance-preserving pair (alpha, sigma) with alpha^2 + sigma^2 = 1."""

    name = "cosine"

    @staticmethod
    def _check(t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise ValueError("diffusion time must lie in [0, 1]")
        return t

    def alpha(self, t):
        return np.cos(0.5 * np.pi * self._check(t))

    def sigma(self, t):
        return np.sin(0.5 * np.pi * self._check(t))


def time_features(t) -> np.ndarray:
    """Sinusoidal embedding of diffusion time; accepts scalars or arrays."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    cols = [np.sin(2.0 * np.pi * k * t) for k in range(1, 5)]
    cols += [np.cos(2.0 * np.pi * k * t) for k in range(1, 5)]
    cols.append(t)
    out = np.stack(cols, axis=-1)
    return out


def noise_sample(x0, t, eps, schedule: CosineSchedule | None = None):
    """Forward-noise clean data to time t: alpha(t) x0 + sigma(t) eps."""
    schedule = schedule or CosineSchedule()
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError("x0 and eps must have matching shapes")
    a = schedule.alpha(t)
    s = schedule.sigma(t)
    return a * x0 + s * eps


@dataclass
class Denoiser:
    """Noise-prediction network over (noisy action, state encoding, time)."""

    spec: nets.NetworkSpec
    params: np.ndarray
    state_dim: int
    action_dim: int
    schedule: CosineSchedule

    @classmethod
    def create(cls, state_dim: int, action_dim: int, hidden, rng) -> "Denoiser":
        spec = nets.NetworkSpec(
            input_dim=action_dim + state_dim + N_TIME_FEATURES,
            hidden=tuple(hidden),
            output_dim=action_dim,
        )
        params = nets.init_params(spec, rng, zero_output_layer=True)
        return cls(
            spec=spec,
            params=params,
            state_dim=state_dim,
            action_dim=action_dim,
            schedule=CosineSchedule(),
        )

    def _assemble(self, a_t: np.ndarray, s_enc, t) -> np.ndarray:
        a_t = np.atleast_2d(np.asarray(a_t, dtype=np.float64))
        n = a_t.shape[0]
        tf = time_features(t)
        if tf.shape[0] == 1 and n > 1:
            tf = np.repeat(tf, n, axis=0)
        if self.state_dim:
            s = np.atleast_2d(np.asarray(s_enc, dtype=np.float64))
            if s.shape[0] == 1 and n > 1:
                s = np.repeat(s, n, axis=0)
            return np.concatenate([a_t, s, tf], axis=1)
        return np.concatenate([a_t, tf], axis=1)

    def predict_eps(self, a_t, s_enc, t) -> np.ndarray:
        """Predicted noise for noisy action(s) at diffusion time t."""
        x = self._assemble(a_t, s_enc, t)
        out = nets.forward_batch(self.spec, self.params, x)
        return out[0] if np.ndim(a_t) == 1 else out

    def digest(self) -> str:
        return nets.params_digest(self.params)


def train_denoiser(
    states: np.ndarray | None,
    actions: np.ndarray,
    hidden,
    steps: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
    t_lo: float = 0.02,
    t_hi: float = 0.98,
) -> tuple[Denoiser, list[float]]:
    """Fit the eps-prediction objective on (state, action) pairs.

    ``states`` may be None for unconditional toys. Returns the trained
    denoiser and the per-step loss series.
    """
    actions = np.asarray(actions, dtype=np.float64)
    if actions.ndim != 2 or actions.shape[0] == 0:
        raise ValueError("actions must be a non-empty (N, A) array")
    if states is not None:
        states = np.asarray(states, dtype=np.float64)
        if states.shape[0] != actions.shape[0]:
            raise ValueError("states and actions must align")
    state_dim = 0 if states is None else states.shape[1]
    action_dim = actions.shape[1]
    den = Denoiser.create(state_dim, action_dim, hidden, rng)
    opt = nets.AdamState.for_params(den.params, lr)
    sched = den.schedule
    n = actions.shape[0]
    losses: list[float] = []
    # stepped lr decay sharpens the small-t fit late in training
    decay_at = (int(steps * 0.5), int(steps * 0.75), int(steps * 0.9))
    for step in range(steps):
        if step == decay_at[0]:
            opt.lr = lr * 0.3
        elif step == decay_at[1]:
            opt.lr = lr * 0.1
        elif step == decay_at[2]:
            opt.lr = lr * 0.03
        idx = rng.integers(0, n, size=batch_size)
        x0 = actions[idx]
        t = rng.uniform(t_lo, t_hi, size=batch_size)
        eps = rng.standard_normal(x0.shape)
        a = sched.alpha(t)[:, None]
        s = sched.sigma(t)[:, None]
        x_t = a * x0 + s * eps
        inp = den._assemble(x_t, None if states is None else states[idx], t)
        pred, acts = nets.forward_acts_batch(den.spec, den.params, inp)
        resid = pred - eps
        loss = float(np.mean(np.sum(resid * resid, axis=1)))
        grad, _ = nets.vjp_from_acts(den.spec, den.params, acts, 2.0 * resid / batch_size)
        den.params = nets.adam_step(opt, den.params, grad)
        losses.append(loss)
    return den, losses


def eps_loss(den: Denoiser, states, actions, rng, n_times: int = 8,
             t_lo: float = 0.02, t_hi: float = 0.98) -> float:
    """Monte-Carlo eps-prediction loss over a held-out set."""
    actions = np.asarray(actions, dtype=np.float64)
    total = 0.0
    for _ in range(n_times):
        t = rng.uniform(t_lo, t_hi, size=actions.shape[0])
        eps = rng.standard_normal(actions.shape)
        a = den.schedule.alpha(t)[:, None]
        s = den.schedule.sigma(t)[:, None]
        pred = den.predict_eps(a * actions + s * eps, states, t)
        total += float(np.mean(np.sum((pred - eps) ** 2, axis=1)))
    return total / n_times


def score_estimate(den: Denoiser, action, s_enc, t_eval: float) -> np.ndarray:
    """Behavior-score diagnostic: -eps(alpha_t a | s, t) / sigma_t, small t."""
    if not 0.0 < t_eval <= 0.1:
        raise ValueError("t_eval must lie in (0, 0.1]")
    a = den.schedule.alpha(t_eval)
    s = den.schedule.sigma(t_eval)
    eps = den.predict_eps(np.asarray(action, dtype=np.float64) * a, s_enc, t_eval)
    return -eps / s


def ddpm_sample(
    den,
    s_enc,
    rng: np.random.Generator,
    action_dim: int,
    n_steps: int = 20,
    t_lo: float = 0.02,
    box: float = 4.0,
    normalizer: FeatureNormalizer | None = None,
) -> np.ndarray:
    """Ancestral sampling on a uniform time grid from t=1 down to ``t_lo``.

    Each step forms the clean-data estimate ``x0 = (x_t - sigma eps) / alpha``,
    clamps it to the normalized action box, and draws the next state from the
    forward-posterior transition. The final ``x0`` estimate is returned,
    de-normalized when a normalizer is supplied.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    sched = den.schedule
    grid = np.linspace(1.0, t_lo, n_steps)
    x = rng.standard_normal(action_dim)
    x0 = np.zeros(action_dim)
    for i, t in enumerate(grid):
        a = float(sched.alpha(t))
        s = float(sched.sigma(t))
        eps_hat = den.predict_eps(x, s_enc, t)
        x0 = np.clip((x - s * eps_hat) / max(a, 1e-300), -box, box)
        if i == n_steps - 1:
            break
        t2 = grid[i + 1]
        a2 = float(sched.alpha(t2))
        s2 = float(sched.sigma(t2))
        zeta = (s2 / s) * np.sqrt(max(a2 * a2 - a * a, 0.0)) / a2
        c = np.sqrt(max(s2 * s2 - zeta * zeta, 0.0))
        eps_dir = (x - a * x0) / s
        x = a2 * x0 + c * eps_dir + zeta * rng.standard_normal(action_dim)
    if normalizer is not None:
        return normalizer.denorm_action(x0)
    return x0
