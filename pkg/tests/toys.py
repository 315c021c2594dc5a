"""Analytic fixtures: closed-form denoisers and critics for toy problems."""

import numpy as np

from scoredrive.diffusion import CosineSchedule


class GaussianDenoiser:
    """Optimal noise predictor for standard-normal 1-D behavior."""

    schedule = CosineSchedule()

    def predict_eps(self, a_t, s_enc, t):
        a_t = np.asarray(a_t, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        sg = self.schedule.sigma(t)
        if a_t.ndim == 2:
            sg = np.atleast_1d(sg)[:, None] * np.ones_like(a_t)
        return sg * a_t

    def digest(self):
        return "analytic-gaussian"


class PointMassDenoiser:
    """Optimal noise predictor when the behavior is a point mass at a_star."""

    schedule = CosineSchedule()

    def __init__(self, a_star):
        self.a_star = np.asarray(a_star, dtype=np.float64)

    def predict_eps(self, a_t, s_enc, t):
        a_t = np.asarray(a_t, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        al = self.schedule.alpha(t)
        sg = np.maximum(self.schedule.sigma(t), 1e-12)
        if a_t.ndim == 2:
            al = np.atleast_1d(al)[:, None]
            sg = np.atleast_1d(sg)[:, None]
        return (a_t - al * self.a_star) / sg

    def digest(self):
        return "analytic-point-mass"


class BimodalDenoiser:
    """Optimal noise predictor for equal point masses at -1 and +1 (1-D)."""

    schedule = CosineSchedule()

    def predict_eps(self, a_t, s_enc, t):
        a_t = np.asarray(a_t, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        al = self.schedule.alpha(t)
        sg = np.maximum(self.schedule.sigma(t), 1e-12)
        if a_t.ndim == 2:
            al = np.atleast_1d(al)[:, None]
            sg = np.atleast_1d(sg)[:, None]
        posterior_mean = np.tanh(al * a_t / (sg * sg))
        return (a_t - al * posterior_mean) / sg

    def digest(self):
        return "analytic-bimodal"


class LinearCritic:
    """Q(s, a) = a for 1-D actions; favors the +1 mode."""

    def action_grad_min_q(self, states, actions):
        return np.ones_like(actions)

    def min_q_online(self, states, actions):
        return np.atleast_2d(actions)[:, 0]

    def digest(self):
        return "analytic-linear"


class QuadraticCritic:
    """Q(s, a) = -(a - target)^2 summed over action dims."""

    def __init__(self, target=0.7):
        self.target = target

    def action_grad_min_q(self, states, actions):
        return -2.0 * (np.atleast_2d(actions) - self.target)

    def min_q_online(self, states, actions):
        return -np.sum((np.atleast_2d(actions) - self.target) ** 2, axis=1)

    def digest(self):
        return "analytic-quadratic"


class ZeroCritic:
    """Constant Q: no reward gradient, isolates the score term."""

    def action_grad_min_q(self, states, actions):
        return np.zeros_like(np.atleast_2d(actions))

    def min_q_online(self, states, actions):
        return np.zeros(np.atleast_2d(actions).shape[0])

    def digest(self):
        return "analytic-zero"
