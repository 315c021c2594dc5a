"""Composite trajectory scorer: safety gates times a weighted comfort mean.

The aggregate score is::

    no_collision * drivable_area * direction * (sum_i w_i m_i / sum_i w_i)

with multiplicative gates in {0, 0.5, 1} and weighted submetrics in [0, 1]
(time-to-collision, comfort, proximity, progress, speed limit, lane
following). Default weights emphasize comfort and proximity over raw
progress. All metrics are pure functions of the scene, the pose sequence,
and the agents' future poses; speeds and accelerations are recovered by
finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ScorerConfig, WorldConfig
from .world import (
    DISC_RADIUS_FACTOR,
    SceneContext,
    Trajectory,
    footprint_discs,
    wrap_angle,
)


@dataclass
class MetricBreakdown:
    no_collision: float
    drivable_area: float
    direction: float
    speed_limit: float
    progress: float
    ttc: float
    comfort: float
    lane_following: float
    proximity: float

    FIELDS = (
        "no_collision",
        "drivable_area",
        "direction",
        "speed_limit",
        "progress",
        "ttc",
        "comfort",
        "lane_following",
        "proximity",
    )

    def __post_init__(self):
        for name in self.FIELDS:
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"metric {name}={v} outside [0, 1]")

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.FIELDS}


def weight_vector(scfg: ScorerConfig) -> dict:
    w = {
        "ttc": scfg.weight_ttc,
        "comfort": scfg.weight_comfort,
        "proximity": scfg.weight_proximity,
        "progress": scfg.weight_progress,
        "speed_limit": scfg.weight_speed_limit,
        "lane_following": scfg.weight_lane_following,
    }
    if any(v < 0 for v in w.values()):
        raise ValueError("scorer weights must be >= 0")
    if sum(w.values()) <= 0:
        raise ValueError("weighted metric set must be non-empty")
    return w


class _Arrays:
    """Shared per-call precomputation over the ego and agent pose sequences."""

    def __init__(self, scene: SceneContext, poses: np.ndarray, dt: float,
                 agent_poses: list, cfg: WorldConfig):
        self.scene = scene
        self.cfg = cfg
        self.dt = dt
        self.n = poses.shape[0]  # steps, excluding the start pose
        self.poses = poses
        self.aug = np.vstack([scene.ego.pose, poses])  # (n+1, 3)
        line = scene.centerline
        self.s, self.d = line.project(self.aug[:, :2])
        self.speeds = np.linalg.norm(np.diff(self.aug[:, :2], axis=0), axis=1) / dt

        # ego lateral offset as a function of arc, for the conflict gate
        order = np.argsort(self.s, kind="stable")
        s_sorted = self.s[order]
        d_sorted = self.d[order]
        if s_sorted[-1] - s_sorted[0] > 1e-6:
            self._gate = (s_sorted, d_sorted)
        else:
            self._gate = None

        self.agents = []  # (s (n,), d (n,), speeds (n,), poses (n, 3), obs)
        for agent, traj in zip(scene.agents, agent_poses):
            if traj is None or not agent.valid:
                self.agents.append(None)
                continue
            a_aug = np.vstack([agent.state.pose, traj])
            a_s, a_d = line.project(a_aug[:, :2])
            a_speeds = np.linalg.norm(np.diff(a_aug[:, :2], axis=0), axis=1) / dt
            self.agents.append((a_s[1:], a_d[1:], a_speeds, traj, agent))

    def lateral_at_arc(self, s_query):
        if self._gate is None:
            return np.full_like(np.asarray(s_query, dtype=np.float64), self.d[-1])
        s_sorted, d_sorted = self._gate
        return np.interp(s_query, s_sorted, d_sorted)

    def conflicting(self, a_s, a_d, gap):
        """True per step where the agent sits in the ego's planned path."""
        return np.abs(self.lateral_at_arc(a_s) - a_d) < gap


def _check_inputs(scene: SceneContext, trajectory: Trajectory, agent_futures) -> list:
    if agent_futures is None:
        agent_futures = [None] * len(scene.agents)
    if len(agent_futures) != len(scene.agents):
        raise ValueError("agent_futures must align with scene.agents")
    out = []
    for agent, fut in zip(scene.agents, agent_futures):
        if fut is None or not agent.valid:
            out.append(None)
            continue
        if isinstance(fut, Trajectory):
            if fut.horizon != trajectory.horizon or fut.dt != trajectory.dt:
                raise ValueError("agent futures must share the trajectory's dt and horizon")
            out.append(fut.poses)
        else:
            arr = np.asarray(fut, dtype=np.float64)
            if arr.shape != (trajectory.horizon, 3):
                raise ValueError("agent futures must share the trajectory's horizon")
            out.append(arr)
    return out


# --- individual metrics -----------------------------------------------------


def _no_collision(arr: _Arrays) -> float:
    cfg = arr.cfg
    axle = cfg.wheelbase / 2.0
    for rec in arr.agents:
        if rec is None:
            continue
        _, _, _, a_poses, agent = rec
        for k in range(arr.n):
            ego_discs = footprint_discs(arr.poses[k], cfg.agent_half_width, axle)
            a_discs = footprint_discs(a_poses[k], agent.half_width, axle)
            thresh = DISC_RADIUS_FACTOR * (cfg.agent_half_width + agent.half_width)
            d2 = np.sum((ego_discs[:, None, :] - a_discs[None, :, :]) ** 2, axis=-1)
            if np.any(d2 <= thresh * thresh):
                return 0.0
    return 1.0


def _drivable_area(arr: _Arrays) -> float:
    return 1.0 if np.all(np.abs(arr.d[1:]) <= arr.scene.corridor_half_width + 1e-9) else 0.0


def _direction(arr: _Arrays, scfg: ScorerConfig) -> float:
    regress = np.maximum(0.0, -np.diff(arr.s))
    total = float(np.sum(regress[regress > 1e-9]))
    if total <= 1e-9:
        return 1.0
    if total <= scfg.direction_tolerance:
        return 0.5
    return 0.0


def _speed_limit(arr: _Arrays) -> float:
    lim = arr.scene.speed_limit
    over = np.maximum(0.0, arr.speeds - lim)
    return float(np.mean(np.clip(1.0 - over / lim, 0.0, 1.0)))


def _progress(arr: _Arrays) -> float:
    lim = arr.scene.speed_limit
    ref = min(lim * arr.n * arr.dt, arr.scene.goal_arc_length - arr.s[0])
    if ref <= 1e-9:
        return 1.0
    gained = max(arr.s[-1] - arr.s[0], 0.0)
    return float(np.clip(gained / ref, 0.0, 1.0))


def _lane_following(arr: _Arrays, scfg: ScorerConfig) -> float:
    return float(
        np.mean(np.clip(1.0 - np.abs(arr.d[1:]) / scfg.lane_tolerance, 0.0, 1.0))
    )


def _lead_gaps(arr: _Arrays, scfg: ScorerConfig):
    """Per step: (arc gap, closing speed, bumper gap) to the nearest in-path
    lead, or NaN where no lead exists."""
    cfg = arr.cfg
    n = arr.n
    arc_gap = np.full(n, np.nan)
    closing = np.zeros(n)
    bumper = np.full(n, np.nan)
    ego_s = arr.s[1:]
    ego_v = arr.speeds
    for rec in arr.agents:
        if rec is None:
            continue
        a_s, a_d, a_v, _, agent = rec
        conflict = arr.conflicting(a_s, a_d, scfg.conflict_lateral_gap)
        ahead = a_s > ego_s
        mask = conflict & ahead
        gaps = np.where(mask, a_s - ego_s, np.inf)
        better = gaps < np.where(np.isnan(arc_gap), np.inf, arc_gap)
        arc_gap = np.where(better, gaps, arc_gap)
        closing = np.where(better, ego_v - a_v, closing)
        b = gaps - (cfg.agent_half_length + agent.half_length)
        bumper = np.where(better, b, bumper)
    return arc_gap, closing, bumper


def _ttc(arr: _Arrays, scfg: ScorerConfig) -> float:
    arc_gap, closing, _ = _lead_gaps(arr, scfg)
    have = ~np.isnan(arc_gap)
    if not np.any(have):
        return 1.0
    ttc = np.full(arr.n, np.inf)
    g = arc_gap[have]
    c = closing[have]
    vals = np.where(g <= 0.0, 0.0, np.where(c > 1e-9, g / np.maximum(c, 1e-9), np.inf))
    ttc[have] = vals
    t_min = float(np.min(ttc))
    if t_min >= scfg.ttc_safe:
        return 1.0
    if t_min < scfg.ttc_critical:
        return 0.0
    return float((t_min - scfg.ttc_critical) / (scfg.ttc_safe - scfg.ttc_critical))


def _proximity(arr: _Arrays, scfg: ScorerConfig) -> float:
    _, _, bumper = _lead_gaps(arr, scfg)
    d_comfort = scfg.proximity_speed_factor * arr.speeds * arr.dt + scfg.proximity_base_gap
    ratio = np.where(
        np.isnan(bumper), 1.0, np.clip(bumper / np.maximum(d_comfort, 1e-9), 0.0, 1.0)
    )
    return float(np.mean(ratio))


def comfort_metric(trajectory: Trajectory, scfg: ScorerConfig) -> float:
    """Fraction of intervals within the accel / jerk / yaw-rate bounds.

    Works on the trajectory poses alone: speeds come from displacement
    differences, accelerations and jerks from further differences, so an
    interval k carries a yaw-rate always, an acceleration for k >= 1 and a
    jerk for k >= 2.
    """
    h = trajectory.horizon
    if h < 3:
        raise ValueError("comfort metric needs a horizon of at least 3")
    dt = trajectory.dt
    v = trajectory.speeds()  # h-1 values
    a = np.diff(v) / dt  # h-2
    j = np.diff(a) / dt  # h-3
    yaw = wrap_angle(np.diff(trajectory.poses[:, 2])) / dt  # h-1
    ok = np.abs(yaw) <= scfg.max_abs_yaw_rate
    ok[1:] &= np.abs(a) <= scfg.max_abs_accel
    ok[2:] &= np.abs(j) <= scfg.max_abs_jerk
    return float(np.mean(ok))


# --- public operations -------------------------------------------------------


def ttc_metric(scene, trajectory, agent_futures, cfg, scfg) -> float:
    arr = _Arrays(scene, trajectory.poses, trajectory.dt,
                  _check_inputs(scene, trajectory, agent_futures), cfg)
    return _ttc(arr, scfg)


def proximity_metric(scene, trajectory, agent_futures, cfg, scfg) -> float:
    arr = _Arrays(scene, trajectory.poses, trajectory.dt,
                  _check_inputs(scene, trajectory, agent_futures), cfg)
    return _proximity(arr, scfg)


def progress_metric(scene, trajectory, cfg, scfg) -> float:
    arr = _Arrays(scene, trajectory.poses, trajectory.dt,
                  [None] * len(scene.agents), cfg)
    return _progress(arr)


def drivable_area_check(scene, trajectory, cfg) -> float:
    arr = _Arrays(scene, trajectory.poses, trajectory.dt,
                  [None] * len(scene.agents), cfg)
    return _drivable_area(arr)


def direction_check(scene, trajectory, cfg, scfg) -> float:
    arr = _Arrays(scene, trajectory.poses, trajectory.dt,
                  [None] * len(scene.agents), cfg)
    return _direction(arr, scfg)


def speed_limit_metric(scene, trajectory, cfg) -> float:
    arr = _Arrays(scene, trajectory.poses, trajectory.dt,
                  [None] * len(scene.agents), cfg)
    return _speed_limit(arr)


def lane_following_metric(scene, trajectory, cfg, scfg) -> float:
    arr = _Arrays(scene, trajectory.poses, trajectory.dt,
                  [None] * len(scene.agents), cfg)
    return _lane_following(arr, scfg)


def aggregate(breakdown: MetricBreakdown, scfg: ScorerConfig) -> float:
    w = weight_vector(scfg)
    weighted = sum(w[k] * getattr(breakdown, k) for k in w) / sum(w.values())
    return (
        breakdown.no_collision
        * breakdown.drivable_area
        * breakdown.direction
        * weighted
    )


def score_poses(
    scene: SceneContext,
    poses: np.ndarray,
    dt: float,
    agent_poses: list,
    cfg: WorldConfig,
    scfg: ScorerConfig,
) -> tuple[float, MetricBreakdown]:
    """Score an arbitrary-length executed pose sequence (closed-loop use)."""
    arr = _Arrays(scene, np.asarray(poses, dtype=np.float64), dt, agent_poses, cfg)
    if arr.n >= 3:
        comfort = comfort_metric(Trajectory(poses=arr.poses, dt=dt), scfg)
    else:
        comfort = 1.0  # too short for second differences; neutral
    breakdown = MetricBreakdown(
        no_collision=_no_collision(arr),
        drivable_area=_drivable_area(arr),
        direction=_direction(arr, scfg),
        speed_limit=_speed_limit(arr),
        progress=_progress(arr),
        ttc=_ttc(arr, scfg),
        comfort=comfort,
        lane_following=_lane_following(arr, scfg),
        proximity=_proximity(arr, scfg),
    )
    return aggregate(breakdown, scfg), breakdown


def score(
    scene: SceneContext,
    trajectory: Trajectory,
    agent_futures,
    cfg: WorldConfig,
    scfg: ScorerConfig,
) -> tuple[float, MetricBreakdown]:
    """Composite reward of a planned trajectory against scripted agent futures."""
    agent_poses = _check_inputs(scene, trajectory, agent_futures)
    return score_poses(scene, trajectory.poses, trajectory.dt, agent_poses, cfg, scfg)
