"""Toy driving world: kinematics, scenarios, scripted experts, state encoding.

The world is a single corridor around a reference centerline. The ego vehicle
and up to ``max_agents`` scripted vehicles move along it; scenarios are
deterministic functions of a seed. A hand-crafted feature map plays the role
of a frozen scene encoder: it is a pure function of the scene, so every
training stage shares one fixed representation.

Conventions: poses are (x, y, heading) of the vehicle center, headings wrap
to (-pi, pi], lateral offsets are signed positive-left of the centerline.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import backend
from .config import SCENARIO_KINDS, WorldConfig

DISC_RADIUS_FACTOR = np.sqrt(2.0)  # collision disc radius = half_width * sqrt(2)
PASS_CLEARANCE = 3.8  # lateral clearance the expert plans around parked vehicles
CONFLICT_GAP = 3.0  # smaller lateral separation than this counts as in-path
BUMP_HALF_LENGTH = 18.0  # arc half-extent of the avoidance bump
MERGE_RAMP_LENGTH = 40.0
STOPPED_SPEED = 0.5  # below this an agent counts as stopped
PARKED_OFFSET_MIN = 0.15  # stopped vehicles at least this far off-center are parked
MAX_PREDICTED_DECEL = 6.0  # cap on the lead deceleration the expert projects


def wrap_angle(theta):
    """Wrap angle(s) to (-pi, pi]."""
    w = (np.asarray(theta) + np.pi) % (2.0 * np.pi) - np.pi
    w = np.where(w <= -np.pi, np.pi, w)
    return w if w.ndim else float(w)


@dataclass
class VehicleState:
    x: float
    y: float
    heading: float
    speed: float
    accel: float = 0.0

    def __post_init__(self):
        if not np.isfinite([self.x, self.y, self.heading, self.speed, self.accel]).all():
            raise ValueError("non-finite vehicle state")
        if self.speed < 0.0:
            raise ValueError("speed must be >= 0 (no reverse motion)")
        self.heading = wrap_angle(self.heading)

    @property
    def pose(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading])


@dataclass
class Trajectory:
    """Fixed-horizon pose plan; ``poses[k]`` is the pose after step k+1."""

    poses: np.ndarray  # (H, 3) of (x, y, heading)
    dt: float

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=np.float64)
        if self.poses.ndim != 2 or self.poses.shape[1] != 3 or self.poses.shape[0] < 1:
            raise ValueError("poses must be a (H, 3) array with H >= 1")
        if not np.isfinite(self.poses).all():
            raise ValueError("non-finite trajectory poses")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")

    @property
    def horizon(self) -> int:
        return self.poses.shape[0]

    def xy(self) -> np.ndarray:
        return self.poses[:, :2]

    def speeds(self, start_pose: np.ndarray | None = None) -> np.ndarray:
        """Displacement-based speeds; with a start pose, one per trajectory step."""
        pts = self.xy()
        if start_pose is not None:
            pts = np.vstack([np.asarray(start_pose)[:2], pts])
        return np.linalg.norm(np.diff(pts, axis=0), axis=1) / self.dt

    def check_feasible(self, v_max: float, margin: float) -> bool:
        """Consecutive displacements stay within the kinematic step bound."""
        steps = np.linalg.norm(np.diff(self.xy(), axis=0), axis=1)
        return bool(np.all(steps <= v_max * self.dt + margin))


@dataclass
class AgentObs:
    state: VehicleState
    half_length: float
    half_width: float
    valid: bool = True


class Centerline:
    """Polyline reference path with arc-length parameterization."""

    def __init__(self, points: np.ndarray):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 2 or points.shape[0] < 2:
            raise ValueError("centerline needs at least two 2-D points")
        seg = np.diff(points, axis=0)
        seg_len = np.linalg.norm(seg, axis=1)
        if np.any(seg_len <= 0.0):
            raise ValueError("centerline arc length must be strictly increasing")
        self.points = points
        self.arc = np.concatenate([[0.0], np.cumsum(seg_len)])
        self.seg_dir = seg / seg_len[:, None]
        self.seg_len = seg_len
        self.headings = np.arctan2(self.seg_dir[:, 1], self.seg_dir[:, 0])

    @property
    def length(self) -> float:
        return float(self.arc[-1])

    def point_at(self, s):
        s = np.clip(np.asarray(s, dtype=np.float64), self.arc[0], self.arc[-1])
        idx = np.clip(np.searchsorted(self.arc, s, side="right") - 1, 0, len(self.seg_len) - 1)
        frac = s - self.arc[idx]
        return self.points[idx] + self.seg_dir[idx] * frac[..., None]

    def heading_at(self, s):
        s = np.clip(np.asarray(s, dtype=np.float64), self.arc[0], self.arc[-1])
        idx = np.clip(np.searchsorted(self.arc, s, side="right") - 1, 0, len(self.seg_len) - 1)
        out = self.headings[idx]
        return out if out.ndim else float(out)

    def project(self, xy):
        """(arc length, signed lateral offset) of query point(s).

        Lateral offset is positive to the left of the path direction.
        """
        pts = np.atleast_2d(np.asarray(xy, dtype=np.float64))
        rel = pts[:, None, :] - self.points[None, :-1, :]  # (Q, S, 2)
        t = np.einsum("qsd,sd->qs", rel, self.seg_dir)
        t = np.clip(t, 0.0, self.seg_len[None, :])
        foot = self.points[None, :-1, :] + t[..., None] * self.seg_dir[None, :, :]
        d2 = np.sum((pts[:, None, :] - foot) ** 2, axis=-1)
        best = np.argmin(d2, axis=1)
        q = np.arange(len(pts))
        s = self.arc[best] + t[q, best]
        offset = pts - foot[q, best]
        lateral = (
            self.seg_dir[best, 0] * offset[:, 1] - self.seg_dir[best, 1] * offset[:, 0]
        )
        if np.ndim(xy) == 1:
            return float(s[0]), float(lateral[0])
        return s, lateral

    def pose_at(self, s, lateral=0.0):
        """World pose on the path at arc ``s`` shifted ``lateral`` to the left."""
        s_arr = np.asarray(s, dtype=np.float64)
        base = self.point_at(s_arr)
        h = np.asarray(self.heading_at(s_arr))
        normal = np.stack([-np.sin(h), np.cos(h)], axis=-1)
        return base + np.asarray(lateral)[..., None] * normal


@dataclass
class SceneContext:
    """World snapshot handed to the encoder and the planners."""

    ego_history: list[VehicleState]  # oldest first; last entry is current
    agents: list[AgentObs]  # fixed length max_agents; invalid entries padded
    centerline: Centerline
    corridor_half_width: float
    speed_limit: float
    goal_arc_length: float

    def __post_init__(self):
        if self.centerline is None:
            raise ValueError("scene requires a centerline")
        if not self.ego_history:
            raise ValueError("scene requires ego history")

    @property
    def ego(self) -> VehicleState:
        return self.ego_history[-1]

    def valid_agents(self) -> list[AgentObs]:
        return [a for a in self.agents if a.valid]


@dataclass
class Scenario:
    kind: str
    seed: int
    scene: SceneContext
    scripts: np.ndarray  # (max_agents, T+1, 4) of (x, y, heading, speed)
    agent_desired_speed: np.ndarray  # per-agent target speed for reactive mode


# ---------------------------------------------------------------------------
# kinematics
# ---------------------------------------------------------------------------


def rollout_bicycle(start: VehicleState, controls, dt: float, cfg: WorldConfig) -> Trajectory:
    """Integrate kinematic bicycle dynamics for the given control sequence."""
    controls = np.asarray(controls, dtype=np.float64)
    if controls.ndim != 2 or controls.shape[1] != 2:
        raise ValueError("controls must be a sequence of (accel, steer) pairs")
    if not np.isfinite(controls).all():
        raise ValueError("non-finite control input")
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    if np.any(np.abs(controls[:, 1]) > cfg.steer_max + 1e-12):
        raise ValueError(f"steer exceeds steer_max={cfg.steer_max}")
    out = backend.bicycle_rollout(
        start.x,
        start.y,
        start.heading,
        start.speed,
        np.ascontiguousarray(controls[:, 0]),
        np.ascontiguousarray(controls[:, 1]),
        dt,
        cfg.wheelbase,
        cfg.v_max,
    )
    return Trajectory(poses=out[:, :3].copy(), dt=dt)


def footprint_discs(pose, half_width: float, axle_offset: float) -> np.ndarray:
    """Two covering-disc centers placed at the front/rear axle midpoints."""
    x, y, h = pose[0], pose[1], pose[2]
    dx, dy = axle_offset * np.cos(h), axle_offset * np.sin(h)
    return np.array([[x + dx, y + dy], [x - dx, y - dy]])


def poses_collide(pose_a, pose_b, half_width_a, half_width_b, axle_offset) -> bool:
    da = footprint_discs(pose_a, half_width_a, axle_offset)
    db = footprint_discs(pose_b, half_width_b, axle_offset)
    thresh = DISC_RADIUS_FACTOR * (half_width_a + half_width_b)
    d2 = np.sum((da[:, None, :] - db[None, :, :]) ** 2, axis=-1)
    return bool(np.any(d2 <= thresh * thresh))


# ---------------------------------------------------------------------------
# path-relative action encoding (trajectory <-> flat vector)
#
# Actions are (arc progress from the decision point, signed lateral offset,
# heading error to the path tangent) per step, flattened. Expressing plans
# relative to the centerline removes road curvature from the representation,
# so the lateral coordinates carry exactly the maneuver content (avoidance
# bumps, merges) at a learnable scale.
# ---------------------------------------------------------------------------


def poses_to_action(poses: np.ndarray, line: Centerline, ego_pose: np.ndarray) -> np.ndarray:
    """Express world poses in path coordinates anchored at the ego, flattened."""
    poses = np.asarray(poses, dtype=np.float64)
    s0, _ = line.project(np.asarray(ego_pose)[:2])
    s, d = line.project(poses[:, :2])
    out = np.empty_like(poses)
    out[:, 0] = s - s0
    out[:, 1] = d
    out[:, 2] = wrap_angle(poses[:, 2] - np.asarray(line.heading_at(s)))
    return out.reshape(-1)


def action_to_poses(action: np.ndarray, line: Centerline, ego_pose: np.ndarray) -> np.ndarray:
    """Inverse of :func:`poses_to_action`."""
    rel = np.asarray(action, dtype=np.float64).reshape(-1, 3)
    s0, _ = line.project(np.asarray(ego_pose)[:2])
    s = s0 + rel[:, 0]
    xy = line.pose_at(s, rel[:, 1])
    heading = wrap_angle(np.asarray(line.heading_at(s)) + rel[:, 2])
    return np.concatenate([xy, heading[:, None]], axis=1)


# ---------------------------------------------------------------------------
# state encoding
# ---------------------------------------------------------------------------

STD_FLOOR = 1e-6


@dataclass
class StateEncoding:
    features: np.ndarray
    norm_id: str


@dataclass
class FeatureNormalizer:
    """Per-coordinate z-scoring for state features and action vectors.

    Near-constant coordinates (std below ``STD_FLOOR``) are passed through
    centered but unscaled, so exact constants map to exactly zero.
    """

    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray

    def __post_init__(self):
        self.state_std = np.where(self.state_std < STD_FLOOR, 1.0, self.state_std)
        self.action_std = np.where(self.action_std < STD_FLOOR, 1.0, self.action_std)

    @property
    def norm_id(self) -> str:
        import hashlib

        blob = b"".join(
            np.ascontiguousarray(a, dtype=np.float64).tobytes()
            for a in (self.state_mean, self.state_std, self.action_mean, self.action_std)
        )
        return hashlib.sha256(blob).hexdigest()[:16]

    def norm_state(self, x):
        return (np.asarray(x, dtype=np.float64) - self.state_mean) / self.state_std

    def denorm_state(self, z):
        return np.asarray(z, dtype=np.float64) * self.state_std + self.state_mean

    def norm_action(self, a):
        return (np.asarray(a, dtype=np.float64) - self.action_mean) / self.action_std

    def denorm_action(self, z):
        return np.asarray(z, dtype=np.float64) * self.action_std + self.action_mean

    def to_dict(self) -> dict:
        return {
            "state_mean": self.state_mean.tolist(),
            "state_std": self.state_std.tolist(),
            "action_mean": self.action_mean.tolist(),
            "action_std": self.action_std.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureNormalizer":
        return cls(
            state_mean=np.asarray(d["state_mean"], dtype=np.float64),
            state_std=np.asarray(d["state_std"], dtype=np.float64),
            action_mean=np.asarray(d["action_mean"], dtype=np.float64),
            action_std=np.asarray(d["action_std"], dtype=np.float64),
        )


def encode_state_raw(scene: SceneContext, cfg: WorldConfig) -> np.ndarray:
    """Deterministic feature map of a scene (un-normalized).

    Layout (K = hard-coded 4 nearest-agent slots):
      0 ego speed                 6     previous ego speed
      1 ego accel                 7..10 path heading preview at +10/+25/+50/+80 m
      2 lateral offset            11    speed limit
      3 heading error             12..15 agent slot validity
      4 remaining arc to goal     16..19 slot longitudinal arc gap
      5 speed limit margin        20..23 slot lateral gap
                                  24..27 slot speed delta
                                  28..31 slot acceleration

    The heading previews expose the upcoming path shape relative to the
    path direction at the ego, which the planner needs over the full
    planning horizon.
    """
    k_slots = 4
    ego = scene.ego
    line = scene.centerline
    s_ego, d_ego = line.project((ego.x, ego.y))
    path_heading = line.heading_at(s_ego)

    f = np.zeros(cfg.state_dim, dtype=np.float64)
    f[0] = ego.speed
    f[1] = ego.accel
    f[2] = d_ego
    f[3] = wrap_angle(ego.heading - path_heading)
    f[4] = scene.goal_arc_length - s_ego
    f[5] = scene.speed_limit - ego.speed
    f[6] = scene.ego_history[-2].speed if len(scene.ego_history) > 1 else ego.speed
    for i, look in enumerate((10.0, 25.0, 50.0, 80.0)):
        f[7 + i] = wrap_angle(line.heading_at(s_ego + look) - path_heading)
    f[11] = scene.speed_limit

    valid = scene.valid_agents()
    if valid:
        dists = [np.hypot(a.state.x - ego.x, a.state.y - ego.y) for a in valid]
        order = np.argsort(dists, kind="stable")[:k_slots]
        for slot, idx in enumerate(order):
            a = valid[idx].state
            s_a, d_a = line.project((a.x, a.y))
            f[12 + slot] = 1.0
            f[16 + slot] = s_a - s_ego
            f[20 + slot] = d_a - d_ego
            f[24 + slot] = a.speed - ego.speed
            f[28 + slot] = a.accel
    return f


def encode_state(
    scene: SceneContext, cfg: WorldConfig, normalizer: FeatureNormalizer | None = None
) -> StateEncoding:
    """Encode a scene; normalized when dataset statistics are supplied."""
    raw = encode_state_raw(scene, cfg)
    if normalizer is None:
        return StateEncoding(features=raw, norm_id="raw")
    return StateEncoding(features=normalizer.norm_state(raw), norm_id=normalizer.norm_id)


# ---------------------------------------------------------------------------
# scenario generation
# ---------------------------------------------------------------------------

KIND_IDS = {k: i for i, k in enumerate(SCENARIO_KINDS)}


def _line_from_heading(rng, length: float, curved: bool) -> Centerline:
    ds = 2.0
    n = int(length / ds) + 1
    s = np.arange(n) * ds
    if curved:
        amp = rng.uniform(0.02, 0.06)
        wavelength = rng.uniform(80.0, 140.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        headings = amp * np.sin(2.0 * np.pi * s / wavelength + phase)
    else:
        headings = np.zeros(n)
    pts = np.zeros((n, 2))
    pts[1:, 0] = np.cumsum(np.cos(headings[:-1]) * ds)
    pts[1:, 1] = np.cumsum(np.sin(headings[:-1]) * ds)
    return Centerline(pts)


def _history_along(line: Centerline, s0: float, d0: float, speed: float, cfg: WorldConfig):
    hist = []
    for k in range(cfg.history_len - 1, -1, -1):
        s = s0 - speed * cfg.dt * k
        xy = line.pose_at(s, d0)
        hist.append(
            VehicleState(
                x=float(xy[0]),
                y=float(xy[1]),
                heading=line.heading_at(s),
                speed=speed,
                accel=0.0,
            )
        )
    return hist


def _script_agent(line, s0, d0, speed0, n_steps, dt, decel=0.0, brake_step=None):
    """Advance an agent along its lateral line; optional scripted braking."""
    states = np.zeros((n_steps + 1, 4))
    s, v = s0, speed0
    for t in range(n_steps + 1):
        xy = line.pose_at(s, d0)
        states[t] = (xy[0], xy[1], line.heading_at(s), v)
        if brake_step is not None and t >= brake_step:
            v = max(0.0, v - decel * dt)
        s += v * dt
    return states


def generate_scenario(
    seed: int, kind: str, cfg: WorldConfig, n_steps: int = 80
) -> Scenario:
    """Build a deterministic scenario of the requested kind.

    ``n_steps`` is the number of world steps the agent scripts cover.
    """
    if kind not in SCENARIO_KINDS:
        raise ValueError(f"unknown scenario kind {kind!r}")
    from .config import rng_stream

    rng = rng_stream(seed, "scenario", KIND_IDS[kind])
    line_length = cfg.goal_arc_length + 120.0
    line = _line_from_heading(rng, line_length, curved=(kind == "lane_follow"))
    # ego starts 30 m into the polyline so history and goal both fit
    s_ego = 30.0
    goal_arc = s_ego + cfg.goal_arc_length

    scripts = np.zeros((cfg.max_agents, n_steps + 1, 4))
    agents: list[AgentObs] = []
    desired = np.zeros(cfg.max_agents)

    if kind == "lane_follow":
        v0 = rng.uniform(7.0, 11.0)
        limit = rng.uniform(10.0, 13.0)
        d_ego = 0.0
    elif kind == "lead_stop":
        v0 = rng.uniform(8.0, 12.0)
        limit = rng.uniform(10.0, 13.0)
        d_ego = 0.0
        lead_gap = rng.uniform(25.0, 40.0)
        lead_speed = rng.uniform(4.0, 7.0)
        brake_step = int(rng.integers(0, 3))
        scripts[0] = _script_agent(
            line, s_ego + lead_gap, 0.0, lead_speed, n_steps, cfg.dt,
            decel=2.5, brake_step=brake_step,
        )
        desired[0] = lead_speed
        agents.append(_agent_from_script(scripts[0], cfg))
    elif kind == "obstacle_pass":
        v0 = rng.uniform(7.0, 10.0)
        limit = rng.uniform(9.0, 12.0)
        d_ego = 0.0
        obs_gap = rng.uniform(35.0, 50.0)
        obs_lat = float(rng.choice([-1.0, 1.0])) * rng.uniform(PARKED_OFFSET_MIN, 0.3)
        scripts[0] = _script_agent(line, s_ego + obs_gap, obs_lat, 0.0, n_steps, cfg.dt)
        desired[0] = 0.0
        agents.append(_agent_from_script(scripts[0], cfg))
    else:  # merge
        v0 = rng.uniform(7.0, 10.0)
        limit = rng.uniform(9.0, 12.0)
        d_ego = float(rng.choice([-1.0, 1.0])) * rng.uniform(2.5, 3.5)
        lead_gap = rng.uniform(15.0, 25.0)
        lead_speed = limit * rng.uniform(0.7, 0.9)
        scripts[0] = _script_agent(line, s_ego + lead_gap, 0.0, lead_speed, n_steps, cfg.dt)
        desired[0] = lead_speed
        agents.append(_agent_from_script(scripts[0], cfg))
        # trailing vehicle stays slower than the ego so the merge gap opens
        trail_gap = rng.uniform(15.0, 25.0)
        trail_speed = min(lead_speed, v0) * rng.uniform(0.6, 0.85)
        scripts[1] = _script_agent(line, s_ego - trail_gap, 0.0, trail_speed, n_steps, cfg.dt)
        desired[1] = trail_speed
        agents.append(_agent_from_script(scripts[1], cfg))

    while len(agents) < cfg.max_agents:
        agents.append(
            AgentObs(
                state=VehicleState(0.0, 0.0, 0.0, 0.0),
                half_length=cfg.agent_half_length,
                half_width=cfg.agent_half_width,
                valid=False,
            )
        )

    scene = SceneContext(
        ego_history=_history_along(line, s_ego, d_ego, v0, cfg),
        agents=agents,
        centerline=line,
        corridor_half_width=cfg.corridor_half_width,
        speed_limit=limit,
        goal_arc_length=goal_arc,
    )
    return Scenario(
        kind=kind, seed=seed, scene=scene, scripts=scripts, agent_desired_speed=desired
    )


def _agent_from_script(script, cfg: WorldConfig) -> AgentObs:
    # initial acceleration read off the script so braking is observable at t=0
    row, nxt = script[0], script[min(1, len(script) - 1)]
    return AgentObs(
        state=VehicleState(
            x=row[0],
            y=row[1],
            heading=row[2],
            speed=row[3],
            accel=(nxt[3] - row[3]) / cfg.dt,
        ),
        half_length=cfg.agent_half_length,
        half_width=cfg.agent_half_width,
        valid=True,
    )


# ---------------------------------------------------------------------------
# scripted expert: IDM longitudinal control + pure-pursuit lateral tracking
# ---------------------------------------------------------------------------


def idm_accel(speed, gap, closing_speed, desired_speed, headway, a_max, b_comf, jam_gap):
    """Intelligent Driver Model acceleration for one follower."""
    v = max(speed, 0.0)
    v0 = max(desired_speed, 0.1)
    free = a_max * (1.0 - (v / v0) ** 4)
    if gap is None:
        return free
    s_star = jam_gap + v * headway + v * closing_speed / (2.0 * np.sqrt(a_max * b_comf))
    s_star = max(s_star, jam_gap)
    gap = max(gap, 0.5)
    return a_max * (1.0 - (v / v0) ** 4 - (s_star / gap) ** 2)


def _offset_path(scene: SceneContext, mode_sign: float, cfg: WorldConfig):
    """Lateral target as a function of arc length for the expert.

    Converges any initial offset onto the centerline and plans a fixed-side
    bump around parked vehicles blocking the path ahead. A stopped vehicle
    counts as parked only when it sits visibly off the lane center
    (``PARKED_OFFSET_MIN``); stopped traffic on the centerline is queued
    behind instead.
    """
    line = scene.centerline
    ego = scene.ego
    s_now, d_now = line.project((ego.x, ego.y))
    bumps = []
    for a in scene.valid_agents():
        if a.state.speed < STOPPED_SPEED:
            s_a, d_a = line.project((a.state.x, a.state.y))
            if (
                s_a > s_now - BUMP_HALF_LENGTH
                and PARKED_OFFSET_MIN <= abs(d_a) < 2.0
            ):
                bumps.append((s_a, d_a))

    merge_d0 = d_now if abs(d_now) > 1.0 else 0.0

    def d_target(s):
        d = 0.0
        if merge_d0 != 0.0:
            u = np.clip((s - s_now) / MERGE_RAMP_LENGTH, 0.0, 1.0)
            d += merge_d0 * (1.0 - (3.0 * u * u - 2.0 * u * u * u))
        for s_a, d_a in bumps:
            u = (s - s_a) / BUMP_HALF_LENGTH
            if abs(u) < 1.0:
                d += (d_a + mode_sign * PASS_CLEARANCE - d) * 0.5 * (1.0 + np.cos(np.pi * u))
        return d

    return d_target


def expert_demonstrate(scene: SceneContext, mode_seed: int, cfg: WorldConfig) -> Trajectory:
    """Scripted demonstration: IDM speed control tracking an offset path.

    ``mode_seed`` parity picks the passing side around stopped obstacles,
    which is the controlled source of multimodality in the data.
    """
    mode_sign = 1.0 if mode_seed % 2 == 0 else -1.0
    line = scene.centerline
    d_target = _offset_path(scene, mode_sign, cfg)

    ego = scene.ego
    state = replace(ego)
    controls = np.zeros((cfg.horizon, 2))
    poses = np.zeros((cfg.horizon, 3))

    # Constant-deceleration lead prediction: project each agent at its
    # observed (non-positive) acceleration, flooring speed at zero.
    agent_info = []
    for a in scene.valid_agents():
        s_a, d_a = line.project((a.state.x, a.state.y))
        decel = float(np.clip(a.state.accel, -MAX_PREDICTED_DECEL, 0.0))
        arcs = np.empty(cfg.horizon + 1)
        speeds = np.empty(cfg.horizon + 1)
        s_pred, v_pred = s_a, a.state.speed
        for k in range(cfg.horizon + 1):
            arcs[k] = s_pred
            speeds[k] = v_pred
            # same order as the scripts: speed update first, then advance
            v_pred = max(0.0, v_pred + decel * cfg.dt)
            s_pred += v_pred * cfg.dt
        agent_info.append((arcs, d_a, speeds))

    for k in range(cfg.horizon):
        s_now, _ = line.project((state.x, state.y))
        # lead selection: agents ahead whose lateral line the planned path
        # actually crosses
        gap = None
        closing = 0.0
        for arcs, d_a, speeds in agent_info:
            s_a = arcs[k]
            v_a = speeds[k]
            rel = s_a - s_now
            if rel <= 0.0:
                continue
            if abs(d_target(s_a) - d_a) >= CONFLICT_GAP:
                continue
            bumper = rel - 2.0 * cfg.agent_half_length
            if gap is None or bumper < gap:
                gap = bumper
                closing = state.speed - v_a
        accel = idm_accel(
            state.speed,
            gap,
            closing,
            desired_speed=scene.speed_limit,
            headway=cfg.expert_headway,
            a_max=cfg.expert_max_accel,
            b_comf=cfg.expert_decel,
            jam_gap=cfg.expert_jam_gap,
        )
        accel = float(np.clip(accel, -cfg.expert_emergency_decel, cfg.expert_max_accel))

        look = float(
            np.clip(
                cfg.expert_lookahead_gain * max(state.speed, 1.0),
                cfg.expert_lookahead_min,
                cfg.expert_lookahead_max,
            )
        )
        s_look = s_now + look
        target = line.pose_at(s_look, d_target(s_look))
        alpha = wrap_angle(
            np.arctan2(target[1] - state.y, target[0] - state.x) - state.heading
        )
        dist = max(np.hypot(target[0] - state.x, target[1] - state.y), 1.0)
        steer = float(
            np.clip(np.arctan2(2.0 * cfg.wheelbase * np.sin(alpha), dist), -cfg.steer_max, cfg.steer_max)
        )
        controls[k] = (accel, steer)
        step = backend.bicycle_rollout(
            state.x,
            state.y,
            state.heading,
            state.speed,
            np.array([accel]),
            np.array([steer]),
            cfg.dt,
            cfg.wheelbase,
            cfg.v_max,
        )[0]
        new_speed = float(step[3])
        state = VehicleState(
            x=float(step[0]),
            y=float(step[1]),
            heading=float(step[2]),
            speed=new_speed,
            accel=(new_speed - state.speed) / cfg.dt,
        )
        poses[k] = (state.x, state.y, state.heading)

    return Trajectory(poses=poses, dt=cfg.dt)


# ---------------------------------------------------------------------------
# episode simulation shared by the dataset builder and closed-loop evaluation
# ---------------------------------------------------------------------------


class EpisodeSim:
    """Advances a scenario step by step under perfect ego trajectory tracking.

    Non-reactive mode replays agent scripts verbatim; reactive mode drives
    agents with IDM against whatever is directly ahead of them (ego included)
    while their desired speed follows the script's speed profile.
    """

    def __init__(self, scenario: Scenario, cfg: WorldConfig, reactive: bool = False, idm_params=None):
        self.scenario = scenario
        self.cfg = cfg
        self.reactive = reactive
        self.idm = idm_params or {}
        self.step_idx = 0
        self.ego_history = list(scenario.scene.ego_history)
        self.agent_states = [a.state for a in scenario.scene.agents]
        self.agent_valid = [a.valid for a in scenario.scene.agents]
        self.collided = False
        self.ego_trace = [self.ego_history[-1]]
        self.agent_trace = [list(self.agent_states)]

    @property
    def ego(self) -> VehicleState:
        return self.ego_history[-1]

    def scene(self) -> SceneContext:
        base = self.scenario.scene
        agents = [
            AgentObs(
                state=self.agent_states[i],
                half_length=base.agents[i].half_length,
                half_width=base.agents[i].half_width,
                valid=self.agent_valid[i],
            )
            for i in range(len(base.agents))
        ]
        hist = self.ego_history[-self.cfg.history_len :]
        while len(hist) < self.cfg.history_len:
            hist = [hist[0]] + hist
        return SceneContext(
            ego_history=hist,
            agents=agents,
            centerline=base.centerline,
            corridor_half_width=base.corridor_half_width,
            speed_limit=base.speed_limit,
            goal_arc_length=base.goal_arc_length,
        )

    def agent_futures(self, horizon: int) -> list[Trajectory | None]:
        """Scripted future poses for each agent over the next ``horizon`` steps."""
        out = []
        scripts = self.scenario.scripts
        for i in range(len(self.agent_valid)):
            if not self.agent_valid[i]:
                out.append(None)
                continue
            rows = []
            for k in range(1, horizon + 1):
                t = min(self.step_idx + k, scripts.shape[1] - 1)
                rows.append(scripts[i, t, :3])
            out.append(Trajectory(poses=np.array(rows), dt=self.cfg.dt))
        return out

    def goal_reached(self) -> bool:
        line = self.scenario.scene.centerline
        s, _ = line.project((self.ego.x, self.ego.y))
        return s >= self.scenario.scene.goal_arc_length

    def _advance_agents(self):
        t = self.step_idx + 1
        scripts = self.scenario.scripts
        if not self.reactive:
            for i in range(len(self.agent_states)):
                if not self.agent_valid[i]:
                    continue
                row = scripts[i, min(t, scripts.shape[1] - 1)]
                self.agent_states[i] = VehicleState(
                    x=row[0],
                    y=row[1],
                    heading=row[2],
                    speed=row[3],
                    accel=(row[3] - self.agent_states[i].speed) / self.cfg.dt,
                )
            return
        line = self.scenario.scene.centerline
        cfg = self.cfg
        headway = self.idm.get("headway", 2.0)
        a_max = self.idm.get("max_accel", 2.0)
        b_comf = self.idm.get("comfortable_decel", 3.0)
        jam = self.idm.get("jam_gap", 2.0)
        ego_s, ego_d = line.project((self.ego.x, self.ego.y))
        infos = []
        for i in range(len(self.agent_states)):
            if not self.agent_valid[i]:
                infos.append(None)
                continue
            a = self.agent_states[i]
            s, d = line.project((a.x, a.y))
            infos.append((s, d, a.speed))
        new_states = list(self.agent_states)
        for i, info in enumerate(infos):
            if info is None:
                continue
            s, d, v = info
            # nearest entity ahead in the same lateral band
            gap = None
            closing = 0.0
            for j, other in enumerate(infos):
                if j == i or other is None:
                    continue
                if other[0] > s and abs(other[1] - d) < 2.0:
                    g = other[0] - s - 2.0 * cfg.agent_half_length
                    if gap is None or g < gap:
                        gap, closing = g, v - other[2]
            if ego_s > s and abs(ego_d - d) < 2.0:
                g = ego_s - s - 2.0 * cfg.agent_half_length
                if gap is None or g < gap:
                    gap, closing = g, v - self.ego.speed
            # desired speed follows the script profile (covers scripted braking)
            desired = float(scripts[i, min(t, scripts.shape[1] - 1), 3])
            accel = idm_accel(v, gap, closing, desired, headway, a_max, b_comf, jam)
            accel = float(np.clip(accel, -b_comf * 2.0, a_max))
            v_new = max(0.0, v + accel * cfg.dt)
            s_new = s + v_new * cfg.dt
            xy = line.pose_at(s_new, d)
            new_states[i] = VehicleState(
                x=float(xy[0]),
                y=float(xy[1]),
                heading=line.heading_at(s_new),
                speed=v_new,
                accel=(v_new - v) / cfg.dt,
            )
        self.agent_states = new_states

    def execute(self, planned: Trajectory, n_steps: int) -> bool:
        """Track the first ``n_steps`` planned poses; returns False on collision."""
        cfg = self.cfg
        for k in range(n_steps):
            pose = planned.poses[k]
            prev = self.ego
            dist = float(np.hypot(pose[0] - prev.x, pose[1] - prev.y))
            speed = dist / cfg.dt
            state = VehicleState(
                x=float(pose[0]),
                y=float(pose[1]),
                heading=float(pose[2]),
                speed=speed,
                accel=(speed - prev.speed) / cfg.dt,
            )
            self._advance_agents()
            self.step_idx += 1
            self.ego_history.append(state)
            self.ego_trace.append(state)
            self.agent_trace.append(list(self.agent_states))
            for i, a in enumerate(self.agent_states):
                if not self.agent_valid[i]:
                    continue
                if poses_collide(
                    state.pose,
                    a.pose,
                    cfg.agent_half_width,
                    cfg.agent_half_width,
                    cfg.wheelbase / 2.0,
                ):
                    self.collided = True
                    return False
        return True
