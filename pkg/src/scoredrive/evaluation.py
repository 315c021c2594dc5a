"""Receding-horizon closed-loop evaluation and the planner latency benchmark.

An episode repeatedly encodes the scene, asks the planner for a trajectory,
executes its first ``replan_every`` poses under perfect tracking, and
advances agents (script replay when non-reactive, IDM response when
reactive). The finished episode is scored with the same composite metrics
used for rewards, over the realized ego and agent traces. Collisions end the
episode and force a composite of zero.

Planners implement ``plan(scene, rng) -> Trajectory`` plus a ``name``; an
optional ``bind_scenario(scenario)`` hook runs at episode start.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass

import numpy as np

from . import diffusion, extraction
from .config import ExperimentConfig, SCENARIO_KINDS, rng_stream
from .scoring import MetricBreakdown, score_poses
from .world import (
    EpisodeSim,
    Scenario,
    SceneContext,
    Trajectory,
    encode_state,
    expert_demonstrate,
    generate_scenario,
)


@dataclass
class EpisodeResult:
    kind: str
    seed: int
    reactive: bool
    composite: float
    breakdown: MetricBreakdown
    collided: bool
    steps: int
    failed: bool
    step_log: list  # (step index, x, y, heading, speed, plan id)

    def __post_init__(self):
        if self.collided and self.composite != 0.0:
            raise ValueError("collided episodes must score zero")


class ExpertPlanner:
    """The scripted demonstrator as a closed-loop planner."""

    name = "expert"

    def __init__(self, cfg):
        self.cfg = cfg
        self._mode_seed = 0

    def bind_scenario(self, scenario: Scenario):
        self._mode_seed = scenario.seed

    def plan(self, scene: SceneContext, rng) -> Trajectory:
        return expert_demonstrate(scene, self._mode_seed, self.cfg.world)


class PolicyPlanner:
    """One-step deterministic planner around a trained policy net."""

    name = "policy"

    def __init__(self, policy: extraction.PolicyNet, normalizer, cfg):
        self.policy = policy
        self.normalizer = normalizer
        self.cfg = cfg

    def plan(self, scene: SceneContext, rng) -> Trajectory:
        return extraction.plan(self.policy, scene, self.cfg.world, self.normalizer)


class DiffusionPlanner:
    """Iterative stochastic baseline: ancestral sampling from the prior."""

    name = "diffusion"

    def __init__(self, denoiser, normalizer, cfg, n_steps: int | None = None):
        self.denoiser = denoiser
        self.normalizer = normalizer
        self.cfg = cfg
        self.n_steps = n_steps if n_steps is not None else cfg.diffusion.sample_steps

    def plan(self, scene: SceneContext, rng) -> Trajectory:
        from .world import action_to_poses

        enc = encode_state(scene, self.cfg.world, self.normalizer)
        action = diffusion.ddpm_sample(
            self.denoiser,
            enc.features,
            rng,
            action_dim=3 * self.cfg.world.horizon,
            n_steps=self.n_steps,
            t_lo=self.cfg.diffusion.t_lo,
            box=self.cfg.diffusion.action_box,
            normalizer=self.normalizer,
        )
        poses = action_to_poses(action, scene.centerline, scene.ego.pose)
        return Trajectory(poses=poses, dt=self.cfg.world.dt)


class ConstantVelocityPlanner:
    """Straight-line continuation at the current speed and heading."""

    name = "const-vel"

    def __init__(self, cfg):
        self.cfg = cfg

    def plan(self, scene: SceneContext, rng) -> Trajectory:
        ego = scene.ego
        w = self.cfg.world
        k = np.arange(1, w.horizon + 1)[:, None]
        step = np.array([np.cos(ego.heading), np.sin(ego.heading)]) * ego.speed * w.dt
        poses = np.concatenate(
            [ego.pose[:2] + k * step, np.full((w.horizon, 1), ego.heading)], axis=1
        )
        return Trajectory(poses=poses, dt=w.dt)


def run_episode(
    planner,
    scenario: Scenario,
    cfg: ExperimentConfig,
    reactive: bool,
    rng: np.random.Generator,
    episode_len: int | None = None,
    replan_every: int | None = None,
) -> EpisodeResult:
    """Simulate one closed-loop episode and score the realized trace."""
    wcfg = cfg.world
    episode_len = episode_len if episode_len is not None else cfg.eval.episode_steps
    replan_every = replan_every if replan_every is not None else cfg.eval.replan_every
    idm = {
        "headway": cfg.eval.idm_headway,
        "max_accel": cfg.eval.idm_max_accel,
        "comfortable_decel": cfg.eval.idm_comfortable_decel,
        "jam_gap": cfg.eval.idm_jam_gap,
    }
    sim = EpisodeSim(scenario, wcfg, reactive=reactive, idm_params=idm)
    if hasattr(planner, "bind_scenario"):
        planner.bind_scenario(scenario)

    step_log = [(0, sim.ego.x, sim.ego.y, sim.ego.heading, sim.ego.speed, -1)]
    failed = False
    plan_id = -1
    while sim.step_idx < episode_len:
        scene = sim.scene()
        try:
            traj = planner.plan(scene, rng)
        except (ValueError, FloatingPointError):
            failed = True
            break
        plan_id += 1
        n_exec = min(replan_every, episode_len - sim.step_idx, traj.horizon)
        ok = sim.execute(traj, n_exec)
        while len(step_log) < len(sim.ego_trace):
            st = sim.ego_trace[len(step_log)]
            step_log.append((len(step_log), st.x, st.y, st.heading, st.speed, plan_id))
        if not ok or sim.goal_reached():
            break

    n_exec_total = len(sim.ego_trace) - 1
    if failed or n_exec_total == 0:
        zero = MetricBreakdown(0, 0, 0, 0, 0, 0, 0, 0, 0)
        return EpisodeResult(
            kind=scenario.kind,
            seed=scenario.seed,
            reactive=reactive,
            composite=0.0,
            breakdown=zero,
            collided=sim.collided,
            steps=n_exec_total,
            failed=True,
            step_log=step_log,
        )

    ego_poses = np.array([s.pose for s in sim.ego_trace[1:]])
    agent_arrays = []
    for i in range(len(sim.agent_valid)):
        if not sim.agent_valid[i]:
            agent_arrays.append(None)
            continue
        agent_arrays.append(
            np.array([sim.agent_trace[t][i].pose for t in range(1, n_exec_total + 1)])
        )
    composite, breakdown = score_poses(
        scenario.scene, ego_poses, wcfg.dt, agent_arrays, wcfg, cfg.scorer
    )
    return EpisodeResult(
        kind=scenario.kind,
        seed=scenario.seed,
        reactive=reactive,
        composite=composite,
        breakdown=breakdown,
        collided=sim.collided,
        steps=n_exec_total,
        failed=False,
        step_log=step_log,
    )


def suite_scenarios(n_per_kind: int, base_seed: int = 10_000) -> list[tuple[str, int]]:
    """Held-out (kind, seed) grid; seeds are offset away from training data."""
    return [
        (kind, base_seed + i) for kind in SCENARIO_KINDS for i in range(n_per_kind)
    ]


def mixed_scenarios(total: int, base_seed: int = 10_000) -> list[tuple[str, int]]:
    """``total`` scenarios cycling through the kinds."""
    return [
        (SCENARIO_KINDS[i % len(SCENARIO_KINDS)], base_seed + i) for i in range(total)
    ]


def evaluate_suite(
    planner,
    scenarios: list[tuple[str, int]],
    cfg: ExperimentConfig,
    reactive: bool,
) -> tuple[list[EpisodeResult], dict]:
    """Run the planner over the scenario list; deterministic given seeds."""
    if not scenarios:
        raise ValueError("need at least one scenario")
    results = []
    for kind, seed in scenarios:
        scenario = generate_scenario(
            seed, kind, cfg.world,
            n_steps=cfg.eval.episode_steps + cfg.world.horizon + 1,
        )
        rng = rng_stream(cfg.seed, "eval-episode", scenario_kind_id(kind), seed)
        results.append(run_episode(planner, scenario, cfg, reactive, rng))
    return results, summarize(results)


def scenario_kind_id(kind: str) -> int:
    return SCENARIO_KINDS.index(kind)


def summarize(results: list[EpisodeResult]) -> dict:
    comp = np.array([r.composite for r in results])
    out = {
        "episodes": len(results),
        "mean_composite": float(np.mean(comp)),
        "collision_rate": float(np.mean([r.collided for r in results])),
        "failure_rate": float(np.mean([r.failed for r in results])),
    }
    for name in MetricBreakdown.FIELDS:
        out[f"mean_{name}"] = float(np.mean([getattr(r.breakdown, name) for r in results]))
    return out


EPISODE_CSV_COLUMNS = (
    "planner",
    "kind",
    "seed",
    "reactive",
    "composite",
    *MetricBreakdown.FIELDS,
    "collided",
    "steps",
    "failed",
)


def write_episode_csv(path, planner_name: str, results: list[EpisodeResult], summary: dict):
    """One row per episode plus a trailing summary row; fixed column order."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        wr = csv.writer(f)
        wr.writerow(EPISODE_CSV_COLUMNS)
        for r in results:
            wr.writerow(
                [
                    planner_name,
                    r.kind,
                    r.seed,
                    int(r.reactive),
                    repr(r.composite),
                    *[repr(getattr(r.breakdown, n)) for n in MetricBreakdown.FIELDS],
                    int(r.collided),
                    r.steps,
                    int(r.failed),
                ]
            )
        wr.writerow(
            [
                planner_name,
                "summary",
                "",
                "",
                repr(summary["mean_composite"]),
                *[repr(summary[f"mean_{n}"]) for n in MetricBreakdown.FIELDS],
                repr(summary["collision_rate"]),
                "",
                repr(summary["failure_rate"]),
            ]
        )


# ---------------------------------------------------------------------------
# latency benchmark
# ---------------------------------------------------------------------------


@dataclass
class LatencyReport:
    stats: dict  # planner name -> {"mean_ns", "median_ns", "p95_ns", "n_calls", "n_warmup"}
    ratios: dict  # "a/b" -> ratio of mean latencies
    times_ns: dict  # planner name -> list of per-call wall times


def bench_latency(
    planners: list,
    scene: SceneContext,
    rng: np.random.Generator,
    n_calls: int = 200,
    n_warmup: int = 10,
) -> LatencyReport:
    """Single-threaded wall-clock timing on a shared scene fixture."""
    if n_calls < 100:
        raise ValueError("latency benchmark needs at least 100 timed calls")
    if n_warmup < 10:
        raise ValueError("latency benchmark needs at least 10 warm-up calls")
    stats = {}
    times_all = {}
    for planner in planners:
        for _ in range(n_warmup):
            planner.plan(scene, rng)
        times = np.empty(n_calls, dtype=np.int64)
        for i in range(n_calls):
            t0 = time.perf_counter_ns()
            planner.plan(scene, rng)
            times[i] = time.perf_counter_ns() - t0
        stats[planner.name] = {
            "mean_ns": float(np.mean(times)),
            "median_ns": float(np.median(times)),
            "p95_ns": float(np.percentile(times, 95)),
            "n_calls": n_calls,
            "n_warmup": n_warmup,
        }
        times_all[planner.name] = times.tolist()
    ratios = {}
    for a in stats:
        for b in stats:
            if a != b:
                ratios[f"{a}/{b}"] = stats[a]["mean_ns"] / stats[b]["mean_ns"]
    return LatencyReport(stats=stats, ratios=ratios, times_ns=times_all)


def write_latency_json(path, report: LatencyReport, extra: dict | None = None):
    payload = {"stats": report.stats, "ratios": report.ratios}
    if extra:
        payload.update(extra)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")
