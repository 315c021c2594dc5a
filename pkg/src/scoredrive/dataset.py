"""Stage 1: build, normalize, persist, and load the scored replay buffer.

Each scenario is driven by the scripted expert under receding-horizon
execution (``executed_steps`` world steps per decision). Every decision
contributes one transition: the encoded scene, the expert's planned
trajectory as an ego-frame action vector, its composite score against the
scripted agent futures as the reward, the encoded scene after execution, and
a terminal flag. Statistics are computed over the finished buffer and all
states/actions are stored normalized.

The file layout is little-endian and fully self-describing: magic, version,
meta JSON, the record arrays in fixed order, then the statistics block.
Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .config import SCENARIO_KINDS, ExperimentConfig, rng_stream
from .scoring import score
from .world import (
    KIND_IDS,
    action_to_poses,
    EpisodeSim,
    FeatureNormalizer,
    Trajectory,
    encode_state_raw,
    expert_demonstrate,
    generate_scenario,
    poses_to_action,
)

DATASET_MAGIC = b"SDRB001\n"
DATASET_VERSION = 1


class DatasetError(Exception):
    """Raised when a dataset file is malformed or inconsistent."""


@dataclass
class Transition:
    s_enc: np.ndarray
    action: np.ndarray
    reward: float
    next_s_enc: np.ndarray
    done: bool


@dataclass
class ReplayDataset:
    """In-memory buffer; all vectors normalized by ``normalizer``."""

    states: np.ndarray  # (N, D_s)
    actions: np.ndarray  # (N, A)
    rewards: np.ndarray  # (N,)
    next_states: np.ndarray  # (N, D_s)
    dones: np.ndarray  # (N,) bool
    kind_ids: np.ndarray  # (N,) uint8 provenance
    seeds: np.ndarray  # (N,) uint32
    step_idx: np.ndarray  # (N,) uint16
    normalizer: FeatureNormalizer
    world_hash: str
    config_hash: str
    skipped: int = 0

    def __len__(self) -> int:
        return self.states.shape[0]

    def transition(self, i: int) -> Transition:
        return Transition(
            s_enc=self.states[i],
            action=self.actions[i],
            reward=float(self.rewards[i]),
            next_s_enc=self.next_states[i],
            done=bool(self.dones[i]),
        )


def build_buffer(cfg: ExperimentConfig, log=None) -> ReplayDataset:
    """Generate, score, and normalize the full replay buffer."""
    wcfg, dcfg = cfg.world, cfg.dataset
    if dcfg.scenarios_per_kind < 1:
        raise ValueError("need at least one scenario per kind")
    decisions = dcfg.episode_steps // dcfg.executed_steps

    rows = {k: [] for k in ("s", "a", "r", "s2", "done", "kind", "seed", "step")}
    skipped = 0
    for kind in SCENARIO_KINDS:
        for seed in range(dcfg.scenarios_per_kind):
            try:
                recs = _run_scenario(kind, seed, cfg, decisions)
            except (ValueError, FloatingPointError) as e:
                skipped += 1
                if log:
                    log(f"skipping scenario kind={kind} seed={seed}: {e}")
                continue
            for s, a, r, s2, done, step in recs:
                rows["s"].append(s)
                rows["a"].append(a)
                rows["r"].append(r)
                rows["s2"].append(s2)
                rows["done"].append(done)
                rows["kind"].append(KIND_IDS[kind])
                rows["seed"].append(seed)
                rows["step"].append(step)

    if not rows["s"]:
        raise DatasetError("no transitions were produced")
    states = np.asarray(rows["s"], dtype=np.float64)
    actions = np.asarray(rows["a"], dtype=np.float64)
    normalizer = FeatureNormalizer(
        state_mean=states.mean(axis=0),
        state_std=states.std(axis=0),
        action_mean=actions.mean(axis=0),
        action_std=actions.std(axis=0),
    )
    return ReplayDataset(
        states=normalizer.norm_state(states),
        actions=normalizer.norm_action(actions),
        rewards=np.asarray(rows["r"], dtype=np.float64),
        next_states=normalizer.norm_state(np.asarray(rows["s2"], dtype=np.float64)),
        dones=np.asarray(rows["done"], dtype=bool),
        kind_ids=np.asarray(rows["kind"], dtype=np.uint8),
        seeds=np.asarray(rows["seed"], dtype=np.uint32),
        step_idx=np.asarray(rows["step"], dtype=np.uint16),
        normalizer=normalizer,
        world_hash=cfg.world_hash(),
        config_hash=cfg.content_hash(),
        skipped=skipped,
    )


def _run_scenario(kind: str, seed: int, cfg: ExperimentConfig, decisions: int):
    """One expert-driven episode; yields raw (s, a, r, s', done, step) rows.

    Execution applies a small seeded pose jitter so consecutive decisions
    start slightly off the nominal expert path; the next decision's expert
    plan then demonstrates the recovery. This widens the visited state
    manifold, which downstream policies need in closed loop.
    """
    wcfg, dcfg = cfg.world, cfg.dataset
    scenario = generate_scenario(
        seed, kind, wcfg, n_steps=dcfg.episode_steps + wcfg.horizon + 1
    )
    sim = EpisodeSim(scenario, wcfg, reactive=False)
    jitter_rng = rng_stream(cfg.seed, "exec-jitter", KIND_IDS[kind], seed)
    out = []
    for d in range(decisions):
        scene = sim.scene()
        s_raw = encode_state_raw(scene, wcfg)
        traj = expert_demonstrate(scene, seed, wcfg)
        reward, _ = score(scene, traj, sim.agent_futures(wcfg.horizon), wcfg, cfg.scorer)
        action_raw = poses_to_action(traj.poses, scene.centerline, scene.ego.pose)
        executed = traj
        if dcfg.exec_jitter_pos > 0.0:
            noisy = traj.poses.copy()
            k = dcfg.executed_steps
            noisy[:k, :2] += jitter_rng.normal(0.0, dcfg.exec_jitter_pos, size=(k, 2))
            noisy[:k, 2] += jitter_rng.normal(0.0, dcfg.exec_jitter_heading, size=k)
            executed = Trajectory(poses=noisy, dt=traj.dt)
        sim.execute(executed, dcfg.executed_steps)
        s2_raw = encode_state_raw(sim.scene(), wcfg)
        done = d == decisions - 1 or sim.goal_reached() or sim.collided
        out.append((s_raw, action_raw, reward, s2_raw, done, d))
        if done:
            break
    return out


def rescore_transition(ds: ReplayDataset, i: int, cfg: ExperimentConfig) -> float:
    """Recompute a stored reward by regenerating the scenario and scoring the
    de-normalized stored action against the scripted agent futures."""
    kind = SCENARIO_KINDS[int(ds.kind_ids[i])]
    seed = int(ds.seeds[i])
    target = int(ds.step_idx[i])
    wcfg, dcfg = cfg.world, cfg.dataset
    scenario = generate_scenario(
        seed, kind, wcfg, n_steps=dcfg.episode_steps + wcfg.horizon + 1
    )
    sim = EpisodeSim(scenario, wcfg, reactive=False)
    jitter_rng = rng_stream(cfg.seed, "exec-jitter", KIND_IDS[kind], seed)
    for d in range(target + 1):
        scene = sim.scene()
        if d == target:
            action_raw = ds.normalizer.denorm_action(ds.actions[i])
            traj = Trajectory(
                poses=action_to_poses(action_raw, scene.centerline, scene.ego.pose),
                dt=wcfg.dt,
            )
            reward, _ = score(
                scene, traj, sim.agent_futures(wcfg.horizon), wcfg, cfg.scorer
            )
            return reward
        traj = expert_demonstrate(scene, seed, wcfg)
        executed = traj
        if dcfg.exec_jitter_pos > 0.0:
            noisy = traj.poses.copy()
            k = dcfg.executed_steps
            noisy[:k, :2] += jitter_rng.normal(0.0, dcfg.exec_jitter_pos, size=(k, 2))
            noisy[:k, 2] += jitter_rng.normal(0.0, dcfg.exec_jitter_heading, size=k)
            executed = Trajectory(poses=noisy, dt=traj.dt)
        sim.execute(executed, dcfg.executed_steps)
    raise DatasetError("unreachable decision index")


def sample_batch(ds: ReplayDataset, batch_size: int, rng: np.random.Generator) -> dict:
    """Uniform sampling with replacement."""
    if len(ds) == 0:
        raise DatasetError("cannot sample from an empty dataset")
    idx = rng.integers(0, len(ds), size=batch_size)
    return {
        "states": ds.states[idx],
        "actions": ds.actions[idx],
        "rewards": ds.rewards[idx],
        "next_states": ds.next_states[idx],
        "dones": ds.dones[idx],
    }


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_dataset(ds: ReplayDataset, path) -> None:
    n = len(ds)
    meta = {
        "d_s": int(ds.states.shape[1]),
        "action_dim": int(ds.actions.shape[1]),
        "count": n,
        "world_hash": ds.world_hash,
        "config_hash": ds.config_hash,
        "skipped": ds.skipped,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", DATASET_VERSION))
        f.write(struct.pack("<Q", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(ds.states.astype("<f8").tobytes())
        f.write(ds.actions.astype("<f8").tobytes())
        f.write(ds.rewards.astype("<f8").tobytes())
        f.write(ds.next_states.astype("<f8").tobytes())
        f.write(ds.dones.astype("<u1").tobytes())
        f.write(ds.kind_ids.astype("<u1").tobytes())
        f.write(ds.seeds.astype("<u4").tobytes())
        f.write(ds.step_idx.astype("<u2").tobytes())
        nz = ds.normalizer
        for arr in (nz.state_mean, nz.state_std, nz.action_mean, nz.action_std):
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_dataset(path, expected_world_hash: str | None = None) -> ReplayDataset:
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def take(nbytes, what):
        nonlocal off
        if off + nbytes > len(blob):
            raise DatasetError(f"truncated dataset file while reading {what}")
        chunk = blob[off : off + nbytes]
        off += nbytes
        return chunk

    if take(len(DATASET_MAGIC), "magic") != DATASET_MAGIC:
        raise DatasetError("bad magic bytes: not a replay dataset file")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != DATASET_VERSION:
        raise DatasetError(f"unsupported dataset version {version}")
    (meta_len,) = struct.unpack("<Q", take(8, "meta length"))
    try:
        meta = json.loads(take(meta_len, "meta json").decode("utf-8"))
        d_s = int(meta["d_s"])
        action_dim = int(meta["action_dim"])
        count = int(meta["count"])
    except (ValueError, KeyError) as e:
        raise DatasetError(f"invalid dataset metadata: {e}") from e

    def arr(dtype, shape, what):
        dt = np.dtype(dtype)
        size = dt.itemsize * int(np.prod(shape))
        return np.frombuffer(take(size, what), dtype=dt).reshape(shape).copy()

    states = arr("<f8", (count, d_s), "states")
    actions = arr("<f8", (count, action_dim), "actions")
    rewards = arr("<f8", (count,), "rewards")
    next_states = arr("<f8", (count, d_s), "next states")
    dones = arr("<u1", (count,), "done flags").astype(bool)
    kind_ids = arr("<u1", (count,), "kind ids")
    seeds = arr("<u4", (count,), "seeds")
    step_idx = arr("<u2", (count,), "step indices")
    stats = [arr("<f8", (dim,), name) for dim, name in
             ((d_s, "state mean"), (d_s, "state std"),
              (action_dim, "action mean"), (action_dim, "action std"))]
    if off != len(blob):
        raise DatasetError("trailing bytes after dataset payload")
    if not np.isfinite(states).all() or not np.isfinite(actions).all():
        raise DatasetError("non-finite values in dataset records")
    if np.any(rewards < 0.0) or np.any(rewards > 1.0):
        raise DatasetError("rewards outside [0, 1]")
    if expected_world_hash is not None and meta["world_hash"] != expected_world_hash:
        raise DatasetError(
            "world-config hash mismatch: dataset was built with "
            f"{meta['world_hash'][:12]}..., current config is "
            f"{expected_world_hash[:12]}..."
        )
    return ReplayDataset(
        states=states,
        actions=actions,
        rewards=rewards,
        next_states=next_states,
        dones=dones,
        kind_ids=kind_ids,
        seeds=seeds,
        step_idx=step_idx,
        normalizer=FeatureNormalizer(
            state_mean=stats[0], state_std=stats[1],
            action_mean=stats[2], action_std=stats[3],
        ),
        world_hash=meta["world_hash"],
        config_hash=meta["config_hash"],
        skipped=int(meta.get("skipped", 0)),
    )
