"""Experiment configuration: one nested structure owning every constant.

The whole pipeline is parameterized by a single ``ExperimentConfig``. It can
be loaded from a YAML file (unknown keys are rejected with their dotted
path), overridden with ``section.field=value`` strings, and hashed; the hash
is embedded in every artifact so stages can refuse mismatched inputs.

All randomness is derived from ``seed`` through named streams
(:func:`rng_stream`), which makes the full pipeline reproducible
byte-for-byte.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import zlib
from dataclasses import dataclass, field
from typing import get_args, get_origin

import numpy as np
import yaml

SCENARIO_KINDS = ("lane_follow", "lead_stop", "obstacle_pass", "merge")


class ConfigError(Exception):
    """Raised on malformed configuration input."""


@dataclass
class WorldConfig:
    dt: float = 0.5
    horizon: int = 16
    history_len: int = 4
    max_agents: int = 4
    state_dim: int = 32
    wheelbase: float = 3.0
    v_max: float = 15.0
    steer_max: float = 0.5
    corridor_half_width: float = 5.0
    agent_half_length: float = 2.25
    agent_half_width: float = 1.0
    goal_arc_length: float = 150.0
    feasibility_margin: float = 1.0
    # scripted expert: IDM longitudinal + pure-pursuit lateral
    expert_headway: float = 1.5
    expert_max_accel: float = 2.0
    expert_decel: float = 3.0
    expert_emergency_decel: float = 6.0
    expert_jam_gap: float = 4.5
    expert_lookahead_gain: float = 0.8
    expert_lookahead_min: float = 4.0
    expert_lookahead_max: float = 12.0


@dataclass
class ScorerConfig:
    weight_ttc: float = 5.0
    weight_comfort: float = 5.0
    weight_proximity: float = 5.0
    weight_progress: float = 2.0
    weight_speed_limit: float = 4.0
    weight_lane_following: float = 2.0
    ttc_safe: float = 3.0
    ttc_critical: float = 0.95
    max_abs_accel: float = 4.0
    max_abs_jerk: float = 8.0
    max_abs_yaw_rate: float = 0.8
    lane_tolerance: float = 1.0
    proximity_speed_factor: float = 2.0
    proximity_base_gap: float = 3.0
    direction_tolerance: float = 0.5
    conflict_lateral_gap: float = 3.0


@dataclass
class NetsConfig:
    hidden: tuple[int, ...] = (256, 256)  # denoiser and policy (latency-compared pair)
    critic_hidden: tuple[int, ...] = (128, 128)


@dataclass
class DiffusionConfig:
    t_lo: float = 0.02
    t_hi: float = 0.98
    sample_steps: int = 20
    action_box: float = 4.0
    train_steps: int = 12000
    batch_size: int = 256
    lr: float = 1e-3


@dataclass
class CriticConfig:
    expectile: float = 0.9
    discount: float = 0.99
    awr_temperature: float = 3.0
    awr_weight_clip: float = 100.0
    polyak: float = 0.005
    value_lr: float = 3e-4
    q_lr: float = 3e-4
    awr_lr: float = 1e-3
    train_steps: int = 5000
    batch_size: int = 128

    def __post_init__(self):
        if not 0.0 < self.expectile < 1.0:
            raise ConfigError("expectile must lie in (0, 1)")
        if not 0.0 <= self.discount < 1.0:
            raise ConfigError("discount must lie in [0, 1)")
        if self.awr_weight_clip <= 0.0:
            raise ConfigError("awr_weight_clip must be positive")


@dataclass
class SrpoConfig:
    temperature: float = 0.05
    policy_lr: float = 3e-4
    score_samples: int = 1
    t_lo: float = 0.02
    t_hi: float = 0.98
    train_steps: int = 2000
    batch_size: int = 128

    def __post_init__(self):
        if self.temperature <= 0.0:
            raise ConfigError("temperature must be positive")
        if self.score_samples < 1:
            raise ConfigError("score_samples must be >= 1")
        if not 0.0 < self.t_lo < self.t_hi < 1.0:
            raise ConfigError("need 0 < t_lo < t_hi < 1")


@dataclass
class DatasetConfig:
    scenarios_per_kind: int = 100
    executed_steps: int = 2
    episode_steps: int = 20
    exec_jitter_pos: float = 0.15
    exec_jitter_heading: float = 0.02


@dataclass
class EvalConfig:
    episode_steps: int = 40
    replan_every: int = 2
    episodes_per_kind: int = 12
    idm_headway: float = 2.0
    idm_max_accel: float = 2.0
    idm_comfortable_decel: float = 3.0
    idm_jam_gap: float = 2.0


@dataclass
class BenchConfig:
    n_calls: int = 200
    n_warmup: int = 10


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    world: WorldConfig = field(default_factory=WorldConfig)
    scorer: ScorerConfig = field(default_factory=ScorerConfig)
    nets: NetsConfig = field(default_factory=NetsConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    critic: CriticConfig = field(default_factory=CriticConfig)
    srpo: SrpoConfig = field(default_factory=SrpoConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    @property
    def action_dim(self) -> int:
        return 3 * self.world.horizon

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def content_hash(self) -> str:
        """Hash of everything that affects produced artifacts.

        ``out_dir`` is excluded: moving outputs must not invalidate them.
        """
        d = self.to_dict()
        d.pop("out_dir")
        return _digest(d)

    def world_hash(self) -> str:
        """Hash of the sections that determine dataset contents."""
        return self.stage_hash("dataset")

    def stage_hash(self, stage: str) -> str:
        """Hash of the config sections a pipeline stage depends on.

        Downstream commands validate inputs against the producing stage's
        hash, so changing e.g. only the extraction temperature invalidates
        the policy but not the dataset, prior, or critic.
        """
        d = self.to_dict()
        return _digest({k: d[k] for k in STAGE_DEPS[stage]})


STAGE_DEPS = {
    "dataset": ("seed", "world", "scorer", "dataset"),
    "prior": ("seed", "world", "scorer", "dataset", "nets", "diffusion"),
    "critic": ("seed", "world", "scorer", "dataset", "nets", "critic"),
    "policy": (
        "seed", "world", "scorer", "dataset", "nets", "diffusion", "critic", "srpo",
    ),
}


def _digest(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def rng_stream(root_seed: int, name: str, *indices: int) -> np.random.Generator:
    """Deterministic per-purpose random stream derived from the root seed."""
    key = (zlib.crc32(name.encode("utf-8")),) + tuple(
        int(i) & 0xFFFFFFFF for i in indices
    )
    return np.random.default_rng(np.random.SeedSequence(entropy=root_seed, spawn_key=key))


# ---------------------------------------------------------------------------
# strict (unknown-key rejecting) construction from nested dicts / YAML
# ---------------------------------------------------------------------------


def _coerce(value, typ, path):
    origin = get_origin(typ)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        inner = get_args(typ)[0]
        return tuple(_coerce(v, inner, path) for v in value)
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return int(value)
    if typ is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type {typ}")


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config key(s): {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for name, f in fields.items():
        if name not in data:
            continue
        sub_path = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(f.type) or (
            isinstance(f.type, str) and f.type in _SECTION_TYPES
        ):
            sub_cls = _SECTION_TYPES[f.type] if isinstance(f.type, str) else f.type
            kwargs[name] = _build(sub_cls, data[name], sub_path)
        else:
            typ = _FIELD_TYPES[cls.__name__][name]
            kwargs[name] = _coerce(data[name], typ, sub_path)
    return cls(**kwargs)


_SECTION_TYPES = {
    "WorldConfig": WorldConfig,
    "ScorerConfig": ScorerConfig,
    "NetsConfig": NetsConfig,
    "DiffusionConfig": DiffusionConfig,
    "CriticConfig": CriticConfig,
    "SrpoConfig": SrpoConfig,
    "DatasetConfig": DatasetConfig,
    "EvalConfig": EvalConfig,
    "BenchConfig": BenchConfig,
}

def _field_types():
    import typing

    out = {}
    for cls in (ExperimentConfig, *(_SECTION_TYPES.values())):
        out[cls.__name__] = typing.get_type_hints(cls)
    return out


_FIELD_TYPES = _field_types()


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "")


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {path}: {e}") from e
    if data is None:
        data = {}
    return from_dict(data)


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply ``section.field=value`` strings on top of an existing config."""
    data = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config key: {key}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key: {key}")
        node[parts[-1]] = yaml.safe_load(raw)
    return from_dict(data)


def save_yaml(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(_listify(cfg.to_dict()), f, sort_keys=False)


def _listify(node):
    if isinstance(node, dict):
        return {k: _listify(v) for k, v in node.items()}
    if isinstance(node, tuple):
        return [_listify(v) for v in node]
    return node
