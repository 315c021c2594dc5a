"""Operator surface: stage orchestration, artifact validation, reports.

Commands mirror the pipeline stages::

    gen-data       -> dataset.bin
    train-prior    -> prior.ckpt
    train-critic   -> critic_*.ckpt + policy_init.ckpt + training_log.csv
    extract-policy -> policy.ckpt + srpo_log.csv
    eval           -> eval_<planner>[_reactive].csv
    bench          -> latency.json
    report         -> report.json + report.csv

Every artifact records the configuration content hash; each command refuses
inputs whose hash does not match the active configuration. Errors print one
machine-parsable line ``ERROR <CODE>: <message>`` and exit non-zero.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import critic as critic_mod
from . import dataset as dataset_mod
from . import diffusion as diffusion_mod
from . import evaluation as eval_mod
from . import extraction as extraction_mod
from . import nets
from .config import (
    ConfigError,
    ExperimentConfig,
    apply_overrides,
    load_config,
    rng_stream,
)
from .world import FeatureNormalizer, generate_scenario

EXIT_CODES = {
    "CONFIG_INVALID": 2,
    "MISSING_ARTIFACT": 3,
    "HASH_MISMATCH": 4,
    "BAD_FORMAT": 5,
    "PRECONDITION": 6,
}

PLANNER_NAMES = ("policy", "diffusion", "expert", "awr-init", "const-vel")


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def artifact_paths(cfg: ExperimentConfig) -> dict:
    out = Path(cfg.out_dir)
    return {
        "dataset": out / "dataset.bin",
        "prior": out / "prior.ckpt",
        "critic_value": out / "critic_value.ckpt",
        "critic_q1": out / "critic_q1.ckpt",
        "critic_q2": out / "critic_q2.ckpt",
        "critic_q1_target": out / "critic_q1_target.ckpt",
        "critic_q2_target": out / "critic_q2_target.ckpt",
        "policy_init": out / "policy_init.ckpt",
        "policy": out / "policy.ckpt",
        "training_log": out / "training_log.csv",
        "srpo_log": out / "srpo_log.csv",
        "latency": out / "latency.json",
        "report_json": out / "report.json",
        "report_csv": out / "report.csv",
    }


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError(
            "MISSING_ARTIFACT", f"{what} not found at {path}; run the producing stage first"
        )
    return path


def _check_hash(stamped: str, cfg: ExperimentConfig, stage: str, what: str):
    want = cfg.stage_hash(stage)
    if stamped != want:
        raise CliError(
            "HASH_MISMATCH",
            f"{what} was produced under a config whose {stage!r}-stage hash is "
            f"{stamped[:12]}..., the current config hashes to {want[:12]}...",
        )


def _load_checkpoint(path: Path, what: str):
    try:
        return nets.load_checkpoint(path)
    except nets.CheckpointError as e:
        raise CliError("BAD_FORMAT", f"{what}: {e}") from e


def _load_dataset(cfg: ExperimentConfig):
    paths = artifact_paths(cfg)
    _require(paths["dataset"], "dataset")
    try:
        ds = dataset_mod.load_dataset(paths["dataset"], expected_world_hash=cfg.world_hash())
    except dataset_mod.DatasetError as e:
        code = "HASH_MISMATCH" if "hash mismatch" in str(e) else "BAD_FORMAT"
        raise CliError(code, f"dataset: {e}") from e
    return ds


def cmd_gen_data(cfg: ExperimentConfig) -> int:
    paths = artifact_paths(cfg)
    ds = dataset_mod.build_buffer(cfg, log=lambda m: print(m, file=sys.stderr))
    dataset_mod.save_dataset(ds, paths["dataset"])
    print(
        f"wrote {paths['dataset']} ({len(ds)} transitions, {ds.skipped} scenarios skipped, "
        f"mean reward {ds.rewards.mean():.4f})"
    )
    return 0


def cmd_train_prior(cfg: ExperimentConfig) -> int:
    paths = artifact_paths(cfg)
    ds = _load_dataset(cfg)
    rng = rng_stream(cfg.seed, "train-prior")
    den, losses = diffusion_mod.train_denoiser(
        ds.states,
        ds.actions,
        cfg.nets.hidden,
        cfg.diffusion.train_steps,
        cfg.diffusion.batch_size,
        cfg.diffusion.lr,
        rng,
        cfg.diffusion.t_lo,
        cfg.diffusion.t_hi,
    )
    nets.save_checkpoint(
        paths["prior"],
        den.spec,
        den.params,
        extra={
            "role": "denoiser",
            "state_dim": den.state_dim,
            "action_dim": den.action_dim,
            "schedule": den.schedule.name,
            "t_lo": cfg.diffusion.t_lo,
            "t_hi": cfg.diffusion.t_hi,
            "normalizer": ds.normalizer.to_dict(),
            "normalizer_id": ds.normalizer.norm_id,
            "config_hash": cfg.content_hash(),
            "stage_hash": cfg.stage_hash("prior"),
            "seed": cfg.seed,
        },
    )
    print(
        f"wrote {paths['prior']} (final loss {float(np.mean(losses[-50:])):.4f}, "
        f"zero-predictor baseline {ds.actions.shape[1]})"
    )
    return 0


def _load_prior(cfg: ExperimentConfig):
    paths = artifact_paths(cfg)
    spec, params, extra, _ = _load_checkpoint(_require(paths["prior"], "prior checkpoint"), "prior")
    if extra.get("role") != "denoiser":
        raise CliError("BAD_FORMAT", "prior checkpoint does not hold a denoiser")
    _check_hash(extra["stage_hash"], cfg, "prior", "prior checkpoint")
    den = diffusion_mod.Denoiser(
        spec=spec,
        params=params,
        state_dim=int(extra["state_dim"]),
        action_dim=int(extra["action_dim"]),
        schedule=diffusion_mod.CosineSchedule(),
    )
    return den, FeatureNormalizer.from_dict(extra["normalizer"]), extra


def cmd_train_critic(cfg: ExperimentConfig) -> int:
    paths = artifact_paths(cfg)
    ds = _load_dataset(cfg)
    rng = rng_stream(cfg.seed, "train-critic")
    policy = extraction_mod.PolicyNet.create(
        ds.states.shape[1], ds.actions.shape[1], cfg.nets.hidden,
        cfg.diffusion.action_box, rng,
    )
    bundle, logs = critic_mod.train_critic(ds, policy, cfg.critic, rng, hidden=cfg.nets.critic_hidden)
    stamp = {
        "config_hash": cfg.content_hash(),
        "stage_hash": cfg.stage_hash("critic"),
        "normalizer_id": ds.normalizer.norm_id,
        "seed": cfg.seed,
    }
    for key, spec, params in (
        ("critic_value", bundle.v_spec, bundle.v_params),
        ("critic_q1", bundle.q_spec, bundle.q1_params),
        ("critic_q2", bundle.q_spec, bundle.q2_params),
        ("critic_q1_target", bundle.q_spec, bundle.q1_target),
        ("critic_q2_target", bundle.q_spec, bundle.q2_target),
    ):
        nets.save_checkpoint(paths[key], spec, params, extra={"role": key, **stamp})
    nets.save_checkpoint(
        paths["policy_init"],
        policy.spec,
        policy.params,
        extra={"role": "policy_init", "normalizer": ds.normalizer.to_dict(), **stamp},
    )
    with open(paths["training_log"], "w", newline="", encoding="utf-8") as f:
        wr = csv.writer(f)
        wr.writerow(["step", "value_loss", "q_loss", "awr_loss"])
        for row in logs:
            wr.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])
    print(
        f"wrote critic bundle and {paths['policy_init']} "
        f"(final losses v={logs[-1][1]:.5f} q={logs[-1][2]:.5f} awr={logs[-1][3]:.5f})"
    )
    return 0


def _load_critic(cfg: ExperimentConfig):
    paths = artifact_paths(cfg)
    parts = {}
    norm_ids = set()
    for key in ("critic_value", "critic_q1", "critic_q2", "critic_q1_target", "critic_q2_target"):
        spec, params, extra, _ = _load_checkpoint(
            _require(paths[key], f"{key} checkpoint"), key
        )
        _check_hash(extra["stage_hash"], cfg, "critic", key)
        norm_ids.add(extra["normalizer_id"])
        parts[key] = (spec, params)
    bundle = critic_mod.CriticBundle(
        v_spec=parts["critic_value"][0],
        v_params=parts["critic_value"][1],
        q_spec=parts["critic_q1"][0],
        q1_params=parts["critic_q1"][1],
        q2_params=parts["critic_q2"][1],
        q1_target=parts["critic_q1_target"][1],
        q2_target=parts["critic_q2_target"][1],
        polyak=cfg.critic.polyak,
    )
    return bundle, norm_ids


def _load_policy(cfg: ExperimentConfig, key: str):
    paths = artifact_paths(cfg)
    spec, params, extra, _ = _load_checkpoint(
        _require(paths[key], f"{key} checkpoint"), key
    )
    stage = "policy" if key == "policy" else "critic"
    _check_hash(extra["stage_hash"], cfg, stage, key)
    policy = extraction_mod.PolicyNet(spec=spec, params=params)
    return policy, FeatureNormalizer.from_dict(extra["normalizer"]), extra


def cmd_extract_policy(cfg: ExperimentConfig) -> int:
    paths = artifact_paths(cfg)
    ds = _load_dataset(cfg)
    den, den_norm, den_extra = _load_prior(cfg)
    bundle, critic_norm_ids = _load_critic(cfg)
    theta_init, init_norm, init_extra = _load_policy(cfg, "policy_init")
    ids = {ds.normalizer.norm_id, den_extra["normalizer_id"], init_extra["normalizer_id"]}
    ids |= critic_norm_ids
    if len(ids) != 1:
        raise CliError(
            "PRECONDITION",
            "normalization statistics differ across dataset/prior/critic/policy-init",
        )
    rng = rng_stream(cfg.seed, "extract-policy")
    policy, rows = extraction_mod.extract_policy(ds, bundle, den, theta_init, cfg.srpo, rng)
    nets.save_checkpoint(
        paths["policy"],
        policy.spec,
        policy.params,
        extra={
            "role": "policy",
            "normalizer": ds.normalizer.to_dict(),
            "normalizer_id": ds.normalizer.norm_id,
            "config_hash": cfg.content_hash(),
            "stage_hash": cfg.stage_hash("policy"),
            "seed": cfg.seed,
            "steps": cfg.srpo.train_steps,
            "source_prior_digest": den.digest(),
            "source_critic_digest": bundle.digest(),
            "theta_init_digest": theta_init.digest(),
        },
    )
    with open(paths["srpo_log"], "w", newline="", encoding="utf-8") as f:
        wr = csv.writer(f)
        wr.writerow(["step", "q_grad_norm", "score_grad_norm", "mean_policy_q"])
        for row in rows:
            wr.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])
    print(f"wrote {paths['policy']} (mean policy Q {rows[0][3]:.4f} -> {rows[-1][3]:.4f})")
    return 0


def build_planner(cfg: ExperimentConfig, name: str):
    if name == "expert":
        return eval_mod.ExpertPlanner(cfg)
    if name == "const-vel":
        return eval_mod.ConstantVelocityPlanner(cfg)
    if name == "diffusion":
        den, normalizer, _ = _load_prior(cfg)
        return eval_mod.DiffusionPlanner(den, normalizer, cfg)
    if name in ("policy", "awr-init"):
        key = "policy" if name == "policy" else "policy_init"
        policy, normalizer, _ = _load_policy(cfg, key)
        planner = eval_mod.PolicyPlanner(policy, normalizer, cfg)
        planner.name = name
        return planner
    raise CliError("CONFIG_INVALID", f"unknown planner {name!r}")


def cmd_eval(cfg: ExperimentConfig, planner_name: str, reactive: bool, total: int | None) -> int:
    paths = artifact_paths(cfg)
    planner = build_planner(cfg, planner_name)
    if total is None:
        scenarios = eval_mod.suite_scenarios(cfg.eval.episodes_per_kind)
    else:
        scenarios = eval_mod.mixed_scenarios(total)
    results, summary = eval_mod.evaluate_suite(planner, scenarios, cfg, reactive)
    suffix = "_reactive" if reactive else ""
    path = Path(cfg.out_dir) / f"eval_{planner_name}{suffix}.csv"
    eval_mod.write_episode_csv(path, planner_name, results, summary)
    print(
        f"wrote {path} (mean composite {summary['mean_composite']:.4f}, "
        f"collision rate {summary['collision_rate']:.2f})"
    )
    return 0


def cmd_bench(cfg: ExperimentConfig) -> int:
    paths = artifact_paths(cfg)
    policy_planner = build_planner(cfg, "policy")
    den, normalizer, _ = _load_prior(cfg)
    n = cfg.diffusion.sample_steps
    sampler = eval_mod.DiffusionPlanner(den, normalizer, cfg, n_steps=n)
    sampler.name = f"diffusion-{n}"
    sampler2 = eval_mod.DiffusionPlanner(den, normalizer, cfg, n_steps=2 * n)
    sampler2.name = f"diffusion-{2 * n}"
    scenario = generate_scenario(777, "lead_stop", cfg.world)
    rng = rng_stream(cfg.seed, "bench")
    report = eval_mod.bench_latency(
        [policy_planner, sampler, sampler2],
        scenario.scene,
        rng,
        n_calls=cfg.bench.n_calls,
        n_warmup=cfg.bench.n_warmup,
    )
    eval_mod.write_latency_json(
        paths["latency"], report, extra={"config_hash": cfg.content_hash()}
    )
    key = f"diffusion-{n}/policy"
    print(f"wrote {paths['latency']} (mean-latency ratio {key} = {report.ratios[key]:.2f})")
    return 0


def cmd_report(cfg: ExperimentConfig) -> int:
    paths = artifact_paths(cfg)
    out = Path(cfg.out_dir)
    eval_files = sorted(out.glob("eval_*.csv"))
    if not eval_files:
        raise CliError("MISSING_ARTIFACT", f"no eval_*.csv files under {out}; run eval first")
    episodes = []
    summaries = {}
    for path in eval_files:
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        for row in rows:
            if row["kind"] == "summary":
                tag = row["planner"] + ("_reactive" if path.stem.endswith("_reactive") else "")
                summaries[tag] = {
                    "mean_composite": float(row["composite"]),
                    "collision_rate": float(row["collided"]),
                    **{k: float(row[k]) for k in
                       ("no_collision", "drivable_area", "direction", "speed_limit",
                        "progress", "ttc", "comfort", "lane_following", "proximity")},
                }
            else:
                episodes.append(row)
    payload = {"config_hash": cfg.content_hash(), "planners": summaries}
    if paths["latency"].exists():
        with open(paths["latency"], encoding="utf-8") as f:
            payload["latency"] = json.load(f)
    with open(paths["report_json"], "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")
    with open(paths["report_csv"], "w", newline="", encoding="utf-8") as f:
        wr = csv.writer(f)
        wr.writerow(eval_mod.EPISODE_CSV_COLUMNS)
        for row in episodes:
            wr.writerow([row[c] for c in eval_mod.EPISODE_CSV_COLUMNS])
    print(f"wrote {paths['report_json']} and {paths['report_csv']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scoredrive",
        description="Score-regularized distillation of a diffusion driving prior.",
    )
    parser.add_argument("--config", help="YAML configuration file (defaults built in)")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a scalar config field, e.g. --set srpo.temperature=0.1",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", help="build and save the scored replay buffer")
    sub.add_parser("train-prior", help="train the diffusion behavior prior")
    sub.add_parser("train-critic", help="train value/Q critics and the AWR policy init")
    sub.add_parser("extract-policy", help="run score-regularized policy extraction")
    p_eval = sub.add_parser("eval", help="closed-loop evaluation of one planner")
    p_eval.add_argument("--planner", required=True, choices=PLANNER_NAMES)
    p_eval.add_argument("--reactive", action="store_true")
    p_eval.add_argument("--total", type=int, default=None,
                        help="evaluate this many mixed scenarios instead of the per-kind grid")
    sub.add_parser("bench", help="latency benchmark: policy vs iterative sampler")
    sub.add_parser("report", help="bundle eval and bench outputs into report.json/csv")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.set:
            cfg = apply_overrides(cfg, args.set)
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train-prior":
            return cmd_train_prior(cfg)
        if args.command == "train-critic":
            return cmd_train_critic(cfg)
        if args.command == "extract-policy":
            return cmd_extract_policy(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.planner, args.reactive, args.total)
        if args.command == "bench":
            return cmd_bench(cfg)
        if args.command == "report":
            return cmd_report(cfg)
        raise CliError("CONFIG_INVALID", f"unknown command {args.command}")
    except CliError as e:
        print(f"ERROR {e.code}: {e}", file=sys.stderr)
        return EXIT_CODES.get(e.code, 1)
    except ConfigError as e:
        print(f"ERROR CONFIG_INVALID: {e}", file=sys.stderr)
        return EXIT_CODES["CONFIG_INVALID"]


if __name__ == "__main__":
    sys.exit(main())
