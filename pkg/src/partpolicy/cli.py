"""Command-line surface: build-data, train, rollout, route-heatmap, latency.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
Every output artifact embeds the config it was produced with.
"""

from __future__ import annotations

import argparse
import pathlib
import sys

import numpy as np
import yaml

from . import synthworld
from .config import ConfigError, RunConfig, load_run_config
from .data import DataError, WindowDataset, build_dataset
from .diagnostics import export_heatmaps, measure_latency, read_routing_log, write_routing_log
from .policy import SamplerConfig, WholeBodyPolicy, rollout_episode
from .training import (
    NumericalError,
    Trainer,
    format_log_record,
    LOG_FIELDS,
    load_checkpoint,
    save_checkpoint,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _dump_config(cfg: RunConfig, path: pathlib.Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=False)


def cmd_build_data(cfg: RunConfig) -> int:
    out = pathlib.Path(cfg.data.dataset_dir)
    manifest = build_dataset(
        out,
        episodes_per_embodiment=cfg.data.episodes_per_embodiment,
        tasks=cfg.data.tasks,
        seed=cfg.data.seed,
        episodes_per_shard=cfg.data.episodes_per_shard,
        episode_len=cfg.data.episode_len,
        action_noise=cfg.data.action_noise,
    )
    _dump_config(cfg, out / "build_config.yaml")
    print(f"wrote dataset manifest: {manifest}")
    return EXIT_OK


def _build_policy(cfg: RunConfig, dataset: WindowDataset) -> WholeBodyPolicy:
    policy = WholeBodyPolicy(cfg.model)
    for ei in range(dataset.num_embodiments):
        policy.register_embodiment(dataset.spec(ei))
    return policy


def cmd_train(cfg: RunConfig) -> int:
    dataset = WindowDataset(
        pathlib.Path(cfg.data.dataset_dir) / "manifest.yaml",
        state_horizon=cfg.model.state_horizon,
        chunk_len=cfg.model.chunk_len,
        history_window=cfg.model.history_window,
    )
    policy = _build_policy(cfg, dataset)
    trainer = Trainer(policy, dataset, cfg.train)
    out = pathlib.Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _dump_config(cfg, out / "config.yaml")
    stats = [dataset.stats(i) for i in range(dataset.num_embodiments)]

    log_path = out / "loss_log.csv"
    with open(log_path, "w") as log:
        log.write(",".join(LOG_FIELDS) + "\n")
        for _ in range(cfg.train.total_steps):
            record = trainer.train_step()
            if record["step"] % cfg.train.log_every == 0:
                log.write(format_log_record(record) + "\n")
            if (
                cfg.train.checkpoint_every
                and trainer.step_count % cfg.train.checkpoint_every == 0
            ):
                save_checkpoint(out / "checkpoint.pt", policy, trainer,
                                cfg.to_dict(), stats)
    save_checkpoint(out / "checkpoint.pt", policy, trainer, cfg.to_dict(), stats)
    print(f"trained {trainer.step_count} steps; checkpoint at {out / 'checkpoint.pt'}")
    return EXIT_OK


def cmd_rollout(cfg: RunConfig, checkpoint: str) -> int:
    policy, specs, stats, payload = load_checkpoint(checkpoint)
    names = [s.name for s in specs]
    if cfg.rollout.embodiment not in names:
        raise DataError(
            f"checkpoint was trained on embodiments {names}; "
            f"{cfg.rollout.embodiment!r} is incompatible"
        )
    eid = names.index(cfg.rollout.embodiment)
    out = pathlib.Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _dump_config(cfg, out / "rollout_config.yaml")

    successes = 0
    errors = []
    all_records = []
    for k in range(cfg.rollout.episodes):
        result = rollout_episode(
            policy,
            eid,
            stats[eid],
            cfg.rollout.task,
            seed=cfg.rollout.seed + k,
            steps=cfg.rollout.steps,
            replan_interval=cfg.rollout.replan_interval or None,
            sampler=cfg.sampler,
        )
        successes += int(result.success)
        if np.isfinite(result.realized_state_error):
            errors.append(result.realized_state_error)
        all_records.extend(result.routing_records)
        assert result.encoder_calls == result.steps  # one encode per control step
    write_routing_log(out / "routing_log.csv", all_records)
    rate = successes / cfg.rollout.episodes
    report = {
        "task": cfg.rollout.task,
        "embodiment": cfg.rollout.embodiment,
        "episodes": cfg.rollout.episodes,
        "success_rate": rate,
        "mean_realized_state_error": float(np.mean(errors)) if errors else None,
        "checkpoint_step": payload.get("step"),
    }
    with open(out / "rollout_report.yaml", "w") as f:
        yaml.safe_dump({"config": cfg.to_dict(), "report": report}, f, sort_keys=False)
    print(yaml.safe_dump(report, sort_keys=False).strip())
    return EXIT_OK


def cmd_route_heatmap(cfg: RunConfig, log_path: str) -> int:
    rows = read_routing_log(log_path)
    out = pathlib.Path(cfg.output_dir)
    results = export_heatmaps(rows, out)
    _dump_config(cfg, out / "heatmap_config.yaml")
    for boundary, info in results.items():
        print(f"{boundary}: switch rate {info['switch_rate']:.4f} "
              f"({info['png']}, {info['csv']})")
    return EXIT_OK


def cmd_latency(cfg: RunConfig, checkpoint: str, trials: int) -> int:
    policy, specs, stats, _ = load_checkpoint(checkpoint)
    names = [s.name for s in specs]
    if cfg.rollout.embodiment not in names:
        raise DataError(f"embodiment {cfg.rollout.embodiment!r} not in checkpoint")
    eid = names.index(cfg.rollout.embodiment)
    report = measure_latency(
        policy, eid, stats[eid], cfg.sampler, task=cfg.rollout.task, trials=trials
    )
    out = pathlib.Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "latency_report.yaml", "w") as f:
        yaml.safe_dump({"config": cfg.to_dict(), "report": report}, f, sort_keys=False)
    print(
        f"mean {report['mean_ms']:.2f} ms, p50 {report['p50_ms']:.2f} ms, "
        f"p95 {report['p95_ms']:.2f} ms over {trials} trials "
        f"({report['parameter_count']:,} parameters); "
        f"full-scale reference: {report['reference_ms']} ms at "
        f"{report['reference_params']}, not a target"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", default=None, help="run config YAML")
    common.add_argument(
        "--set", "-s", action="append", default=[], metavar="KEY=VALUE",
        help="config override, e.g. -s train.total_steps=100",
    )
    parser = argparse.ArgumentParser(
        prog="partpolicy", description="whole-body policy toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("build-data", parents=[common],
                   help="generate the synthetic dataset")
    sub.add_parser("train", parents=[common], help="run the staged training loop")
    p = sub.add_parser("rollout", parents=[common],
                       help="closed-loop evaluation of a checkpoint")
    p.add_argument("checkpoint")
    p = sub.add_parser("route-heatmap", parents=[common],
                       help="expert routing heatmaps from a log")
    p.add_argument("routing_log")
    p = sub.add_parser("latency", parents=[common],
                       help="inference latency benchmark")
    p.add_argument("checkpoint")
    p.add_argument("--trials", type=int, default=50)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, args.set)
        if args.command == "build-data":
            return cmd_build_data(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "rollout":
            return cmd_rollout(cfg, args.checkpoint)
        if args.command == "route-heatmap":
            return cmd_route_heatmap(cfg, args.routing_log)
        if args.command == "latency":
            return cmd_latency(cfg, args.checkpoint, args.trials)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
