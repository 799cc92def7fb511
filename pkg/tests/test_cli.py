import time

import numpy as np
import pytest
import torch
import yaml

from partpolicy.cli import main
from partpolicy.config import ConfigError, apply_overrides, load_run_config
from partpolicy.diagnostics import (
    aggregate_routing,
    export_heatmaps,
    measure_latency,
    read_routing_log,
    switch_rate,
)
from partpolicy.policy import SamplerConfig, WholeBodyPolicy
from partpolicy.slots import NormalizationStats

from test_policy import tiny_config


# -- run configuration -------------------------------------------------------


def test_default_config_loads():
    cfg = load_run_config(None)
    assert cfg.model.latent_dim == 768
    assert cfg.train.total_steps == 5000
    assert cfg.sampler.steps == 10


def test_overrides_and_unknown_keys(tmp_path):
    doc = apply_overrides({}, ["train.total_steps=42", "model.latent_dim=8"])
    assert doc == {"train": {"total_steps": 42}, "model": {"latent_dim": 8}}
    cfg = load_run_config(None, ["train.total_steps=42",
                                 "train.stage_boundary=0"])
    assert cfg.train.total_steps == 42
    # structurally valid but semantically inconsistent values also fail
    with pytest.raises(ConfigError):
        load_run_config(None, ["train.total_steps=42"])  # boundary > steps
    with pytest.raises(ConfigError):
        load_run_config(None, ["train.no_such_knob=1"])
    with pytest.raises(ConfigError):
        load_run_config(None, ["not-an-assignment"])
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("mystery_section:\n  a: 1\n")
    with pytest.raises(ConfigError):
        load_run_config(bad)


def test_config_file_plus_override(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text("train:\n  total_steps: 7\n  stage_boundary: 0\n"
                 "model:\n  latent_dim: 16\n")
    cfg = load_run_config(p, ["train.total_steps=9"])
    assert cfg.train.total_steps == 9  # command line wins
    assert cfg.model.latent_dim == 16


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("PARTPOLICY_OUTPUT_ROOT", str(tmp_path))
    cfg = load_run_config(None)
    assert cfg.output_dir == str(tmp_path / "runs/default")


# -- routing diagnostics -----------------------------------------------------


def test_switch_rate_extremes():
    constant = np.zeros((9, 10), dtype=np.int64)
    assert switch_rate(constant) == 0.0
    alternating = np.tile(np.arange(10) % 2, (9, 1))
    assert switch_rate(alternating) == 1.0
    unobserved = -np.ones((9, 10), dtype=np.int64)
    assert switch_rate(unobserved) == 0.0


def test_aggregate_recount():
    rows = []
    experts = {(s, t): (s + t) % 3 for s in range(9) for t in (0, 4, 8)}
    for (s, t), e in experts.items():
        rows.append({"step": t, "slot": s, "boundary": "input",
                     "expert_id": e, "weight": 1.0})
    agg = aggregate_routing(rows)["input"]
    assert agg.grid.shape == (9, 3)
    for (s, t), e in experts.items():
        assert agg.grid[s, {0: 0, 4: 1, 8: 2}[t]] == e
    # every slot changes expert at both transitions -> rate exactly 1
    assert agg.switch_rate == 1.0


def test_heatmap_exports_share_aggregation(tmp_path):
    rows = [
        {"step": t, "slot": s, "boundary": b, "expert_id": (s + t) % 2, "weight": 1.0}
        for t in range(3) for s in range(9) for b in ("input", "output")
    ]
    results = export_heatmaps(rows, tmp_path)
    assert set(results) == {"input", "output"}
    for boundary, info in results.items():
        assert (tmp_path / f"routing_{boundary}.png").exists()
        table = (tmp_path / f"routing_{boundary}.csv").read_text().splitlines()
        assert len(table) == 10  # header + 9 slots
        assert info["switch_rate"] == 1.0


def test_read_routing_log_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_routing_log(tmp_path / "none.csv")
    empty = tmp_path / "empty.csv"
    empty.write_text("step,slot,boundary,expert_id,weight\n")
    with pytest.raises(ValueError):
        read_routing_log(empty)


# -- latency benchmark -------------------------------------------------------


def make_latency_policy():
    torch.manual_seed(0)
    policy = WholeBodyPolicy(tiny_config())
    from partpolicy.synthworld import toy_embodiments

    spec = toy_embodiments()[0]
    policy.register_embodiment(spec)
    stats = NormalizationStats(
        embodiment=spec.name,
        state_mean=np.zeros(spec.state_dim), state_std=np.ones(spec.state_dim),
        action_mean=np.zeros(spec.action_dim), action_std=np.ones(spec.action_dim),
    )
    return policy, stats


def test_latency_bookkeeping():
    policy, stats = make_latency_policy()
    report = measure_latency(policy, 0, stats, SamplerConfig(steps=2), trials=10)
    assert report["trials"] == 10
    assert report["mean_ms"] > 0
    assert report["p50_ms"] <= report["p95_ms"] * (1 + 1e-9)
    assert report["parameter_count"] == sum(p.numel() for p in policy.parameters())
    with pytest.raises(ValueError):
        measure_latency(policy, 0, stats, SamplerConfig(steps=2), trials=5)


def test_sampling_cost_scales_with_steps():
    policy, stats = make_latency_policy()
    few = measure_latency(policy, 0, stats, SamplerConfig(steps=1), trials=10)
    many = measure_latency(policy, 0, stats, SamplerConfig(steps=40), trials=10)
    assert many["p50_ms"] > few["p50_ms"]


# -- CLI end to end ----------------------------------------------------------

TINY_MODEL = [
    "-s", "model.latent_dim=16", "-s", "model.state_horizon=3",
    "-s", "model.predictor_layers=1", "-s", "model.predictor_heads=2",
    "-s", "model.context_dim=16", "-s", "model.context_layers=1",
    "-s", "model.context_heads=2", "-s", "model.action_dim_hidden=16",
    "-s", "model.chunk_len=4", "-s", "model.denoiser_layers=1",
    "-s", "model.denoiser_heads=2", "-s", "model.num_routed_experts=2",
    "-s", "model.num_shared_experts=1", "-s", "model.expert_hidden_mult=1",
]


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data_dir = str(root / "dataset")
    run_dir = str(root / "run")
    data_args = [
        "-s", f"data.dataset_dir={data_dir}",
        "-s", "data.episodes_per_embodiment=2",
        "-s", "data.tasks=[reach]", "-s", "data.episode_len=24",
    ]
    assert main(["build-data"] + data_args) == 0
    train_args = TINY_MODEL + data_args + [
        "-s", f"output_dir={run_dir}",
        "-s", "train.total_steps=4", "-s", "train.stage_boundary=2",
        "-s", "train.lr_warmup_steps=1", "-s", "train.batch_size=2",
        "-s", "train.checkpoint_every=0",
        "-s", "sampler.steps=2",
        "-s", "rollout.episodes=2", "-s", "rollout.steps=8",
    ]
    assert main(["train"] + train_args) == 0
    return root, data_dir, run_dir, train_args


def test_cli_build_and_train_artifacts(cli_run):
    root, data_dir, run_dir, _ = cli_run
    import pathlib

    assert (pathlib.Path(data_dir) / "manifest.yaml").exists()
    assert (pathlib.Path(data_dir) / "build_config.yaml").exists()
    run = pathlib.Path(run_dir)
    assert (run / "checkpoint.pt").exists()
    assert (run / "config.yaml").exists()
    log = (run / "loss_log.csv").read_text().splitlines()
    assert log[0].startswith("step,phase,")
    assert len(log) == 5  # header + 4 steps
    assert "upp_warmup" in log[1] and "joint" in log[4]


def test_cli_rollout_heatmap_latency(cli_run, tmp_path):
    root, data_dir, run_dir, train_args = cli_run
    import pathlib

    assert main(["rollout", f"{run_dir}/checkpoint.pt"] + train_args) == 0
    run = pathlib.Path(run_dir)
    assert (run / "routing_log.csv").exists()
    with open(run / "rollout_report.yaml") as f:
        report = yaml.safe_load(f)
    assert report["report"]["episodes"] == 2
    assert "config" in report  # artifacts embed their config

    heat_args = ["-s", f"output_dir={tmp_path}"]
    assert main(["route-heatmap", f"{run}/routing_log.csv"] + heat_args) == 0
    assert (tmp_path / "routing_input.png").exists()
    assert (tmp_path / "routing_output.csv").exists()

    assert main(["latency", f"{run}/checkpoint.pt", "--trials", "10"]
                + train_args) == 0
    assert (run / "latency_report.yaml").exists()


def test_cli_error_exit_codes(cli_run, tmp_path):
    _, data_dir, run_dir, train_args = cli_run
    # unknown config key
    assert main(["build-data", "-s", "data.bogus=1"]) == 2
    # malformed override
    assert main(["train", "-s", "oops"]) == 2
    # missing dataset
    assert main(["train", "-s", f"data.dataset_dir={tmp_path}/void",
                 "-s", f"output_dir={tmp_path}/r"] + TINY_MODEL) == 3
    # missing checkpoint
    assert main(["rollout", f"{tmp_path}/none.pt"] + train_args) == 3
    # checkpoint lacks the requested embodiment
    assert main(["rollout", f"{run_dir}/checkpoint.pt",
                 "-s", "rollout.embodiment=hexapod"] + train_args) == 3
    # missing routing log
    assert main(["route-heatmap", f"{tmp_path}/none.csv"]) == 3
