import numpy as np
import pytest
import torch

from partpolicy import (
    ModelConfig,
    NumericalError,
    TrainConfig,
    Trainer,
    WholeBodyPolicy,
    WindowDataset,
    build_dataset,
    compute_losses,
    load_checkpoint,
    make_flow_target,
    save_checkpoint,
    staged_schedule,
)
from partpolicy.training import format_log_record, learning_rate, masked_mse


# -- flow-matching target construction --------------------------------------


def test_flow_target_endpoints():
    actions = torch.tensor([[2.0, -1.0]])
    noise = torch.tensor([[0.5, 0.5]])
    blend0, vel0 = make_flow_target(actions, noise, 0.0)
    assert torch.equal(blend0, noise)
    blend1, vel1 = make_flow_target(actions, noise, 1.0)
    assert torch.equal(blend1, actions)
    assert torch.equal(vel0, vel1)


def test_flow_target_midpoint_example():
    # a=2, n=0.5, lam=0.5: blend = 0.5*0.5 + 0.5*2 = 1.25, velocity = 1.5
    blend, vel = make_flow_target(torch.tensor([2.0]), torch.tensor([0.5]), 0.5)
    assert float(blend) == pytest.approx(1.25, abs=1e-12)
    assert float(vel) == pytest.approx(1.5, abs=1e-12)


def test_flow_velocity_lambda_independent():
    actions = torch.randn(5, 3)
    noise = torch.randn(5, 3)
    _, v1 = make_flow_target(actions, noise, 0.1)
    _, v2 = make_flow_target(actions, noise, 0.9)
    assert torch.equal(v1, v2)
    assert torch.equal(v1, actions - noise)


def test_flow_target_validation():
    with pytest.raises(ValueError):
        make_flow_target(torch.zeros(3), torch.zeros(4), 0.5)
    with pytest.raises(ValueError):
        make_flow_target(torch.zeros(3), torch.zeros(3), 1.5)
    with pytest.raises(ValueError):
        make_flow_target(torch.zeros(3), torch.zeros(3), -0.1)


def test_flow_target_per_sample_lambda():
    actions = torch.ones(2, 3)
    noise = torch.zeros(2, 3)
    blend, _ = make_flow_target(actions, noise, torch.tensor([0.0, 1.0]))
    assert torch.equal(blend[0], torch.zeros(3))
    assert torch.equal(blend[1], torch.ones(3))


# -- composite loss ----------------------------------------------------------


def test_masked_mse_ignores_masked_dims():
    pred = torch.tensor([[1.0, 99.0]])
    target = torch.tensor([[0.0, 0.0]])
    mask = torch.tensor([1.0, 0.0])
    assert float(masked_mse(pred, target, mask)) == pytest.approx(1.0)
    assert float(masked_mse(pred, target, torch.zeros(2))) == 0.0


def test_compute_losses_perfect_prediction():
    v = torch.randn(4, 3)
    s = torch.randn(2, 5)
    l_a, l_s, l_aux, total = compute_losses(
        v, v, torch.ones(3), s, s, torch.ones(5), torch.tensor(1.0),
        alpha=1.0, aux_weight=0.01,
    )
    assert float(l_a) == 0.0 and float(l_s) == 0.0
    assert float(total) == pytest.approx(0.01)


def test_compute_losses_hand_example():
    # action: mean((1-0)^2, (3-1)^2) = 2.5; state: mean((2-0)^2) = 4
    l_a, l_s, l_aux, total = compute_losses(
        torch.tensor([1.0, 3.0]), torch.tensor([0.0, 1.0]), torch.ones(2),
        torch.tensor([2.0]), torch.tensor([0.0]), torch.ones(1),
        torch.tensor(2.0), alpha=0.5, aux_weight=0.1,
    )
    assert float(l_a) == pytest.approx(2.5, abs=1e-6)
    assert float(l_s) == pytest.approx(4.0, abs=1e-6)
    assert float(total) == pytest.approx(2.5 + 0.5 * 4.0 + 0.1 * 2.0, abs=1e-6)


def test_compute_losses_state_only():
    s = torch.randn(2, 3)
    l_a, l_s, _, total = compute_losses(
        None, None, None, s, s + 1.0, torch.ones(3), torch.tensor(0.0)
    )
    assert float(l_a) == 0.0
    assert float(l_s) == pytest.approx(1.0, abs=1e-6)


def test_compute_losses_nonfinite_aborts():
    s = torch.randn(2, 3)
    with pytest.raises(NumericalError):
        compute_losses(None, None, None, s * float("nan"), s, torch.ones(3),
                       torch.tensor(0.0))


# -- schedules ---------------------------------------------------------------


def test_staged_schedule_boundary():
    cfg = TrainConfig(total_steps=5000, stage_boundary=2000)
    assert staged_schedule(0, cfg) == "upp_warmup"
    assert staged_schedule(1999, cfg) == "upp_warmup"
    assert staged_schedule(2000, cfg) == "joint"
    joint_only = TrainConfig(total_steps=100, stage_boundary=0)
    assert staged_schedule(0, joint_only) == "joint"
    with pytest.raises(ValueError):
        staged_schedule(-1, cfg)
    with pytest.raises(ValueError):
        TrainConfig(total_steps=10, stage_boundary=20)


def test_learning_rate_shape():
    cfg = TrainConfig(total_steps=1000, lr_warmup_steps=100, min_lr=1e-6,
                      stage_boundary=0)
    peak = 2e-4
    assert learning_rate(0, peak, cfg) == 0.0
    assert learning_rate(50, peak, cfg) == pytest.approx(peak / 2)
    assert learning_rate(100, peak, cfg) == pytest.approx(peak)
    # strictly decreasing after the peak, exact floor at the final step
    values = [learning_rate(s, peak, cfg) for s in range(100, 1000)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert learning_rate(999, peak, cfg) == pytest.approx(1e-6, abs=0, rel=1e-12)
    assert learning_rate(999, peak, cfg) >= 1e-6


# -- trainer loop on a tiny synthetic dataset --------------------------------


def tiny_model_config():
    return ModelConfig(
        latent_dim=16, state_horizon=3, predictor_layers=1, predictor_heads=2,
        context_dim=16, context_layers=1, context_heads=2,
        action_dim_hidden=16, chunk_len=4, denoiser_layers=1, denoiser_heads=2,
        num_routed_experts=2, num_shared_experts=1, expert_hidden_mult=1,
    )


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("trainset")
    manifest = build_dataset(out, episodes_per_embodiment=2, tasks=("reach",),
                             seed=0, episode_len=24)
    return WindowDataset(manifest, state_horizon=3, chunk_len=4)


def make_trainer(dataset, **overrides):
    defaults = dict(total_steps=6, batch_size=2, stage_boundary=2,
                    lr_warmup_steps=2, lr_context=1e-4, lr_predictor=1e-4,
                    lr_action=1e-4, seed=0, checkpoint_every=100)
    defaults.update(overrides)
    cfg = TrainConfig(**defaults)
    policy = WholeBodyPolicy(tiny_model_config())
    for ei in range(dataset.num_embodiments):
        policy.register_embodiment(dataset.spec(ei))
    return Trainer(policy, dataset, cfg)


def test_action_branch_frozen_during_warmup(tiny_dataset):
    trainer = make_trainer(tiny_dataset)
    before = {
        n: p.detach().clone()
        for n, p in trainer.policy.denoiser.named_parameters()
    }
    rec = trainer.train_step()
    assert rec["phase"] == "upp_warmup"
    assert rec["lr_action"] == 0.0
    assert rec["loss_action"] == 0.0  # denoiser not even evaluated
    for n, p in trainer.policy.denoiser.named_parameters():
        assert torch.equal(p.detach(), before[n]), n


def test_joint_phase_updates_all_groups(tiny_dataset):
    trainer = make_trainer(tiny_dataset, stage_boundary=0, lr_warmup_steps=0)
    snap = {n: p.detach().clone() for n, p in trainer.policy.named_parameters()}
    rec = trainer.train_step()
    assert rec["phase"] == "joint"
    assert rec["loss_action"] > 0.0
    assert np.isfinite(rec["loss_total"])
    changed = {
        prefix: any(
            not torch.equal(p.detach(), snap[n])
            for n, p in trainer.policy.named_parameters()
            if n.startswith(prefix)
        )
        for prefix in ("context_encoder", "predictor", "denoiser", "codec")
    }
    assert all(changed.values()), changed


def test_action_loss_reaches_predictor(tiny_dataset):
    # the denoiser conditions on predicted future latents, so the flow loss
    # must propagate gradient into the predictor even with alpha = 0
    trainer = make_trainer(tiny_dataset, stage_boundary=0, alpha=0.0,
                           aux_weight=0.0)
    trainer.optimizer.zero_grad()
    _, _, _, total = trainer._micro_losses(0, "joint")
    total.backward()
    grads = [
        p.grad.abs().sum()
        for p in trainer.policy.predictor.parameters()
        if p.grad is not None
    ]
    assert grads and float(torch.stack(grads).sum()) > 0.0


def test_identical_seeds_identical_logs(tiny_dataset):
    logs_a = [format_log_record(make_trainer(tiny_dataset).train_step())]
    t_b = make_trainer(tiny_dataset)
    logs_b = [format_log_record(t_b.train_step())]
    assert logs_a == logs_b
    t_c = make_trainer(tiny_dataset, seed=1)
    assert format_log_record(t_c.train_step()) != logs_a[0]


def test_multi_micro_batch_step(tiny_dataset):
    trainer = make_trainer(tiny_dataset, micro_batches=2, stage_boundary=0)
    rec = trainer.train_step()
    assert np.isfinite(rec["loss_total"])
    assert trainer.step_count == 1


def test_nan_parameter_aborts(tiny_dataset):
    trainer = make_trainer(tiny_dataset, stage_boundary=0)
    with torch.no_grad():
        trainer.policy.predictor.context_proj.weight.fill_(float("nan"))
    with pytest.raises(NumericalError):
        trainer.train_step()


def test_flow_time_uniform():
    gen = torch.Generator().manual_seed(0)
    draws = torch.rand(10_000, generator=gen)
    assert abs(float(draws.mean()) - 0.5) < 0.02
    assert float(draws.min()) >= 0.0 and float(draws.max()) <= 1.0


def test_checkpoint_round_trip(tiny_dataset, tmp_path):
    trainer = make_trainer(tiny_dataset, stage_boundary=0)
    trainer.train_step()
    stats = [tiny_dataset.stats(i) for i in range(tiny_dataset.num_embodiments)]
    path = tmp_path / "ckpt.pt"
    save_checkpoint(path, trainer.policy, trainer, {"note": "test"}, stats)
    policy, specs, stats2, payload = load_checkpoint(path)
    assert payload["step"] == 1
    assert [s.name for s in specs] == [s.name for s in trainer.policy.embodiment_specs]
    for (n1, p1), (n2, p2) in zip(
        sorted(trainer.policy.named_parameters()),
        sorted(policy.named_parameters()),
    ):
        assert n1 == n2 and torch.equal(p1.detach(), p2.detach())
    assert np.allclose(stats2[0].state_mean, stats[0].state_mean)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.pt")
