"""Flow-matching targets, composite loss, staged schedule, and the trainer.

Training interleaves micro-batches drawn from one embodiment at a time
(uniformly over embodiments), accumulating gradients before each AdamW
step. An optional warm-up stage optimizes only the future-state objective
with the action denoiser frozen, then both objectives run jointly.
"""

from __future__ import annotations

import math
import pathlib
from dataclasses import dataclass, asdict

import numpy as np
import torch

from .context import Observation
from .policy import ModelConfig, WholeBodyPolicy


class NumericalError(Exception):
    """NaN/Inf encountered in losses or gradients."""


def make_flow_target(actions: torch.Tensor, noise: torch.Tensor, lam):
    """Linear-path flow construction: blends clean actions with noise at
    flow time lam and returns (blend, velocity target = actions - noise).
    The velocity target does not depend on lam."""
    if actions.shape != noise.shape:
        raise ValueError("noise must match the action chunk shape")
    lam_t = torch.as_tensor(lam, dtype=actions.dtype, device=actions.device)
    if bool((lam_t < 0).any() or (lam_t > 1).any()):
        raise ValueError("flow time must lie in [0, 1]")
    while lam_t.dim() < actions.dim():
        lam_t = lam_t.unsqueeze(-1)
    blend = (1.0 - lam_t) * noise + lam_t * actions
    return blend, actions - noise


def masked_mse(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over dimensions where mask > 0. The mask is
    broadcast over leading axes (per-dimension validity)."""
    diff = (pred - target) ** 2 * mask
    denom = (torch.ones_like(diff) * mask).sum()
    if float(denom) == 0.0:
        return diff.sum() * 0.0
    return diff.sum() / denom


def compute_losses(
    pred_velocity,
    target_velocity,
    action_mask,
    pred_states,
    target_states,
    state_mask,
    aux_loss,
    alpha: float = 1.0,
    aux_weight: float = 0.01,
):
    """Composite objective: action flow loss + alpha * state loss +
    aux_weight * load-balance loss. Any non-finite component aborts."""
    zero = aux_loss * 0.0 if torch.is_tensor(aux_loss) else torch.tensor(0.0)
    if pred_velocity is not None:
        l_a = masked_mse(pred_velocity, target_velocity, action_mask)
    else:
        l_a = zero
    if pred_states is not None:
        l_s = masked_mse(pred_states, target_states, state_mask)
    else:
        l_s = zero
    l_aux = aux_loss if torch.is_tensor(aux_loss) else torch.tensor(float(aux_loss))
    total = l_a + alpha * l_s + aux_weight * l_aux
    for name, value in (("action", l_a), ("state", l_s), ("aux", l_aux)):
        if not bool(torch.isfinite(value)):
            raise NumericalError(f"{name} loss is not finite")
    return l_a, l_s, l_aux, total


@dataclass
class TrainConfig:
    total_steps: int = 5000
    batch_size: int = 8
    micro_batches: int = 1  # embodiments sampled (and accumulated) per step
    seed: int = 0
    alpha: float = 1.0  # state-loss weight
    aux_weight: float = 0.01
    lr_context: float = 1.0e-5
    lr_predictor: float = 2.0e-5
    lr_action: float = 2.0e-5
    min_lr: float = 1.0e-6
    lr_warmup_steps: int = 100
    stage_boundary: int = 2000  # predictor warm-up steps; 0 = joint from start
    grad_clip: float = 1.0
    weight_decay: float = 0.01
    log_every: int = 1
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.total_steps < 1 or self.batch_size < 1 or self.micro_batches < 1:
            raise ValueError("steps, batch size and micro-batches must be positive")
        if self.stage_boundary > self.total_steps:
            raise ValueError("stage boundary must be <= total steps")
        for name in ("alpha", "aux_weight", "lr_context", "lr_predictor", "lr_action",
                     "min_lr", "grad_clip"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def staged_schedule(step: int, cfg: TrainConfig) -> str:
    """Phase at a given step: 'upp_warmup' (state objective only, action
    branch frozen) before the stage boundary, 'joint' afterwards."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return "upp_warmup" if step < cfg.stage_boundary else "joint"


def learning_rate(step: int, peak: float, cfg: TrainConfig) -> float:
    """Linear warm-up to the peak, then cosine decay to min_lr at the final
    step."""
    warm = cfg.lr_warmup_steps
    if warm > 0 and step < warm:
        return peak * step / warm
    # the last step taken is total_steps - 1; it lands exactly on min_lr
    span = max(cfg.total_steps - 1 - warm, 1)
    progress = min((step - warm) / span, 1.0)
    return cfg.min_lr + 0.5 * (peak - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


class Trainer:
    """Single-writer optimization loop over a WindowDataset."""

    def __init__(self, policy: WholeBodyPolicy, dataset, cfg: TrainConfig):
        self.policy = policy
        self.dataset = dataset
        self.cfg = cfg
        groups = policy.parameter_groups()
        self.optimizer = torch.optim.AdamW(
            [
                {"params": groups["context"], "lr": cfg.lr_context, "name": "context"},
                {"params": groups["predictor"], "lr": cfg.lr_predictor, "name": "predictor"},
                {"params": groups["action"], "lr": cfg.lr_action, "name": "action"},
            ],
            weight_decay=cfg.weight_decay,
        )
        self._peaks = {"context": cfg.lr_context, "predictor": cfg.lr_predictor,
                       "action": cfg.lr_action}
        self.step_count = 0
        self.rng = np.random.default_rng(cfg.seed)
        self.torch_gen = torch.Generator().manual_seed(cfg.seed)
        torch.manual_seed(cfg.seed)

    # -- one micro-batch forward/backward -----------------------------------

    def _micro_losses(self, ei: int, phase: str):
        ds, cfg = self.dataset, self.cfg
        policy = self.policy
        windows = [ds.sample_window(ei, self.rng) for _ in range(cfg.batch_size)]
        emb_stats = None  # normalized already
        dtype = policy.predictor.temporal_pos.dtype

        # context features: history frames without grad, current frame with
        memories, masks = [], []
        for w in windows:
            hist_feats = []
            with torch.no_grad():
                for frame in w["frames"][:-1]:
                    f = policy.context_encoder(
                        Observation(image=frame, instruction=w["instruction"])
                    )
                    hist_feats.append(f.query.detach())
            cur = policy.context_encoder(
                Observation(image=w["frames"][-1], instruction=w["instruction"])
            )
            history = torch.cat(hist_feats + [cur.query], dim=0)
            memories.append(cur.memory(history))
        max_len = max(m.shape[0] for m in memories)
        mem = torch.zeros(len(memories), max_len, memories[0].shape[1], dtype=dtype)
        pad = torch.ones(len(memories), max_len, dtype=torch.bool)
        for i, m in enumerate(memories):
            mem[i, : m.shape[0]] = m
            pad[i, : m.shape[0]] = False

        states = torch.as_tensor(np.stack([w["state"] for w in windows]), dtype=dtype)
        future = torch.as_tensor(
            np.stack([w["future_states"] for w in windows]), dtype=dtype
        )
        chunks = torch.as_tensor(
            np.stack([w["action_chunk"] for w in windows]), dtype=dtype
        )
        state_mask = torch.as_tensor(windows[0]["state_mask"], dtype=dtype)
        action_mask = torch.as_tensor(windows[0]["action_mask"], dtype=dtype)

        grid = policy.codec.encode_state(ei, states)
        future_latents, _, aux = policy.predictor(grid.latents, mem, pad)
        pred_states = policy.codec.decode_states(future_latents, ei)

        pred_vel = target_vel = None
        if phase == "joint":
            lam = torch.rand(len(windows), generator=self.torch_gen, dtype=dtype)
            noise = torch.randn(chunks.shape, generator=self.torch_gen, dtype=dtype)
            noisy, target_vel = make_flow_target(chunks, noise, lam)
            # proprioceptive memory: current-state grid plus predicted futures
            h_p = torch.cat([grid.latents[:, None], future_latents], dim=1)
            h_p = h_p.reshape(len(windows), -1, policy.cfg.latent_dim)
            mem_vl, mem_p = policy.denoiser.condition_memories(mem, h_p)
            pred_vel = policy.denoiser.predict_velocity(
                noisy, lam, mem_vl, mem_p, ei, vl_mask=pad
            )

        return compute_losses(
            pred_vel, target_vel, action_mask,
            pred_states, future, state_mask,
            aux, alpha=cfg.alpha, aux_weight=cfg.aux_weight,
        )

    def train_step(self) -> dict:
        cfg = self.cfg
        step = self.step_count
        phase = staged_schedule(step, cfg)
        self.optimizer.zero_grad(set_to_none=True)

        sums = {"action": 0.0, "state": 0.0, "aux": 0.0, "total": 0.0}
        for _ in range(cfg.micro_batches):
            ei = int(self.rng.integers(0, self.dataset.num_embodiments))
            l_a, l_s, l_aux, total = self._micro_losses(ei, phase)
            (total / cfg.micro_batches).backward()
            sums["action"] += float(l_a.detach()) / cfg.micro_batches
            sums["state"] += float(l_s.detach()) / cfg.micro_batches
            sums["aux"] += float(l_aux.detach()) / cfg.micro_batches
            sums["total"] += float(total.detach()) / cfg.micro_batches

        for group in self.optimizer.param_groups:
            for p in group["params"]:
                if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
                    raise NumericalError(
                        f"non-finite gradient in parameter group {group['name']!r}"
                    )
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(
                [p for g in self.optimizer.param_groups for p in g["params"]],
                cfg.grad_clip,
            )
        lrs = {}
        for group in self.optimizer.param_groups:
            peak = self._peaks[group["name"]]
            lr = learning_rate(step, peak, cfg)
            if phase == "upp_warmup" and group["name"] == "action":
                lr = 0.0  # frozen during predictor warm-up
            group["lr"] = lr
            lrs[group["name"]] = lr
        self.optimizer.step()
        self.step_count += 1

        return {
            "step": step,
            "phase": phase,
            "loss_action": sums["action"],
            "loss_state": sums["state"],
            "loss_aux": sums["aux"],
            "loss_total": sums["total"],
            "lr_context": lrs["context"],
            "lr_predictor": lrs["predictor"],
            "lr_action": lrs["action"],
        }


LOG_FIELDS = (
    "step", "phase", "loss_action", "loss_state", "loss_aux", "loss_total",
    "lr_context", "lr_predictor", "lr_action",
)


def format_log_record(record: dict) -> str:
    """One CSV line; floats via repr so identical runs match bitwise."""
    parts = []
    for name in LOG_FIELDS:
        v = record[name]
        parts.append(repr(v) if isinstance(v, float) else str(v))
    return ",".join(parts)


def save_checkpoint(path, policy: WholeBodyPolicy, trainer, run_config: dict,
                    stats_by_embodiment: list):
    payload = {
        "model_state": policy.state_dict(),
        "model_config": asdict(policy.cfg),
        "embodiment_specs": [s.to_dict() for s in policy.embodiment_specs],
        "stats": [s.to_dict() for s in stats_by_embodiment],
        "run_config": run_config,
        "step": 0 if trainer is None else trainer.step_count,
        "optimizer_state": None if trainer is None else trainer.optimizer.state_dict(),
    }
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path):
    """Rebuild the policy (and return stats/specs/config) from an archive."""
    from .slots import EmbodimentSpec, NormalizationStats

    path = pathlib.Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, weights_only=False)
    cfg = ModelConfig(**payload["model_config"])
    policy = WholeBodyPolicy(cfg)
    specs = [EmbodimentSpec.from_dict(d) for d in payload["embodiment_specs"]]
    for spec in specs:
        policy.register_embodiment(spec)
    policy.load_state_dict(payload["model_state"])
    stats = [NormalizationStats.from_dict(d) for d in payload["stats"]]
    return policy, specs, stats, payload
