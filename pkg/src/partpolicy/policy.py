"""Full high-level policy: context encoder + part codec + future-state
predictor + action denoiser, plus the closed-loop rollout."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn

from .action import ActionChunk, ActionDenoiser, interpolate_actions, sample_actions
from .codec import PartCodec
from .context import ContextEncoder, HistoryCache, Observation
from .moe import MoEConfig, merge_records
from .predictor import StatePredictor
from .slots import NUM_SLOTS, EmbodimentSpec
from . import synthworld


@dataclass
class ModelConfig:
    """Model dimensions. Defaults follow the reference full-scale setting;
    the synthetic experiments shrink them via the run config."""

    latent_dim: int = 768  # part-latent width d
    state_horizon: int = 50  # future steps forecast
    predictor_layers: int = 4
    predictor_heads: int = 8
    context_dim: int = 256
    context_layers: int = 2
    context_heads: int = 4
    patch_size: int = 8
    image_size: int = 32
    vocab_size: int = len(synthworld.VOCAB)
    max_instruction_len: int = synthworld.MAX_INSTRUCTION_LEN
    history_window: int = 2
    action_dim_hidden: int = 1024  # denoiser width
    chunk_len: int = 100
    denoiser_layers: int = 16
    denoiser_heads: int = 8
    num_routed_experts: int = 16
    num_shared_experts: int = 2
    top_k: int = 1
    aux_weight: float = 0.01
    expert_hidden_mult: int = 4

    def moe(self) -> MoEConfig:
        return MoEConfig(
            num_routed=self.num_routed_experts,
            num_shared=self.num_shared_experts,
            top_k=self.top_k,
            aux_weight=self.aux_weight,
        )


@dataclass
class SamplerConfig:
    steps: int = 10
    # independent flow samples averaged per plan; >1 trades latency for a
    # lower-variance chunk estimate
    samples: int = 1
    interpolation_factor: int = 1
    gate_override: float | None = None


@dataclass
class PlanResult:
    chunk: object  # ActionChunk (possibly interpolated)
    predicted_states: np.ndarray  # (state_horizon, S) normalized
    routing_records: tuple  # (input_record, output_record), current-step rows


class WholeBodyPolicy(nn.Module):
    def __init__(self, cfg: ModelConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        self.codec = PartCodec(latent_dim=cfg.latent_dim, dtype=dtype)
        self.context_encoder = ContextEncoder(
            vocab_size=cfg.vocab_size,
            image_size=cfg.image_size,
            patch_size=cfg.patch_size,
            dim=cfg.context_dim,
            layers=cfg.context_layers,
            heads=cfg.context_heads,
            max_instruction_len=cfg.max_instruction_len,
        )
        self.predictor = StatePredictor(
            dim=cfg.latent_dim,
            horizon=cfg.state_horizon,
            num_slots=NUM_SLOTS,
            layers=cfg.predictor_layers,
            heads=cfg.predictor_heads,
            context_dim=cfg.context_dim,
            moe=cfg.moe(),
            expert_hidden_mult=cfg.expert_hidden_mult,
            dtype=dtype,
        )
        self.denoiser = ActionDenoiser(
            dim=cfg.action_dim_hidden,
            chunk_len=cfg.chunk_len,
            layers=cfg.denoiser_layers,
            heads=cfg.denoiser_heads,
            context_dim=cfg.context_dim,
            latent_dim=cfg.latent_dim,
            dtype=dtype,
        )

    def register_embodiment(self, spec: EmbodimentSpec) -> int:
        eid = self.codec.register_embodiment(spec)
        self.denoiser.register_embodiment(eid, spec.action_dim)
        return eid

    @property
    def embodiment_specs(self) -> list:
        return self.codec.specs

    def parameter_groups(self) -> dict:
        """Named parameter groups for module-specific learning rates."""
        return {
            "context": list(self.context_encoder.parameters()),
            "predictor": list(self.codec.parameters())
            + list(self.predictor.parameters()),
            "action": list(self.denoiser.parameters()),
        }

    # -- inference ----------------------------------------------------------

    def plan(
        self,
        obs_feats,
        history: torch.Tensor,
        state_norm: np.ndarray,
        eid: int,
        stats,
        sampler: SamplerConfig,
        seed: int | None = None,
    ) -> PlanResult:
        """One planning call: predict future latents from the current state
        and context, then sample a denormalized action chunk."""
        spec = self.codec.spec(eid)
        with torch.no_grad():
            grid = self.codec.encode_state(eid, np.asarray(state_norm))
            memory = obs_feats.memory(history)
            future, records, _ = self.predictor(grid.latents, memory)
            predicted = self.codec.decode_states(future, eid).cpu().numpy()
            # proprioceptive memory: current-state grid plus predicted futures
            h_p = torch.cat([grid.latents[None], future], dim=0)
            h_p = h_p.reshape(-1, self.cfg.latent_dim)
        draws = []
        for j in range(max(1, sampler.samples)):
            draws.append(
                sample_actions(
                    self.denoiser,
                    memory,
                    h_p,
                    eid,
                    steps=sampler.steps,
                    seed=None if seed is None else seed + j,
                    slot_mask=spec.action_slot_mask(),
                    stats=stats,
                    gate_override=sampler.gate_override,
                )
            )
        chunk = draws[0]
        if len(draws) > 1:
            chunk = ActionChunk(
                actions=np.mean([d.actions for d in draws], axis=0),
                slot_mask=chunk.slot_mask,
            )
        if sampler.interpolation_factor > 1:
            chunk = interpolate_actions(chunk, sampler.interpolation_factor)
        # keep only the current-state rows (temporal index 0) for telemetry
        records = tuple(_current_rows(r) for r in records)
        return PlanResult(chunk=chunk, predicted_states=predicted, routing_records=records)


def _at_control_step(record, step: int):
    from .moe import RoutingRecord

    return RoutingRecord(
        boundary=record.boundary,
        expert_indices=record.expert_indices,
        gate_weights=record.gate_weights,
        probs=record.probs,
        time_index=np.full_like(record.time_index, step),
        slot_index=record.slot_index,
        sample_index=record.sample_index,
    )


def _current_rows(record):
    from .moe import RoutingRecord

    keep = record.time_index == 0
    return RoutingRecord(
        boundary=record.boundary,
        expert_indices=record.expert_indices[keep],
        gate_weights=record.gate_weights[keep],
        probs=record.probs[keep],
        time_index=record.time_index[keep],
        slot_index=record.slot_index[keep],
        sample_index=record.sample_index[keep],
    )


@dataclass
class RolloutResult:
    success: bool
    final_distance: float
    realized_state_error: float  # mean L_s-style error of plans vs realized states
    encoder_calls: int
    steps: int
    routing_records: list = field(default_factory=list)  # per-plan (in, out) pairs
    cache_lengths: list = field(default_factory=list)


def rollout_episode(
    policy: WholeBodyPolicy,
    eid: int,
    stats,
    task: str,
    seed: int,
    steps: int = 100,
    replan_interval: int | None = None,
    sampler: SamplerConfig = SamplerConfig(),
    dt: float = synthworld.DT,
) -> RolloutResult:
    """Closed loop on the scripted dynamics: encode context (exactly once
    per control step) -> push query feature -> predict futures -> sample an
    action chunk -> execute. Returns terminal success and telemetry."""
    spec = policy.codec.spec(eid)
    state, scene = synthworld.make_scene(spec, task, seed)
    cache = HistoryCache(window=policy.cfg.history_window)
    chunk_len = policy.cfg.chunk_len
    replan = replan_interval or chunk_len
    factor = max(1, sampler.interpolation_factor)
    if factor > 1:
        # interpolated chunks hold factor*(chunk_len-1)+1 actions
        replan = min(replan, chunk_len - 1)
    dt_exec = dt / factor

    queue: list[np.ndarray] = []
    records = []
    cache_lengths = []
    pred_errors = []
    pending = []  # (predicted normalized states, countdown realized states)
    calls_before = policy.context_encoder.forward_calls

    for t in range(steps):
        obs = Observation(
            image=synthworld.render_frame(spec, state, scene).astype(np.float32) / 255.0,
            instruction=synthworld.scene_instruction(scene),
        )
        feats = policy.context_encoder.encode(obs)
        cache.push(feats.query)
        cache_lengths.append(len(cache))

        if t % replan == 0:
            plan = policy.plan(
                feats,
                cache.snapshot(),
                stats.normalize_state(state),
                eid,
                stats,
                sampler,
                seed=seed * 100_003 + t,
            )
            queue = list(plan.chunk.actions)
            records.append(tuple(_at_control_step(r, t) for r in plan.routing_records))
            pending.append([plan.predicted_states, []])

        for _ in range(factor):
            action = np.asarray(queue.pop(0), dtype=np.float64)
            state = synthworld.step_dynamics(spec, state, action, dt=dt_exec)
        for item in pending:
            if len(item[1]) < item[0].shape[0]:
                item[1].append(stats.normalize_state(state))

    for predicted, realized in pending:
        if realized:
            realized = np.stack(realized)
            pred_errors.append(float(((predicted[: len(realized)] - realized) ** 2).mean()))

    return RolloutResult(
        success=synthworld.task_success(spec, state, scene),
        final_distance=float(
            np.linalg.norm(
                synthworld.end_effector(spec, state) - synthworld.final_target(scene)
            )
        ),
        realized_state_error=float(np.mean(pred_errors)) if pred_errors else float("nan"),
        encoder_calls=policy.context_encoder.forward_calls - calls_before,
        steps=steps,
        routing_records=records,
        cache_lengths=cache_lengths,
    )


def model_config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
