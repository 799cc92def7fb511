"""Token-wise mixture-of-experts layer with shared experts, top-k softmax
routing, and the auxiliary load-balancing loss.

Routing happens per flattened part-time token. The layer returns both a
differentiable auxiliary loss and a detached RoutingRecord for telemetry
(heatmaps, recount oracles).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn


@dataclass(frozen=True)
class MoEConfig:
    num_routed: int = 16
    num_shared: int = 2
    top_k: int = 1
    aux_weight: float = 0.01

    def __post_init__(self):
        if self.num_routed < 1 or self.num_shared < 0:
            raise ValueError("expert counts must be positive")
        if not 1 <= self.top_k <= self.num_routed:
            raise ValueError(f"top_k must be in [1, {self.num_routed}], got {self.top_k}")
        if self.aux_weight < 0:
            raise ValueError("aux_weight must be >= 0")


@dataclass
class RoutingRecord:
    """Detached per-token routing telemetry from one MoE forward.

    ``probs`` is the full router distribution; ``expert_indices`` /
    ``gate_weights`` are the selected top-k experts and their (raw softmax)
    probabilities. Metadata locates every token in the part-time grid.
    """

    boundary: str  # "input" | "output"
    expert_indices: np.ndarray  # (M, top_k)
    gate_weights: np.ndarray  # (M, top_k)
    probs: np.ndarray  # (M, E)
    time_index: np.ndarray  # (M,)
    slot_index: np.ndarray  # (M,)
    sample_index: np.ndarray = field(default=None)

    def __post_init__(self):
        m = self.probs.shape[0]
        if self.sample_index is None:
            self.sample_index = np.zeros(m, dtype=np.int64)
        for name in ("expert_indices", "gate_weights", "time_index", "slot_index", "sample_index"):
            if getattr(self, name).shape[0] != m:
                raise ValueError(f"{name} does not cover every token")

    @property
    def num_tokens(self) -> int:
        return self.probs.shape[0]

    @property
    def num_experts(self) -> int:
        return self.probs.shape[1]

    def top1(self) -> np.ndarray:
        return self.expert_indices[:, 0]

    def to_rows(self):
        """Flat (step, slot, boundary, expert_id, weight) rows for export."""
        for i in range(self.num_tokens):
            yield (
                int(self.time_index[i]),
                int(self.slot_index[i]),
                self.boundary,
                int(self.expert_indices[i, 0]),
                float(self.gate_weights[i, 0]),
            )


def _mlp(dim: int, hidden_mult: int, dtype) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(dim, hidden_mult * dim, dtype=dtype),
        nn.GELU(),
        nn.Linear(hidden_mult * dim, dim, dtype=dtype),
    )


class MoELayer(nn.Module):
    """Shared-plus-routed expert mixture applied token-wise.

    output = sum_j shared_j(x) + sum_{i in topk} w_i * routed_i(x), where the
    w_i are the selected softmax probabilities renormalized to sum to one.
    Ties in the top-k selection break toward the lowest expert index.
    """

    def __init__(
        self,
        dim: int,
        cfg: MoEConfig,
        hidden_mult: int = 4,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.dim = dim
        self.cfg = cfg
        self.router = nn.Linear(dim, cfg.num_routed, bias=False, dtype=dtype)
        self.routed = nn.ModuleList(
            [_mlp(dim, hidden_mult, dtype) for _ in range(cfg.num_routed)]
        )
        self.shared = nn.ModuleList(
            [_mlp(dim, hidden_mult, dtype) for _ in range(cfg.num_shared)]
        )

    def forward(
        self,
        tokens: torch.Tensor,
        boundary: str = "input",
        time_index: np.ndarray | None = None,
        slot_index: np.ndarray | None = None,
        sample_index: np.ndarray | None = None,
    ):
        """tokens: (M, d). Returns (output (M, d), RoutingRecord, aux_loss)."""
        if tokens.dim() != 2 or tokens.shape[0] < 1:
            raise ValueError("tokens must be a non-empty (M, d) array")
        m = tokens.shape[0]
        cfg = self.cfg

        probs = torch.softmax(self.router(tokens), dim=-1)  # (M, E)
        # stable argsort on -probs picks the lowest index among ties
        order = torch.argsort(-probs, dim=-1, stable=True)
        sel = order[:, : cfg.top_k]  # (M, k)
        sel_p = torch.gather(probs, 1, sel)
        weights = sel_p / sel_p.sum(dim=-1, keepdim=True)

        out = tokens.new_zeros(tokens.shape)
        for expert in self.shared:
            out = out + expert(tokens)
        for i, expert in enumerate(self.routed):
            hit = sel == i  # (M, k)
            if not hit.any():
                continue
            rows = hit.any(dim=-1)
            w = (weights * hit).sum(dim=-1)[rows]  # (m_i,)
            out = out.index_put((rows.nonzero(as_tuple=True)[0],),
                                w[:, None] * expert(tokens[rows]),
                                accumulate=True)

        aux = switch_balance_loss(probs, sel[:, 0])

        record = RoutingRecord(
            boundary=boundary,
            expert_indices=sel.detach().cpu().numpy(),
            gate_weights=sel_p.detach().cpu().numpy(),
            probs=probs.detach().cpu().numpy(),
            time_index=np.zeros(m, dtype=np.int64) if time_index is None else np.asarray(time_index),
            slot_index=np.zeros(m, dtype=np.int64) if slot_index is None else np.asarray(slot_index),
            sample_index=None if sample_index is None else np.asarray(sample_index),
        )
        return out, record, aux

    def dense_mixture(self, tokens: torch.Tensor) -> torch.Tensor:
        """Brute-force dense mixture sum_i p_i routed_i(x) + shared(x); the
        reference moe output when top_k == num_routed."""
        probs = torch.softmax(self.router(tokens), dim=-1)
        out = tokens.new_zeros(tokens.shape)
        for expert in self.shared:
            out = out + expert(tokens)
        for i, expert in enumerate(self.routed):
            out = out + probs[:, i : i + 1] * expert(tokens)
        return out


def switch_balance_loss(probs: torch.Tensor, top1: torch.Tensor) -> torch.Tensor:
    """Differentiable load-balance loss E * sum_i f_i * pbar_i.

    f_i: fraction of tokens hard-assigned (top-1) to expert i (constant);
    pbar_i: mean router probability of expert i over tokens.
    Equals exactly 1.0 under uniform probabilities and E under collapse
    onto a single expert with probability one.
    """
    num_experts = probs.shape[1]
    f = torch.bincount(top1, minlength=num_experts).to(probs.dtype) / probs.shape[0]
    pbar = probs.mean(dim=0)
    return num_experts * (f * pbar).sum()


def load_balance_loss(record: RoutingRecord) -> float:
    """Recompute the load-balance loss from a RoutingRecord (telemetry side
    of the dual route; numpy, independent of the tensor path)."""
    if record.num_tokens == 0:
        raise ValueError("routing record is empty")
    e = record.num_experts
    top1 = record.top1()
    f = np.bincount(top1, minlength=e) / record.num_tokens
    pbar = record.probs.mean(axis=0)
    return float(e * (f * pbar).sum())


def merge_records(records) -> RoutingRecord:
    """Concatenate same-boundary records (e.g. across rollout steps)."""
    records = list(records)
    if not records:
        raise ValueError("no records to merge")
    boundary = records[0].boundary
    if any(r.boundary != boundary for r in records):
        raise ValueError("cannot merge records across boundaries")
    return RoutingRecord(
        boundary=boundary,
        expert_indices=np.concatenate([r.expert_indices for r in records]),
        gate_weights=np.concatenate([r.gate_weights for r in records]),
        probs=np.concatenate([r.probs for r in records]),
        time_index=np.concatenate([r.time_index for r in records]),
        slot_index=np.concatenate([r.slot_index for r in records]),
        sample_index=np.concatenate([r.sample_index for r in records]),
    )
