"""Future-state predictor over the part-latent grid.

Builds a (horizon+1) x P token grid from the current part latents and a
bank of learned future query tokens, adds temporal and part positional
embeddings, and runs the flattened sequence through
input-boundary MoE -> shared transformer backbone (self-attention
interleaved with cross-attention over visual-language context) ->
output-boundary MoE. The future rows come back as predicted latents.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .moe import MoEConfig, MoELayer


class _BackboneLayer(nn.Module):
    """Pre-norm self-attention -> cross-attention -> feed-forward."""

    def __init__(self, dim, heads, context_dim, dtype):
        super().__init__()
        kw = {"dtype": dtype}
        self.norm1 = nn.LayerNorm(dim, **kw)
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True, **kw)
        self.norm2 = nn.LayerNorm(dim, **kw)
        self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True, **kw)
        self.norm3 = nn.LayerNorm(dim, **kw)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim, **kw), nn.GELU(), nn.Linear(4 * dim, dim, **kw)
        )

    def forward(self, x, memory, memory_mask=None):
        h = self.norm1(x)
        a, _ = self.self_attn(h, h, h, need_weights=False)
        x = x + a
        if memory is not None:
            h = self.norm2(x)
            a, _ = self.cross_attn(
                h, memory, memory, key_padding_mask=memory_mask, need_weights=False
            )
            x = x + a
        return x + self.mlp(self.norm3(x))


class StatePredictor(nn.Module):
    """Forecasts future part-latent grids from the current grid and
    visual-language context, with MoE adaptation at both boundaries."""

    def __init__(
        self,
        dim: int = 768,
        horizon: int = 50,
        num_slots: int = 9,
        layers: int = 4,
        heads: int = 8,
        context_dim: int = 256,
        moe: MoEConfig = MoEConfig(),
        expert_hidden_mult: int = 4,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.dim = dim
        self.horizon = horizon
        self.num_slots = num_slots
        self.moe_cfg = moe

        # one learned token per (future step, slot), shared across embodiments
        self.future_queries = nn.Parameter(
            torch.randn(horizon, num_slots, dim, dtype=dtype) * 0.02
        )
        self.temporal_pos = nn.Parameter(
            torch.randn(horizon + 1, dim, dtype=dtype) * 0.02
        )
        self.part_pos = nn.Parameter(torch.randn(num_slots, dim, dtype=dtype) * 0.02)

        self.context_proj = nn.Linear(context_dim, dim, dtype=dtype)
        self.moe_in = MoELayer(dim, moe, hidden_mult=expert_hidden_mult, dtype=dtype)
        self.moe_out = MoELayer(dim, moe, hidden_mult=expert_hidden_mult, dtype=dtype)
        self.layers = nn.ModuleList(
            [_BackboneLayer(dim, heads, dim, dtype) for _ in range(layers)]
        )
        self.out_norm = nn.LayerNorm(dim, dtype=dtype)

    @property
    def tokens_per_sample(self) -> int:
        return (self.horizon + 1) * self.num_slots

    def _token_metadata(self, batch: int):
        t = np.repeat(np.arange(self.horizon + 1), self.num_slots)
        s = np.tile(np.arange(self.num_slots), self.horizon + 1)
        time_index = np.tile(t, batch)
        slot_index = np.tile(s, batch)
        sample_index = np.repeat(np.arange(batch), self.tokens_per_sample)
        return time_index, slot_index, sample_index

    def forward(
        self,
        grid: torch.Tensor,
        memory: torch.Tensor | None,
        memory_mask: torch.Tensor | None = None,
    ):
        """grid: (P, d) or (B, P, d) current part latents; memory: context
        features in context_dim, (S, d_c) or (B, S, d_c), may be None/empty
        at episode start. Returns (future (B?, horizon, P, d),
        (input_record, output_record), aux_loss)."""
        batched = grid.dim() == 3
        if not batched:
            grid = grid[None]
            if memory is not None and memory.dim() == 2:
                memory = memory[None]
        b = grid.shape[0]
        if grid.shape[1:] != (self.num_slots, self.dim):
            raise ValueError(
                f"grid must be (B, {self.num_slots}, {self.dim}), got {tuple(grid.shape)}"
            )
        if memory is not None and memory.shape[-1] != self.context_proj.in_features:
            raise ValueError(
                f"context feature dim {memory.shape[-1]} != expected "
                f"{self.context_proj.in_features}"
            )

        tokens = torch.cat(
            [grid[:, None], self.future_queries[None].expand(b, -1, -1, -1)], dim=1
        )  # (B, horizon+1, P, d)
        tokens = tokens + self.temporal_pos[None, :, None, :] + self.part_pos[None, None]
        flat = tokens.reshape(b * self.tokens_per_sample, self.dim)

        ti, si, bi = self._token_metadata(b)
        flat, rec_in, aux_in = self.moe_in(
            flat, boundary="input", time_index=ti, slot_index=si, sample_index=bi
        )

        x = flat.reshape(b, self.tokens_per_sample, self.dim)
        mem = None
        if memory is not None and memory.shape[-2] > 0:
            mem = self.context_proj(memory)
        for layer in self.layers:
            x = layer(x, mem, memory_mask)
        x = self.out_norm(x)

        flat = x.reshape(b * self.tokens_per_sample, self.dim)
        flat, rec_out, aux_out = self.moe_out(
            flat, boundary="output", time_index=ti, slot_index=si, sample_index=bi
        )
        out = flat.reshape(b, self.horizon + 1, self.num_slots, self.dim)
        future = out[:, 1:]  # rows for t+1 .. t+horizon
        if not batched:
            future = future[0]
        return future, (rec_in, rec_out), aux_in + aux_out
