"""Flow-matching action denoiser with residual-gated dual conditioning.

Each block cross-attends the evolving action tokens to two memories — the
visual-language features and the predicted future proprioceptive latents —
and combines the branches as F = A_vl + g * A_p with a learned sigmoid
gate, injected residually before self-attention and feed-forward sublayers.
Sampling Euler-integrates the learned velocity field from Gaussian noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .slots import ARM_HAND_SLOTS, EmbodimentSpec


@dataclass
class ActionChunk:
    """A fixed-horizon block of high-level actions (chunk_len x action_dim)
    with a per-dimension canonical-slot tag."""

    actions: np.ndarray
    slot_mask: np.ndarray

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.actions.ndim != 2:
            raise ValueError("actions must be (chunk_len, action_dim)")
        self.slot_mask = np.asarray(self.slot_mask, dtype=np.int64).reshape(-1)
        if self.slot_mask.shape[0] != self.actions.shape[1]:
            raise ValueError("slot_mask must tag every action dimension")

    @property
    def chunk_len(self) -> int:
        return self.actions.shape[0]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]


def sinusoidal_embedding(value: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos embedding of a scalar in [0, 1]; value: (B,)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0)
        * torch.arange(half, dtype=value.dtype, device=value.device)
        / max(half - 1, 1)
    )
    angles = value[:, None] * freqs[None, :] * 1000.0
    emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    if emb.shape[-1] < dim:
        emb = torch.nn.functional.pad(emb, (0, dim - emb.shape[-1]))
    return emb


class FusionBlock(nn.Module):
    """One denoiser block: dual cross-attention, gated residual fusion,
    then self-attention and feed-forward residual sublayers."""

    def __init__(self, dim, heads, dtype):
        super().__init__()
        kw = {"dtype": dtype}
        self.norm_in = nn.LayerNorm(dim, **kw)
        self.attn_vl = nn.MultiheadAttention(dim, heads, batch_first=True, **kw)
        self.attn_p = nn.MultiheadAttention(dim, heads, batch_first=True, **kw)
        self.gate = nn.Linear(3 * dim, dim, **kw)
        self.norm_sa = nn.LayerNorm(dim, **kw)
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True, **kw)
        self.norm_ff = nn.LayerNorm(dim, **kw)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim, **kw), nn.GELU(), nn.Linear(4 * dim, dim, **kw)
        )

    def forward(self, x, mem_vl, mem_p, vl_mask=None, gate_override=None):
        x_hat = self.norm_in(x)
        a_vl, _ = self.attn_vl(
            x_hat, mem_vl, mem_vl, key_padding_mask=vl_mask, need_weights=False
        )
        a_p, _ = self.attn_p(x_hat, mem_p, mem_p, need_weights=False)
        if gate_override is None:
            g = torch.sigmoid(self.gate(torch.cat([a_vl, a_p, x_hat], dim=-1)))
        else:
            g = x.new_full(x.shape, float(gate_override))
        fused = a_vl + g * a_p
        x = x + fused
        h = self.norm_sa(x)
        a, _ = self.self_attn(h, h, h, need_weights=False)
        x = x + a
        return x + self.mlp(self.norm_ff(x))


class ActionDenoiser(nn.Module):
    """Velocity-field model over action chunks.

    Per-embodiment affine heads map raw action dims to/from the hidden
    width; the trunk (temporal/flow-time embeddings + fusion blocks) is
    shared. ``gate_override`` forces the fusion gate to a constant, e.g. 0
    to ablate the proprioceptive branch.
    """

    def __init__(
        self,
        dim: int = 1024,
        chunk_len: int = 100,
        layers: int = 16,
        heads: int = 8,
        context_dim: int = 256,
        latent_dim: int = 768,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.dim = dim
        self.chunk_len = chunk_len
        self._dtype = dtype

        self.vl_proj = nn.Linear(context_dim, dim, dtype=dtype)
        self.p_proj = nn.Linear(latent_dim, dim, dtype=dtype)
        self.time_pos = nn.Parameter(torch.randn(chunk_len, dim, dtype=dtype) * 0.02)
        self.flow_time_proj = nn.Linear(dim, dim, dtype=dtype)
        self.blocks = nn.ModuleList(
            [FusionBlock(dim, heads, dtype) for _ in range(layers)]
        )
        self.out_norm = nn.LayerNorm(dim, dtype=dtype)

        self.encoders = nn.ModuleDict()  # embodiment id -> Linear(A, dim)
        self.decoders = nn.ModuleDict()  # embodiment id -> Linear(dim, A)
        self._action_dims: dict[int, int] = {}

    def register_embodiment(self, eid: int, action_dim: int) -> None:
        key = str(eid)
        if key in self.encoders:
            raise ValueError(f"embodiment id {eid} already registered")
        if action_dim <= 0:
            raise ValueError("action_dim must be positive")
        self.encoders[key] = nn.Linear(action_dim, self.dim, dtype=self._dtype)
        self.decoders[key] = nn.Linear(self.dim, action_dim, dtype=self._dtype)
        self._action_dims[eid] = action_dim

    def action_dim(self, eid: int) -> int:
        try:
            return self._action_dims[eid]
        except KeyError:
            raise KeyError(f"embodiment id {eid} not registered with the denoiser") from None

    def condition_memories(self, h_vl: torch.Tensor, h_p: torch.Tensor):
        """Project raw conditioning features into the hidden width once per
        sampling call; fixed across denoising iterations."""
        if h_vl.dim() == 2:
            h_vl = h_vl[None]
        if h_p.dim() == 2:
            h_p = h_p[None]
        return self.vl_proj(h_vl), self.p_proj(h_p)

    def predict_velocity(
        self,
        noisy: torch.Tensor,
        lam,
        mem_vl: torch.Tensor,
        mem_p: torch.Tensor,
        eid: int,
        vl_mask: torch.Tensor | None = None,
        gate_override=None,
        memories_projected: bool = True,
    ) -> torch.Tensor:
        """noisy: (B?, chunk_len, A) normalized actions; lam: flow time in
        [0, 1], scalar or (B,). Returns a velocity array of the same shape."""
        batched = noisy.dim() == 3
        if not batched:
            noisy = noisy[None]
        b = noisy.shape[0]
        if noisy.shape[1] != self.chunk_len or noisy.shape[2] != self.action_dim(eid):
            raise ValueError(
                f"expected chunk ({self.chunk_len}, {self.action_dim(eid)}), "
                f"got {tuple(noisy.shape[1:])}"
            )
        lam_t = torch.as_tensor(lam, dtype=noisy.dtype, device=noisy.device).reshape(-1)
        if lam_t.numel() == 1:
            lam_t = lam_t.expand(b)
        if bool((lam_t < 0).any() or (lam_t > 1).any()):
            raise ValueError("flow time must lie in [0, 1]")
        if not memories_projected:
            mem_vl, mem_p = self.condition_memories(mem_vl, mem_p)
        if mem_vl.dim() == 2:
            mem_vl = mem_vl[None].expand(b, -1, -1)
        if mem_p.dim() == 2:
            mem_p = mem_p[None].expand(b, -1, -1)

        x = self.encoders[str(eid)](noisy)
        x = x + self.time_pos[None]
        x = x + self.flow_time_proj(sinusoidal_embedding(lam_t, self.dim))[:, None, :]
        for block in self.blocks:
            x = block(x, mem_vl, mem_p, vl_mask=vl_mask, gate_override=gate_override)
        vel = self.decoders[str(eid)](self.out_norm(x))
        return vel if batched else vel[0]


def sample_actions(
    denoiser: ActionDenoiser,
    h_vl: torch.Tensor,
    h_p: torch.Tensor,
    eid: int,
    steps: int = 10,
    seed: int | None = None,
    slot_mask: np.ndarray | None = None,
    stats=None,
    gate_override=None,
    velocity_fn=None,
) -> ActionChunk:
    """Euler-integrate the velocity field from Gaussian noise.

    A_0 ~ N(0, I); A_{k+1} = A_k + (1/steps) * v(A_k, k/steps). The result
    is denormalized through ``stats`` when given. ``velocity_fn(noisy, lam)``
    replaces the model's field (oracle stubs in tests).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    chunk_len = denoiser.chunk_len
    act_dim = denoiser.action_dim(eid)
    gen = torch.Generator()
    if seed is not None:
        gen.manual_seed(int(seed))
    dtype = denoiser.time_pos.dtype
    x = torch.randn(chunk_len, act_dim, generator=gen, dtype=dtype)

    if velocity_fn is None:
        mem_vl, mem_p = denoiser.condition_memories(
            h_vl.to(dtype), h_p.to(dtype)
        )

        def velocity_fn(noisy, lam):
            return denoiser.predict_velocity(
                noisy, lam, mem_vl, mem_p, eid, gate_override=gate_override
            )

    dt = 1.0 / steps
    with torch.no_grad():
        for k in range(steps):
            x = x + dt * velocity_fn(x, k / steps)

    actions = x.cpu().numpy().astype(np.float64)
    if stats is not None:
        actions = stats.denormalize_action(actions)
    if slot_mask is None:
        slot_mask = np.zeros(act_dim, dtype=np.int64)
    return ActionChunk(actions=actions, slot_mask=slot_mask)


def interpolate_actions(chunk: ActionChunk, factor: int) -> ActionChunk:
    """Upsample a chunk to factor*(chunk_len-1)+1 steps: arm and hand
    dimensions are linearly interpolated, every other dimension holds the
    most recent value (zero-order hold at matching timestamps)."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return ActionChunk(actions=chunk.actions.copy(), slot_mask=chunk.slot_mask.copy())
    t_in = chunk.chunk_len
    t_out = factor * (t_in - 1) + 1
    pos = np.arange(t_out) / factor  # fractional source index
    out = np.empty((t_out, chunk.action_dim), dtype=np.float64)

    smooth = np.array([int(s) in {int(x) for x in ARM_HAND_SLOTS} for s in chunk.slot_mask])
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, t_in - 1)
    frac = (pos - lo)[:, None]
    interp = (1.0 - frac) * chunk.actions[lo] + frac * chunk.actions[hi]
    hold = chunk.actions[lo]
    out[:, smooth] = interp[:, smooth]
    out[:, ~smooth] = hold[:, ~smooth]
    return ActionChunk(actions=out, slot_mask=chunk.slot_mask.copy())


def slot_mask_for(spec: EmbodimentSpec) -> np.ndarray:
    return spec.action_slot_mask()
