"""Per-embodiment encoders/decoders between raw states and the shared
P x d part-latent grid.

Each (embodiment, slot) pair owns a single affine map in and out of the
latent space; slots an embodiment lacks are filled with that slot's learned
missing-part token, which is shared across embodiments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .slots import NUM_SLOTS, CanonicalSlot, EmbodimentSpec, ProprioState


@dataclass
class PartLatentGrid:
    """P x d latent grid plus the per-slot presence mask. Rows for absent
    slots are exactly the stored missing-token parameter values."""

    latents: torch.Tensor  # (..., P, d)
    presence: torch.Tensor  # (P,) bool

    def __post_init__(self):
        if self.latents.shape[-2] != NUM_SLOTS:
            raise ValueError(f"grid must have {NUM_SLOTS} slot rows, got {self.latents.shape}")
        if self.presence.shape != (NUM_SLOTS,):
            raise ValueError("presence mask must have one entry per canonical slot")


class PartCodec(nn.Module):
    """Registry of per-embodiment slot encoders/decoders and the shared
    missing-part tokens."""

    def __init__(self, latent_dim: int = 768, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.latent_dim = latent_dim
        self.missing_tokens = nn.Parameter(
            torch.randn(NUM_SLOTS, latent_dim, dtype=dtype) * 0.02
        )
        self.encoders = nn.ModuleDict()
        self.decoders = nn.ModuleDict()
        self._specs: list[EmbodimentSpec] = []
        self._dtype = dtype

    # -- registry -----------------------------------------------------------

    def register_embodiment(self, spec: EmbodimentSpec) -> int:
        if any(s.name == spec.name for s in self._specs):
            raise ValueError(f"embodiment {spec.name!r} already registered")
        eid = len(self._specs)
        self._specs.append(spec)
        enc = nn.ModuleDict()
        dec = nn.ModuleDict()
        for slot, dim in spec.state_dims.items():
            enc[slot.key] = nn.Linear(dim, self.latent_dim, dtype=self._dtype)
            dec[slot.key] = nn.Linear(self.latent_dim, dim, dtype=self._dtype)
        self.encoders[str(eid)] = enc
        self.decoders[str(eid)] = dec
        return eid

    def spec(self, eid: int) -> EmbodimentSpec:
        if not 0 <= eid < len(self._specs):
            raise KeyError(f"unknown embodiment id {eid}")
        return self._specs[eid]

    @property
    def specs(self) -> list:
        return list(self._specs)

    def find(self, name: str) -> int:
        for i, s in enumerate(self._specs):
            if s.name == name:
                return i
        raise KeyError(f"no registered embodiment named {name!r}")

    # -- encode / decode ----------------------------------------------------

    def encode_state(self, eid: int, state) -> PartLatentGrid:
        """Map a raw (already normalized) state vector, or a (B, S) batch of
        them, into the P x d latent grid. Absent slots get missing tokens."""
        spec = self.spec(eid)
        if isinstance(state, ProprioState):
            if state.spec.name != spec.name:
                raise ValueError(
                    f"state is for {state.spec.name!r}, embodiment id {eid} is {spec.name!r}"
                )
            values = torch.as_tensor(state.values, dtype=self._dtype)
        else:
            values = torch.as_tensor(state, dtype=self._dtype)
        if values.shape[-1] != spec.state_dim:
            raise ValueError(
                f"state dim {values.shape[-1]} does not match {spec.name!r} "
                f"({spec.state_dim})"
            )
        batched = values.dim() == 2
        if not batched:
            values = values[None]
        batch = values.shape[0]

        enc = self.encoders[str(eid)]
        slices = spec.state_slices()
        rows = []
        presence = torch.zeros(NUM_SLOTS, dtype=torch.bool)
        for slot in CanonicalSlot:
            if slot in slices:
                rows.append(enc[slot.key](values[:, slices[slot]]))
                presence[int(slot)] = True
            else:
                rows.append(self.missing_tokens[int(slot)].expand(batch, -1))
        latents = torch.stack(rows, dim=1)  # (B, P, d)
        if not batched:
            latents = latents[0]
        return PartLatentGrid(latents=latents, presence=presence)

    def decode_states(self, latents: torch.Tensor, eid: int) -> torch.Tensor:
        """Map (..., T, P, d) latent grids to (..., T, S) normalized states.
        Only present slots are decoded; absent rows are ignored."""
        spec = self.spec(eid)
        if latents.shape[-2] != NUM_SLOTS:
            raise ValueError(f"expected {NUM_SLOTS} slot rows, got {latents.shape}")
        dec = self.decoders[str(eid)]
        cols = []
        for slot in spec.present_slots:
            cols.append(dec[slot.key](latents[..., int(slot), :]))
        return torch.cat(cols, dim=-1)

    # -- bookkeeping --------------------------------------------------------

    def parameter_count(self, eid: int) -> int:
        """Number of encoder+decoder parameters owned by one embodiment."""
        n = 0
        for mod in (self.encoders[str(eid)], self.decoders[str(eid)]):
            n += sum(p.numel() for p in mod.parameters())
        return n


def configure_identity(codec: PartCodec, eid: int) -> None:
    """Set an embodiment's encoders/decoders so that decode(encode(x)) == x
    for present slots: the encoder embeds the raw dims into the leading
    latent coordinates and the decoder projects them back. Requires
    latent_dim >= every slot dim. Used by round-trip tests."""
    spec = codec.spec(eid)
    with torch.no_grad():
        for slot, dim in spec.state_dims.items():
            if dim > codec.latent_dim:
                raise ValueError("latent_dim must be >= slot dim for identity config")
            enc = codec.encoders[str(eid)][slot.key]
            dec = codec.decoders[str(eid)][slot.key]
            enc.weight.zero_()
            enc.bias.zero_()
            enc.weight[:dim, :dim] = torch.eye(dim, dtype=enc.weight.dtype)
            dec.weight.zero_()
            dec.bias.zero_()
            dec.weight[:dim, :dim] = torch.eye(dim, dtype=dec.weight.dtype)


def grids_equal_missing_rows(grid: PartLatentGrid, codec: PartCodec) -> bool:
    """True iff every absent-slot row equals the stored missing token exactly."""
    ok = True
    latents = grid.latents
    if latents.dim() == 2:
        latents = latents[None]
    for slot in CanonicalSlot:
        if not grid.presence[int(slot)]:
            row = codec.missing_tokens[int(slot)].detach()
            ok = ok and bool((latents[:, int(slot), :].detach() == row).all())
    return ok


def states_to_batch(states: list, spec: EmbodimentSpec) -> np.ndarray:
    """Stack ProprioStates of one embodiment into a (B, S) array."""
    arr = np.stack([s.values for s in states])
    if arr.shape[-1] != spec.state_dim:
        raise ValueError("state length mismatch")
    return arr
