"""Canonical body-part slot vocabulary and embodiment declarations.

Every embodiment, no matter how its raw proprioceptive vector is laid out,
is described against the same fixed set of 9 canonical slots. Slots absent
from an embodiment are represented downstream by learned missing-part
tokens, so the latent state grid has the same shape everywhere.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import yaml


class CanonicalSlot(enum.IntEnum):
    """Fixed body-part slot vocabulary. The integer value is the row index
    used everywhere (latent grids, positional embeddings, heatmaps)."""

    LEFT_ARM = 0
    RIGHT_ARM = 1
    LEFT_HAND = 2
    RIGHT_HAND = 3
    LEFT_LEG = 4
    RIGHT_LEG = 5
    HEAD = 6
    WAIST = 7
    OTHERS = 8

    @property
    def key(self) -> str:
        return self.name.lower()

    @classmethod
    def from_key(cls, key: str) -> "CanonicalSlot":
        try:
            return cls[key.upper()]
        except KeyError:
            raise ValueError(f"unknown canonical slot {key!r}") from None


NUM_SLOTS = len(CanonicalSlot)  # P = 9, constant across embodiments

ARM_HAND_SLOTS = frozenset(
    {
        CanonicalSlot.LEFT_ARM,
        CanonicalSlot.RIGHT_ARM,
        CanonicalSlot.LEFT_HAND,
        CanonicalSlot.RIGHT_HAND,
    }
)


def _check_dims(dims: dict, what: str) -> dict:
    out = {}
    for slot, dim in dims.items():
        if not isinstance(slot, CanonicalSlot):
            slot = CanonicalSlot.from_key(str(slot))
        if not isinstance(dim, (int, np.integer)) or dim <= 0:
            raise ValueError(f"{what} dim for {slot.key} must be a positive int, got {dim!r}")
        out[slot] = int(dim)
    return out


@dataclass(frozen=True)
class EmbodimentSpec:
    """Declares which canonical slots an embodiment has and their raw sizes.

    A slot may appear in the state but not in the action space (e.g. robots
    whose lower body is state-only); the reverse is rejected.
    """

    name: str
    state_dims: dict = field(default_factory=dict)
    action_dims: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.name:
            raise ValueError("embodiment name must be non-empty")
        object.__setattr__(self, "state_dims", _check_dims(self.state_dims, "state"))
        object.__setattr__(self, "action_dims", _check_dims(self.action_dims, "action"))
        if not self.state_dims:
            raise ValueError(f"embodiment {self.name!r} declares no state slots")
        extra = set(self.action_dims) - set(self.state_dims)
        if extra:
            names = sorted(s.key for s in extra)
            raise ValueError(f"actuated slots missing from state: {names}")

    # -- derived layout -----------------------------------------------------

    @property
    def present_slots(self) -> list:
        return [s for s in CanonicalSlot if s in self.state_dims]

    @property
    def actuated_slots(self) -> list:
        return [s for s in CanonicalSlot if s in self.action_dims]

    @property
    def state_dim(self) -> int:
        return sum(self.state_dims.values())

    @property
    def action_dim(self) -> int:
        return sum(self.action_dims.values())

    def state_slices(self) -> dict:
        """Slot -> slice into the concatenated raw state vector (slot order)."""
        out, off = {}, 0
        for slot in CanonicalSlot:
            if slot in self.state_dims:
                out[slot] = slice(off, off + self.state_dims[slot])
                off += self.state_dims[slot]
        return out

    def action_slices(self) -> dict:
        out, off = {}, 0
        for slot in CanonicalSlot:
            if slot in self.action_dims:
                out[slot] = slice(off, off + self.action_dims[slot])
                off += self.action_dims[slot]
        return out

    def action_slot_mask(self) -> np.ndarray:
        """Per-action-dimension canonical slot index, length action_dim."""
        mask = np.empty(self.action_dim, dtype=np.int64)
        for slot, sl in self.action_slices().items():
            mask[sl] = int(slot)
        return mask

    def state_slot_mask(self) -> np.ndarray:
        mask = np.empty(self.state_dim, dtype=np.int64)
        for slot, sl in self.state_slices().items():
            mask[sl] = int(slot)
        return mask

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "state_dims": {s.key: d for s, d in self.state_dims.items()},
            "action_dims": {s.key: d for s, d in self.action_dims.items()},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EmbodimentSpec":
        unknown = set(doc) - {"name", "state_dims", "action_dims"}
        if unknown:
            raise ValueError(f"unknown embodiment spec keys: {sorted(unknown)}")
        return cls(
            name=doc["name"],
            state_dims=doc.get("state_dims", {}),
            action_dims=doc.get("action_dims", {}),
        )

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "EmbodimentSpec":
        return cls.from_dict(yaml.safe_load(text))


@dataclass
class ProprioState:
    """Raw proprioceptive state of one embodiment at one timestep, stored as
    the concatenation of per-slot vectors in canonical slot order.
    Values are expected in normalized (z-scored) units."""

    spec: EmbodimentSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.shape[0] != self.spec.state_dim:
            raise ValueError(
                f"state length {self.values.shape[0]} does not match "
                f"{self.spec.name!r} state dim {self.spec.state_dim}"
            )

    def slot_values(self, slot: CanonicalSlot) -> np.ndarray:
        sl = self.spec.state_slices().get(slot)
        if sl is None:
            raise KeyError(f"{self.spec.name!r} has no {slot.key} slot")
        return self.values[sl]


STD_FLOOR = 1e-6  # clamp for constant channels


@dataclass
class NormalizationStats:
    """Per-embodiment, per-dimension z-score statistics for states and actions.

    Dimensions whose raw std fell below the floor are clamped and listed in
    ``clamped`` as ("state"|"action", dim_index).
    """

    embodiment: str
    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray
    clamped: list = field(default_factory=list)

    @classmethod
    def from_data(cls, embodiment, states, actions) -> "NormalizationStats":
        """states: (N, S), actions: (N, A) raw samples."""
        states = np.asarray(states, dtype=np.float64).reshape(-1, np.shape(states)[-1])
        actions = np.asarray(actions, dtype=np.float64).reshape(-1, np.shape(actions)[-1])
        if states.shape[0] == 0 or actions.shape[0] == 0:
            raise ValueError("cannot compute stats from an empty dataset")
        clamped = []

        def reduce(x, kind):
            mean = x.mean(axis=0)
            std = x.std(axis=0)
            low = std < STD_FLOOR
            for i in np.flatnonzero(low):
                clamped.append((kind, int(i)))
            return mean, np.maximum(std, STD_FLOOR)

        sm, ss = reduce(states, "state")
        am, as_ = reduce(actions, "action")
        return cls(embodiment, sm, ss, am, as_, clamped)

    def normalize_state(self, x):
        return (np.asarray(x, dtype=np.float64) - self.state_mean) / self.state_std

    def denormalize_state(self, x):
        return np.asarray(x, dtype=np.float64) * self.state_std + self.state_mean

    def normalize_action(self, x):
        return (np.asarray(x, dtype=np.float64) - self.action_mean) / self.action_std

    def denormalize_action(self, x):
        return np.asarray(x, dtype=np.float64) * self.action_std + self.action_mean

    def to_dict(self) -> dict:
        return {
            "embodiment": self.embodiment,
            "state_mean": self.state_mean.tolist(),
            "state_std": self.state_std.tolist(),
            "action_mean": self.action_mean.tolist(),
            "action_std": self.action_std.tolist(),
            "clamped": [[k, i] for k, i in self.clamped],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "NormalizationStats":
        return cls(
            embodiment=doc["embodiment"],
            state_mean=np.asarray(doc["state_mean"], dtype=np.float64),
            state_std=np.asarray(doc["state_std"], dtype=np.float64),
            action_mean=np.asarray(doc["action_mean"], dtype=np.float64),
            action_std=np.asarray(doc["action_std"], dtype=np.float64),
            clamped=[(k, int(i)) for k, i in doc.get("clamped", [])],
        )
