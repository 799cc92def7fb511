"""Dataset shards, normalization statistics, and windowed sampling.

Shard format (one ``<embodiment>_<i>.npz`` per shard, documented in the
README): arrays keyed by field name —
  states        (N, T, S) float32, raw units
  actions       (N, T, A) float32, raw units, executed (replay-exact)
  expert_actions (N, T, A) float32, raw units, imitation labels
  images        (N, T, H, W, 3) uint8
  instructions  (N, L) int64, right-padded with the ``pad`` token
  instruction_lengths (N,) int64
  seeds, task_ids      (N,) int64
A ``manifest.yaml`` lists embodiments, shard files, per-embodiment
normalization stats, and the build config; ``vocab.yaml`` maps tokens to
ids.
"""

from __future__ import annotations

import pathlib
from dataclasses import dataclass

import numpy as np
import yaml

from .slots import EmbodimentSpec, NormalizationStats
from . import synthworld
from .synthworld import TASKS, VOCAB, generate_episode


class DataError(Exception):
    """Missing, malformed, or incompatible dataset artifacts."""


def build_dataset(
    out_dir,
    embodiments: list[EmbodimentSpec] | None = None,
    episodes_per_embodiment: int = 100,
    tasks=TASKS,
    seed: int = 0,
    episodes_per_shard: int = 100,
    episode_len: int = synthworld.EPISODE_LEN,
    action_noise: float = 0.0,
) -> pathlib.Path:
    """Generate scripted episodes for every embodiment, write shards and the
    manifest, and return the manifest path."""
    if episodes_per_embodiment < 1:
        raise DataError("need at least one episode per embodiment")
    if not tasks:
        raise DataError("task list is empty")
    if action_noise < 0.0:
        raise DataError("action noise must be non-negative")
    for task in tasks:
        if task not in TASKS:
            raise DataError(f"unknown task {task!r}")
    embodiments = embodiments or synthworld.toy_embodiments()
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    manifest = {
        "dt": synthworld.DT,
        "episode_len": int(episode_len),
        "image_size": synthworld.IMAGE_SIZE,
        "seed": int(seed),
        "tasks": list(tasks),
        "action_noise": float(action_noise),
        "embodiments": [],
    }
    with open(out / "vocab.yaml", "w") as f:
        yaml.safe_dump(VOCAB, f, sort_keys=False)

    for ei, spec in enumerate(embodiments):
        episodes = []
        for n in range(episodes_per_embodiment):
            task = tasks[n % len(tasks)]
            episodes.append(
                generate_episode(spec, task, seed=seed * 1_000_000 + ei * 10_000 + n,
                                 length=episode_len, action_noise=action_noise)
            )
        # action stats come from the clean labels, which are what the
        # policy is trained to produce
        stats = NormalizationStats.from_data(
            spec.name,
            np.concatenate([ep.states for ep in episodes]),
            np.concatenate([ep.expert_actions for ep in episodes]),
        )
        shard_files = []
        for si in range(0, len(episodes), episodes_per_shard):
            block = episodes[si : si + episodes_per_shard]
            fname = f"{spec.name}_{si // episodes_per_shard:03d}.npz"
            instr = np.zeros((len(block), synthworld.MAX_INSTRUCTION_LEN), dtype=np.int64)
            lengths = np.zeros(len(block), dtype=np.int64)
            for i, ep in enumerate(block):
                lengths[i] = ep.instruction.shape[0]
                instr[i, : lengths[i]] = ep.instruction
            np.savez_compressed(
                out / fname,
                states=np.stack([ep.states for ep in block]).astype(np.float32),
                actions=np.stack([ep.actions for ep in block]).astype(np.float32),
                expert_actions=np.stack(
                    [ep.expert_actions for ep in block]
                ).astype(np.float32),
                images=np.stack([ep.images for ep in block]),
                instructions=instr,
                instruction_lengths=lengths,
                seeds=np.array([ep.seed for ep in block], dtype=np.int64),
                task_ids=np.array([TASKS.index(ep.task) for ep in block], dtype=np.int64),
            )
            shard_files.append({"file": fname, "episodes": len(block)})
        manifest["embodiments"].append(
            {
                "spec": spec.to_dict(),
                "episodes": len(episodes),
                "shards": shard_files,
                "stats": stats.to_dict(),
            }
        )

    path = out / "manifest.yaml"
    with open(path, "w") as f:
        yaml.safe_dump(manifest, f, sort_keys=False)
    return path


@dataclass
class _EmbodimentData:
    spec: EmbodimentSpec
    stats: NormalizationStats
    states: np.ndarray  # (N, T, S) normalized float32
    actions: np.ndarray  # (N, T, A) normalized float32
    images: np.ndarray  # (N, T, H, W, 3) uint8
    instructions: np.ndarray
    instruction_lengths: np.ndarray


class WindowDataset:
    """Loads a built dataset and serves training windows.

    A window at (episode, t) bundles: the observation at t (plus the two
    previous frames for the history cache), the normalized current state,
    the next ``state_horizon`` states, and the next ``chunk_len`` actions.
    Windows are only drawn where the episode is long enough.
    """

    def __init__(self, manifest_path, state_horizon: int, chunk_len: int,
                 history_window: int = 2):
        manifest_path = pathlib.Path(manifest_path)
        if not manifest_path.exists():
            raise DataError(f"manifest not found: {manifest_path}")
        with open(manifest_path) as f:
            self.manifest = yaml.safe_load(f)
        self.root = manifest_path.parent
        self.state_horizon = state_horizon
        self.chunk_len = chunk_len
        self.history_window = history_window
        self.dt = float(self.manifest["dt"])

        self.embodiments: list[_EmbodimentData] = []
        for entry in self.manifest["embodiments"]:
            spec = EmbodimentSpec.from_dict(entry["spec"])
            stats = NormalizationStats.from_dict(entry["stats"])
            states, actions, images, instrs, lens = [], [], [], [], []
            for shard in entry["shards"]:
                p = self.root / shard["file"]
                if not p.exists():
                    raise DataError(f"missing shard file: {p}")
                with np.load(p) as z:
                    states.append(z["states"])
                    # train on the clean labels; fall back to the executed
                    # actions for datasets built without exploration noise
                    actions.append(
                        z["expert_actions"] if "expert_actions" in z else z["actions"]
                    )
                    images.append(z["images"])
                    instrs.append(z["instructions"])
                    lens.append(z["instruction_lengths"])
            states = np.concatenate(states)
            actions = np.concatenate(actions)
            self.embodiments.append(
                _EmbodimentData(
                    spec=spec,
                    stats=stats,
                    states=stats.normalize_state(states).astype(np.float32),
                    actions=stats.normalize_action(actions).astype(np.float32),
                    images=np.concatenate(images),
                    instructions=np.concatenate(instrs),
                    instruction_lengths=np.concatenate(lens),
                )
            )
        t = self.embodiments[0].states.shape[1]
        self.min_t = history_window
        self.max_t = t - max(state_horizon + 1, chunk_len)
        if self.max_t < self.min_t:
            raise DataError("episodes too short for the configured horizons")

    @property
    def num_embodiments(self) -> int:
        return len(self.embodiments)

    def spec(self, ei: int) -> EmbodimentSpec:
        return self.embodiments[ei].spec

    def stats(self, ei: int) -> NormalizationStats:
        return self.embodiments[ei].stats

    def sample_window(self, ei: int, rng: np.random.Generator) -> dict:
        emb = self.embodiments[ei]
        n = emb.states.shape[0]
        e = int(rng.integers(0, n))
        t = int(rng.integers(self.min_t, self.max_t + 1))
        return self.window(ei, e, t)

    def window(self, ei: int, episode: int, t: int) -> dict:
        emb = self.embodiments[ei]
        if not self.min_t <= t <= self.max_t:
            raise DataError(f"window start {t} outside [{self.min_t}, {self.max_t}]")
        h = self.history_window
        length = int(emb.instruction_lengths[episode])
        return {
            "embodiment_index": ei,
            "instruction": emb.instructions[episode, :length],
            "frames": emb.images[episode, t - h : t + 1].astype(np.float32) / 255.0,
            "state": emb.states[episode, t],
            "future_states": emb.states[episode, t + 1 : t + 1 + self.state_horizon],
            "action_chunk": emb.actions[episode, t : t + self.chunk_len],
            "state_mask": np.ones(emb.spec.state_dim, dtype=np.float32),
            "action_mask": np.ones(emb.spec.action_dim, dtype=np.float32),
        }

    def persistence_mse(self, ei: int | None = None) -> float:
        """MSE (normalized units) of predicting every future state equal to
        the current state, averaged over all valid windows. The reference
        any trained predictor must beat."""
        total, count = 0.0, 0
        targets = range(len(self.embodiments)) if ei is None else [ei]
        for i in targets:
            s = self.embodiments[i].states.astype(np.float64)  # (N, T, S)
            for t in range(self.min_t, self.max_t + 1):
                diff = s[:, t + 1 : t + 1 + self.state_horizon] - s[:, t : t + 1]
                total += float((diff**2).sum())
                count += diff.size
        return total / count
