"""Visual-language context encoder and the history query feature cache.

The encoder is a small stand-in with the same interface a large
vision-language backbone would have: it jointly encodes
[language tokens, visual patches, query token] in one forward pass and
returns the three feature groups. The cache keeps the last few per-step
query features so downstream modules see recent context without
re-encoding past frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn


@dataclass
class Observation:
    """One timestep of sensory input: an H x W x C image in [0, 1] and a
    tokenized instruction."""

    image: np.ndarray
    instruction: np.ndarray

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.ndim != 3:
            raise ValueError(f"image must be HxWxC, got shape {self.image.shape}")
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        self.instruction = np.asarray(self.instruction, dtype=np.int64).reshape(-1)


@dataclass
class ContextFeatures:
    """Outputs of one joint encoder forward: language features L',
    visual features V', and the single query feature Q'."""

    lang: torch.Tensor  # (n_L, d_c)
    vis: torch.Tensor  # (n_V, d_c)
    query: torch.Tensor  # (1, d_c)

    def memory(self, history: torch.Tensor | None = None) -> torch.Tensor:
        """Concatenated conditioning memory [L'; V'; history snapshot]."""
        parts = [self.lang, self.vis]
        if history is not None and history.shape[0] > 0:
            parts.append(history)
        return torch.cat(parts, dim=0)


class HistoryCache:
    """Fixed-capacity FIFO of past query features (capacity = window + 1).

    Entries are stored by value (detached clones), oldest first.
    """

    def __init__(self, window: int = 2, feature_dim: int | None = None):
        if window < 0:
            raise ValueError("window must be >= 0")
        self.window = window
        self.feature_dim = feature_dim
        self._entries: list[torch.Tensor] = []

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def capacity(self) -> int:
        return self.window + 1

    def push(self, q: torch.Tensor) -> None:
        q = torch.as_tensor(q)
        if q.dim() == 1:
            q = q[None]
        if q.shape[0] != 1:
            raise ValueError("cache entries are single query features")
        if self.feature_dim is not None and q.shape[1] != self.feature_dim:
            raise ValueError(
                f"query feature dim {q.shape[1]} != cache dim {self.feature_dim}"
            )
        if self.feature_dim is None:
            self.feature_dim = q.shape[1]
        self._entries.append(q.detach().clone())
        if len(self._entries) > self.capacity:
            self._entries.pop(0)

    def snapshot(self) -> torch.Tensor:
        """Current entries, oldest -> newest, as an (n, d_c) tensor (n may be
        0 right after reset)."""
        if not self._entries:
            dim = self.feature_dim or 0
            return torch.zeros(0, dim)
        return torch.cat(self._entries, dim=0).clone()

    def reset(self) -> None:
        self._entries.clear()


class _EncoderBlock(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x):
        h = self.norm1(x)
        a, _ = self.attn(h, h, h, need_weights=False)
        x = x + a
        return x + self.mlp(self.norm2(x))


class ContextEncoder(nn.Module):
    """Joint [L, V, Q] -> [L', V', Q'] encoder.

    Patch-embeds the image, embeds instruction tokens, appends one learned
    query token, and runs a small bidirectional attention stack. The query
    token parameter is shared across timesteps; freshness comes from
    re-encoding it with the current frame every step.
    """

    def __init__(
        self,
        vocab_size: int,
        image_size: int = 32,
        channels: int = 3,
        patch_size: int = 8,
        dim: int = 256,
        layers: int = 2,
        heads: int = 4,
        max_instruction_len: int = 16,
    ):
        super().__init__()
        if image_size % patch_size != 0:
            raise ValueError("patch size must divide image size")
        self.image_size = image_size
        self.channels = channels
        self.patch_size = patch_size
        self.dim = dim
        self.max_instruction_len = max_instruction_len
        self.vocab_size = vocab_size

        n_patches = (image_size // patch_size) ** 2
        # two fixed coordinate channels are appended to every image so patch
        # embeddings can express spatial moments (e.g. blob centroids) linearly
        axis = torch.linspace(0.0, 1.0, image_size)
        gy, gx = torch.meshgrid(axis, axis, indexing="ij")
        self.register_buffer("coord_grid", torch.stack([gx, gy], dim=-1))
        self.patch_proj = nn.Linear(patch_size * patch_size * (channels + 2), dim)
        self.token_embed = nn.Embedding(vocab_size, dim)
        self.lang_pos = nn.Parameter(torch.randn(max_instruction_len, dim) * 0.02)
        self.vis_pos = nn.Parameter(torch.randn(n_patches, dim) * 0.02)
        self.query_token = nn.Parameter(torch.randn(1, dim) * 0.02)
        self.blocks = nn.ModuleList([_EncoderBlock(dim, heads) for _ in range(layers)])
        self.out_norm = nn.LayerNorm(dim)

        self.forward_calls = 0  # per-step cost accounting, checked in tests

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def _patchify(self, image: torch.Tensor) -> torch.Tensor:
        p = self.patch_size
        h, w, c = image.shape
        g = h // p
        x = image.reshape(g, p, w // p, p, c).permute(0, 2, 1, 3, 4)
        return x.reshape(g * (w // p), p * p * c)

    def forward(self, obs: Observation) -> ContextFeatures:
        self.forward_calls += 1
        image = torch.as_tensor(obs.image)
        if image.shape != (self.image_size, self.image_size, self.channels):
            raise ValueError(
                f"expected image {(self.image_size, self.image_size, self.channels)}, "
                f"got {tuple(image.shape)}"
            )
        tokens = torch.as_tensor(obs.instruction)
        if tokens.numel() > self.max_instruction_len:
            raise ValueError("instruction longer than configured max")
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
            raise ValueError("instruction token id outside vocabulary")

        dtype = self.query_token.dtype
        lang = self.token_embed(tokens) + self.lang_pos[: tokens.numel()]
        image = torch.cat([image.to(dtype), self.coord_grid.to(dtype)], dim=-1)
        vis = self.patch_proj(self._patchify(image)) + self.vis_pos
        seq = torch.cat([lang, vis, self.query_token], dim=0)[None]
        for block in self.blocks:
            seq = block(seq)
        seq = self.out_norm(seq)[0]

        n_l = tokens.numel()
        n_v = vis.shape[0]
        return ContextFeatures(
            lang=seq[:n_l], vis=seq[n_l : n_l + n_v], query=seq[n_l + n_v :]
        )

    def encode(self, obs: Observation) -> ContextFeatures:
        """Deterministic eval-mode encoding (no grad)."""
        was_training = self.training
        self.eval()
        with torch.no_grad():
            feats = self.forward(obs)
        if was_training:
            self.train()
        return feats


def load_vocabulary(path) -> dict:
    """Read a token -> id mapping from a YAML file."""
    import yaml

    with open(path) as f:
        vocab = yaml.safe_load(f)
    if not isinstance(vocab, dict):
        raise ValueError("vocabulary file must map token -> id")
    return {str(k): int(v) for k, v in vocab.items()}
