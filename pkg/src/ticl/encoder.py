"""ViT-style feature extractor with gated positional self-attention.

A task token is prepended to the embedded patch sequence and read back out
of row 0 after the final layer norm. The token has no spatial position: the
positional attention branch covers patch-to-patch pairs only, and any
attention row or column touching the token comes from the content branch.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    image_side: int = 16
    channels: int = 3
    patch_size: int = 4
    embed_dim: int = 48
    heads: int = 4
    depth: int = 2
    mlp_ratio: float = 4.0
    eps: float = 1e-5
    gate_init: float = 1.0
    locality_strength: float = 1.0
    init_std: float = 0.02

    def __post_init__(self):
        if self.image_side % self.patch_size:
            raise ValueError(f"image_side {self.image_side} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    @property
    def grid(self) -> int:
        return self.image_side // self.patch_size

    @property
    def patch_count(self) -> int:
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.channels

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "desk": EncoderConfig(image_side=16, patch_size=4, embed_dim=48, heads=4, depth=2),
    "full": EncoderConfig(image_side=32, patch_size=4, embed_dim=192, heads=12, depth=6),
    "tiny": EncoderConfig(image_side=8, patch_size=4, embed_dim=8, heads=2, depth=1, mlp_ratio=2.0),
}


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """Split ``[..., C, S, S]`` images into raster-ordered, channel-major patch rows.

    Returns ``[..., N, P*P*C]`` with ``N = (S/P)**2``.
    """
    images = np.asarray(images)
    *lead, c, h, w = images.shape
    if h != w:
        raise ValueError(f"images must be square, got {h}x{w}")
    if h % patch_size:
        raise ValueError(f"side {h} not divisible by patch size {patch_size}")
    g = h // patch_size
    x = images.reshape(*lead, c, g, patch_size, g, patch_size)
    nl = len(lead)
    # -> lead, gy, gx, c, py, px
    x = x.transpose(*range(nl), nl + 1, nl + 3, nl, nl + 2, nl + 4)
    return np.ascontiguousarray(x.reshape(*lead, g * g, c * patch_size * patch_size))


def relative_offset_index(grid: int) -> np.ndarray:
    """``[N, N]`` index into a ``(2g-1)**2`` table of 2-D offsets (dy, dx) from query to key."""
    ys, xs = np.divmod(np.arange(grid * grid), grid)
    dy = ys[None, :] - ys[:, None] + grid - 1
    dx = xs[None, :] - xs[:, None] + grid - 1
    return dy * (2 * grid - 1) + dx


def _local_init(grid: int, heads: int, strength: float) -> np.ndarray:
    # Each head prefers one offset on a small square around the query patch.
    side = int(math.ceil(math.sqrt(heads)))
    span = np.arange(side) - (side - 1) / 2.0
    centers = [(cy, cx) for cy in span for cx in span][:heads]
    offs = np.arange(-(grid - 1), grid)
    oy, ox = np.meshgrid(offs, offs, indexing="ij")
    table = np.stack([-strength * ((oy - cy) ** 2 + (ox - cx) ** 2) for cy, cx in centers])
    return table.reshape(heads, -1)


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)


class Module:
    """Ordered container of named parameters."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in self.__dict__.items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def freeze(self) -> None:
        for p in self.parameters():
            p.freeze()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            if p.shape != tuple(state[name].shape):
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data[...] = state[name]


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng, std: float, dtype, zero: bool = False):
        w = np.zeros((fan_in, fan_out)) if zero else _trunc_normal(rng, (fan_in, fan_out), std)
        self.weight = Parameter(w, dtype=dtype)
        self.bias = Parameter(np.zeros(fan_out), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float, dtype):
        self.gamma = Parameter(np.ones(dim), dtype=dtype)
        self.beta = Parameter(np.zeros(dim), dtype=dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


class PatchEmbedding(Linear):
    """Projection ``E`` of shape ``(P*P*C) x D`` plus bias."""


class GPSABlock(Module):
    """Pre-norm transformer block whose attention is gated positional self-attention."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        d, h = config.embed_dim, config.heads
        std = config.init_std
        self.config = config
        self.norm1 = LayerNorm(d, config.eps, dtype)
        self.qkv = Linear(d, 3 * d, rng, std, dtype)
        self.pos_scores = Parameter(_local_init(config.grid, h, config.locality_strength), dtype=dtype)
        self.gate = Parameter(np.full(h, config.gate_init), dtype=dtype)
        self.proj = Linear(d, d, rng, std, dtype)
        self.norm2 = LayerNorm(d, config.eps, dtype)
        self.fc1 = Linear(d, config.mlp_hidden, rng, std, dtype)
        self.fc2 = Linear(config.mlp_hidden, d, rng, std, dtype)
        self._rel_index = relative_offset_index(config.grid)
        row_mask = np.ones((1, config.patch_count + 1, 1))
        row_mask[0, 0, 0] = 0.0
        self._row_mask = row_mask.astype(dtype)

    def positional_attention(self) -> Tensor:
        """``[H, T, T]`` positional attention; token row and column are zero."""
        n = self.config.patch_count
        h = self.config.heads
        pos = ad.softmax(self.pos_scores[:, self._rel_index], axis=-1)
        zeros_col = Tensor(np.zeros((h, n, 1), dtype=pos.dtype))
        zeros_row = Tensor(np.zeros((h, 1, n + 1), dtype=pos.dtype))
        return ad.concat([zeros_row, ad.concat([zeros_col, pos], axis=2)], axis=1)

    def gate_weights(self) -> Tensor:
        """``[H, T, 1]`` per-row positional weight: sigma(gate) on patch rows, 0 on the token row."""
        g = ad.sigmoid(self.gate).reshape(self.config.heads, 1, 1)
        return g * Tensor(self._row_mask)

    def attention(self, z: Tensor) -> tuple[Tensor, Tensor]:
        """Return the mixed attention ``[B, H, T, T]`` and the values ``[B, H, T, dh]``."""
        c = self.config
        b, t, d = z.shape
        if t != c.patch_count + 1 or d != c.embed_dim:
            raise ad.ShapeError(f"GPSA expects [B, {c.patch_count + 1}, {c.embed_dim}], got {z.shape}")
        qkv = self.qkv(z).reshape(b, t, 3, c.heads, c.head_dim).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(c.head_dim))
        content = ad.softmax(scores, axis=-1)
        gw = self.gate_weights()
        attn = content - content * gw + self.positional_attention() * gw
        return attn, v

    def gpsa(self, z: Tensor) -> Tensor:
        b, t, d = z.shape
        attn, v = self.attention(z)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
        return self.proj(out)

    def mlp(self, z: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(z)))

    def __call__(self, z: Tensor) -> Tensor:
        z = self.gpsa(self.norm1(z)) + z
        return self.mlp(self.norm2(z)) + z


class FeatureExtractor(Module):
    def __init__(self, config: EncoderConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.config = config
        self.dtype = np.dtype(dtype)
        self.embed = PatchEmbedding(config.patch_dim, config.embed_dim, rng, config.init_std, dtype)
        self.blocks = [GPSABlock(config, rng, dtype) for _ in range(config.depth)]
        self.norm = LayerNorm(config.embed_dim, config.eps, dtype)
        for name, p in self.named_parameters():
            p.name = name

    def embed_and_prepend(self, patches: np.ndarray, tokens: Tensor) -> Tensor:
        """``z_0``: token rows followed by embedded patches, ``[B, N+1, D]``.

        ``tokens`` is one ``[D]`` token shared by the batch or ``[B, D]`` per sample.
        """
        c = self.config
        patches = np.asarray(patches, dtype=self.dtype)
        if patches.ndim != 3 or patches.shape[1:] != (c.patch_count, c.patch_dim):
            raise ad.ShapeError(f"patches must be [B, {c.patch_count}, {c.patch_dim}], got {patches.shape}")
        b = patches.shape[0]
        if tokens.shape == (c.embed_dim,):
            tok = ad.broadcast_to(tokens.reshape(1, 1, c.embed_dim), (b, 1, c.embed_dim))
        elif tokens.shape == (b, c.embed_dim):
            tok = tokens.reshape(b, 1, c.embed_dim)
        else:
            raise ad.ShapeError(f"token shape {tokens.shape} incompatible with batch {b}, dim {c.embed_dim}")
        return ad.concat([tok, self.embed(Tensor(patches))], axis=1)

    def forward_tokens(self, patches: np.ndarray, tokens: Tensor) -> Tensor:
        """Full ``z_L`` after the final layer norm, ``[B, N+1, D]``."""
        z = self.embed_and_prepend(patches, tokens)
        for block in self.blocks:
            z = block(z)
        return self.norm(z)

    def __call__(self, images: np.ndarray, tokens: Tensor) -> Tensor:
        """Features ``u`` (row 0 of ``z_L``) for ``[B, C, S, S]`` images, ``[B, D]``."""
        images = np.asarray(images)
        c = self.config
        if images.ndim != 4 or images.shape[1:] != (c.channels, c.image_side, c.image_side):
            raise ad.ShapeError(
                f"images must be [B, {c.channels}, {c.image_side}, {c.image_side}], got {images.shape}")
        return self.forward_tokens(patchify(images, c.patch_size), tokens)[:, 0, :]

    def copy(self, frozen: bool = False) -> "FeatureExtractor":
        """Deep copy with bit-identical weights."""
        new = object.__new__(FeatureExtractor)
        new.config = self.config
        new.dtype = self.dtype
        new.embed = _clone_module(self.embed, frozen)
        new.blocks = [_clone_module(b, frozen) for b in self.blocks]
        new.norm = _clone_module(self.norm, frozen)
        return new


def _clone_module(m: Module, frozen: bool) -> Module:
    new = object.__new__(type(m))
    for key, val in m.__dict__.items():
        if isinstance(val, Parameter):
            val = val.clone(frozen=frozen or val.frozen)
        elif isinstance(val, Module):
            val = _clone_module(val, frozen)
        elif isinstance(val, list):
            val = [_clone_module(v, frozen) if isinstance(v, Module) else v for v in val]
        new.__dict__[key] = val
    return new


def extract_feature(fe: FeatureExtractor, images: np.ndarray, token) -> Tensor:
    """Feature vector(s) for ``images`` under ``token`` (a TaskToken, Parameter or Tensor)."""
    tok = getattr(token, "param", token)
    return fe(images, tok)
