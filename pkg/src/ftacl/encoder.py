"""Pre-norm transformer encoder with global or frequency-time factorized attention."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .module import Module, normal, ones, zeros
from .tensor import Tensor
from .tokenizer import PatchEmbed, TokenGrid, TokenizerConfig, patchify

ATTENTION_MODES = ("gsa", "fta")


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 12
    embed_dim: int = 768
    heads: int = 12
    mlp_ratio: int = 4
    attention: str = "fta"
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.attention not in ATTENTION_MODES:
            raise ValueError(f"attention must be one of {ATTENTION_MODES}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads


def default_heads(d: int) -> int:
    return max(1, d // 64)


@dataclass(frozen=True)
class AttentionMask:
    allow: np.ndarray  # (n, n) bool

    @property
    def n(self) -> int:
        return self.allow.shape[0]

    @property
    def nnz(self) -> int:
        return int(self.allow.sum())


def build_gsa_mask(grid: TokenGrid) -> AttentionMask:
    n = grid.n_tokens
    return AttentionMask(np.ones((n, n), dtype=bool))


def build_fta_mask(grid: TokenGrid) -> AttentionMask:
    """Patch tokens see their frequency row, their time column and the class token.

    The class token sees everything.
    """
    idx = np.arange(grid.n_patches)
    rows, cols = idx // grid.T, idx % grid.T
    allow = np.ones((grid.n_tokens, grid.n_tokens), dtype=bool)
    allow[1:, 1:] = (rows[:, None] == rows[None, :]) | (cols[:, None] == cols[None, :])
    return AttentionMask(allow)


def build_mask(grid: TokenGrid, mode: str) -> AttentionMask:
    if mode == "gsa":
        return build_gsa_mask(grid)
    if mode == "fta":
        return build_fta_mask(grid)
    raise ValueError(f"unknown attention mode {mode!r}")


class EncoderLayer(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float64):
        d, h = cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio
        sd, sh = 1.0 / np.sqrt(d), 1.0 / np.sqrt(h)  # fan-in scaled
        self.ln1_g, self.ln1_b = ones((d,), dtype), zeros((d,), dtype)
        self.qkv_w, self.qkv_b = normal(rng, (d, 3 * d), sd, dtype), zeros((3 * d,), dtype)
        self.proj_w, self.proj_b = normal(rng, (d, d), sd, dtype), zeros((d,), dtype)
        self.ln2_g, self.ln2_b = ones((d,), dtype), zeros((d,), dtype)
        self.fc1_w, self.fc1_b = normal(rng, (d, h), sd, dtype), zeros((h,), dtype)
        self.fc2_w, self.fc2_b = normal(rng, (h, d), sh, dtype), zeros((d,), dtype)


def mhsa(x: Tensor, layer: EncoderLayer, mask: AttentionMask, heads: int) -> Tensor:
    """Multi-head self-attention over x of shape (n, d) or (B, n, d)."""
    single = x.ndim == 2
    if single:
        x = x.reshape(1, *x.shape)
    B, n, d = x.shape
    if mask.n != n:
        raise ValueError(f"mask covers {mask.n} tokens, sequence has {n}")
    dh = d // heads
    qkv = T.linear(x, layer.qkv_w, layer.qkv_b)  # (B, n, 3d)
    qkv = qkv.reshape(B, n, 3, heads, dh).transpose(2, 0, 3, 1, 4)  # (3, B, H, n, dh)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.mul(T.matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / np.sqrt(dh))
    attn = T.masked_softmax(scores, mask.allow)
    ctx = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, n, d)
    out = T.linear(ctx, layer.proj_w, layer.proj_b)
    return out.reshape(n, d) if single else out


def mlp(x: Tensor, layer: EncoderLayer) -> Tensor:
    return T.linear(T.gelu(T.linear(x, layer.fc1_w, layer.fc1_b)), layer.fc2_w, layer.fc2_b)


def encoder_layer(
    Z: Tensor,
    layer: EncoderLayer,
    mask: AttentionMask,
    cfg: EncoderConfig,
    adapters=None,
    grid: TokenGrid | None = None,
) -> Tensor:
    """One pre-norm block; ``adapters`` is an optional (attn-side, mlp-side) pair run in parallel."""
    h = T.layer_norm(Z, layer.ln1_g, layer.ln1_b, cfg.ln_eps)
    Z1 = T.add(mhsa(h, layer, mask, cfg.heads), Z)
    if adapters is not None:
        from .adapter import adapter_forward

        Z1 = T.add(Z1, adapter_forward(h, adapters[0], grid))
    h2 = T.layer_norm(Z1, layer.ln2_g, layer.ln2_b, cfg.ln_eps)
    Z2 = T.add(mlp(h2, layer), Z1)
    if adapters is not None:
        Z2 = T.add(Z2, adapter_forward(h2, adapters[1], grid))
    return Z2


class ASTBackbone(Module):
    """Tokenizer, encoder stack and final LayerNorm; the shared frozen part in adapter mode."""

    def __init__(
        self,
        tok_cfg: TokenizerConfig,
        enc_cfg: EncoderConfig,
        grid: TokenGrid,
        rng: np.random.Generator,
        dtype=np.float64,
    ):
        if tok_cfg.embed_dim != enc_cfg.embed_dim:
            raise ValueError("tokenizer and encoder embed_dim differ")
        self.tok_cfg, self.enc_cfg, self.grid = tok_cfg, enc_cfg, grid
        self.embed = PatchEmbed(tok_cfg, grid, rng, dtype)
        self.layers = [EncoderLayer(enc_cfg, rng, dtype) for _ in range(enc_cfg.layers)]
        d = enc_cfg.embed_dim
        self.norm_g, self.norm_b = ones((d,), dtype), zeros((d,), dtype)
        self._masks: dict[tuple, AttentionMask] = {}

    @property
    def dtype(self):
        return self.norm_g.dtype

    def mask_for(self, grid: TokenGrid, mode: str | None = None) -> AttentionMask:
        key = (grid.M, grid.T, mode or self.enc_cfg.attention)
        if key not in self._masks:
            self._masks[key] = build_mask(grid, key[2])
        return self._masks[key]

    def features(self, x, adapters: Sequence | None = None, attention: str | None = None) -> Tensor:
        """Class-token representation after the final LayerNorm, (d,) or (B, d)."""
        seq = patchify(x, self.embed)
        mask = self.mask_for(seq.grid, attention)
        Z = seq.Z
        for i, layer in enumerate(self.layers):
            pair = adapters[i] if adapters is not None else None
            Z = encoder_layer(Z, layer, mask, self.enc_cfg, pair, seq.grid)
        cls = Z[..., 0, :]
        return T.layer_norm(cls, self.norm_g, self.norm_b, self.enc_cfg.ln_eps)


class LinearHead(Module):
    def __init__(self, d: int, n_classes: int, rng: np.random.Generator, dtype=np.float64):
        if n_classes < 1:
            raise ValueError("head needs at least one class")
        self.w = normal(rng, (d, n_classes), 0.02, dtype)
        self.b = zeros((n_classes,), dtype)

    @property
    def n_classes(self) -> int:
        return self.b.shape[0]

    def __call__(self, feats: Tensor) -> Tensor:
        if feats.ndim == 1:
            feats = feats.reshape(1, -1)
        return T.linear(feats, self.w, self.b)


def forward(backbone: ASTBackbone, head: LinearHead, x, adapters=None, attention: str | None = None) -> Tensor:
    """Logits (B, C) for spectrogram batch ``x`` (a single spectrogram gives B = 1)."""
    return head(backbone.features(x, adapters, attention))
