"""Convolutional bottleneck adapter, run parallel to the attention and MLP sublayers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .module import Module, normal, zeros
from .tensor import Tensor
from .tokenizer import TokenGrid


@dataclass(frozen=True)
class AdapterConfig:
    d: int = 768
    bottleneck: int = 64
    kernel: int = 3

    def __post_init__(self):
        if not 1 <= self.bottleneck < self.d:
            raise ValueError(f"bottleneck must satisfy 1 <= d' < d, got d'={self.bottleneck}, d={self.d}")


class ConvAdapter(Module):
    def __init__(self, cfg: AdapterConfig, rng: np.random.Generator, dtype=np.float64):
        d, b, k = cfg.d, cfg.bottleneck, cfg.kernel
        self.cfg = cfg
        self.down_w = normal(rng, (d, b), 0.02, dtype)
        self.down_b = zeros((b,), dtype)
        self.conv_w = normal(rng, (b, b, k, k), np.sqrt(2.0 / (b * k * k)), dtype)
        self.conv_b = zeros((b,), dtype)
        self.up_w = zeros((b, d), dtype)
        self.up_b = zeros((d,), dtype)


def adapter_forward(Z: Tensor, a: ConvAdapter, grid: TokenGrid) -> Tensor:
    """Apply the adapter to tokens Z, (n, d) or (B, n, d), with n = M*T + 1.

    Patch tokens pass down-projection, a same-padded conv over the (M, T) grid,
    GELU and up-projection. The class token skips the conv.
    """
    single = Z.ndim == 2
    if single:
        Z = Z.reshape(1, *Z.shape)
    B, n, _ = Z.shape
    if n != grid.n_tokens:
        raise ValueError(f"adapter got {n} tokens but grid {grid.M}x{grid.T} needs {grid.n_tokens}")
    b = a.cfg.bottleneck
    down = T.linear(Z, a.down_w, a.down_b)  # (B, n, b)
    cls = T.gelu(down[:, 0:1, :])
    img = down[:, 1:, :].reshape(B, grid.M, grid.T, b).transpose(0, 3, 1, 2)  # (B, b, M, T)
    conv = T.conv2d(img, a.conv_w, stride=1, padding=a.cfg.kernel // 2)
    conv = T.gelu(T.add(conv, a.conv_b.reshape(1, b, 1, 1)))
    patches = conv.transpose(0, 2, 3, 1).reshape(B, grid.n_patches, b)
    out = T.linear(T.concat([cls, patches], axis=1), a.up_w, a.up_b)
    return out.reshape(n, a.cfg.d) if single else out


class AdapterSet(Module):
    """Per-task adapters: one (attention-side, mlp-side) pair per encoder layer."""

    def __init__(self, cfg: AdapterConfig, layers: int, rng: np.random.Generator, dtype=np.float64):
        self.cfg = cfg
        self.attn = [ConvAdapter(cfg, rng, dtype) for _ in range(layers)]
        self.ffn = [ConvAdapter(cfg, rng, dtype) for _ in range(layers)]

    def __len__(self) -> int:
        return len(self.attn)

    def __getitem__(self, i: int) -> tuple[ConvAdapter, ConvAdapter]:
        return self.attn[i], self.ffn[i]


def adapter_param_count(cfg: AdapterConfig, layers: int) -> int:
    d, b, k = cfg.d, cfg.bottleneck, cfg.kernel
    per = (d * b + b) + (k * k * b * b + b) + (b * d + d)
    return 2 * layers * per
