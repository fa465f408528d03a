"""Spectrogram to token sequence: strided conv patches, class token, position embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .module import Module, normal, zeros
from .tensor import Tensor


@dataclass(frozen=True)
class TokenizerConfig:
    kernel: int = 16
    stride: int = 10
    embed_dim: int = 768
    in_channels: int = 1

    def __post_init__(self):
        if not self.kernel >= self.stride >= 1:
            raise ValueError("need kernel >= stride >= 1")
        if self.embed_dim < 1 or self.in_channels < 1:
            raise ValueError("embed_dim and in_channels must be positive")


@dataclass(frozen=True)
class TokenGrid:
    M: int  # frequency tokens
    T: int  # time tokens

    def __post_init__(self):
        if self.M < 1 or self.T < 1:
            raise ValueError("token grid extents must be >= 1")

    @property
    def n_patches(self) -> int:
        return self.M * self.T

    @property
    def n_tokens(self) -> int:
        return self.M * self.T + 1

    def index(self, m: int, t: int) -> int:
        """Sequence index of patch (m, t); index 0 is the class token."""
        return 1 + m * self.T + t

    def position(self, idx: int) -> tuple[int, int]:
        if not 1 <= idx <= self.n_patches:
            raise IndexError(idx)
        return divmod(idx - 1, self.T)


@dataclass
class TokenSequence:
    Z: Tensor  # (n, d) or (B, n, d)
    grid: TokenGrid

    def __len__(self) -> int:
        return self.Z.shape[-2]


def token_grid(freq_bins: int, frames: int, cfg: TokenizerConfig = TokenizerConfig()) -> TokenGrid:
    K, S = cfg.kernel, cfg.stride
    if freq_bins < K or frames < K:
        raise ValueError(f"spectrogram {freq_bins}x{frames} is smaller than the {K}x{K} kernel")
    return TokenGrid((freq_bins - K) // S + 1, (frames - K) // S + 1)


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Align-corners linear interpolation weights, shape (n_out, n_in)."""
    W = np.zeros((n_out, n_in))
    for i in range(n_out):
        if n_out == 1 or n_in == 1:
            src = 0.0
        else:
            src = i * (n_in - 1) / (n_out - 1)
        lo = min(int(np.floor(src)), n_in - 1)
        frac = src - lo
        W[i, lo] += 1.0 - frac
        if frac > 0.0:
            W[i, lo + 1] += frac
    return W


def resize_pos_embed(pe: Tensor, src: TokenGrid, dst: TokenGrid) -> Tensor:
    """Bilinearly resample patch position embeddings from ``src`` to ``dst``.

    Row 0 (class token) is carried over unchanged. Identity when grids match.
    """
    if pe.shape[0] != src.n_tokens:
        raise ValueError(f"embedding has {pe.shape[0]} rows, grid {src} needs {src.n_tokens}")
    if src == dst:
        return pe
    R = np.kron(_interp_matrix(dst.M, src.M), _interp_matrix(dst.T, src.T)).astype(pe.dtype)
    patches = T.matmul(Tensor(R), pe[1:])
    return T.concat([pe[0:1], patches], axis=0)


class PatchEmbed(Module):
    """Conv patch projection plus learnable class token and position table."""

    def __init__(self, cfg: TokenizerConfig, grid: TokenGrid, rng: np.random.Generator, dtype=np.float64):
        d, K = cfg.embed_dim, cfg.kernel
        fan_in = cfg.in_channels * K * K
        self.cfg = cfg
        self.grid = grid
        self.proj_w = normal(rng, (d, cfg.in_channels, K, K), 1.0 / np.sqrt(fan_in), dtype)
        self.proj_b = zeros((d,), dtype)
        self.cls = normal(rng, (1, 1, d), 0.02, dtype)
        self.pos = normal(rng, (grid.n_tokens, d), 0.02, dtype)


def patchify(x, embed: PatchEmbed) -> TokenSequence:
    """Tokenize spectrogram(s) ``x`` of shape (F, frames) or (B, F, frames).

    Returns Z of shape (n, d) or (B, n, d) with n = M*T + 1.
    """
    arr = x.values if hasattr(x, "values") else x
    arr = np.asarray(arr, dtype=embed.proj_w.dtype)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    cfg = embed.cfg
    B, F, frames = arr.shape
    grid = token_grid(F, frames, cfg)
    img = np.ascontiguousarray(np.broadcast_to(arr[:, None], (B, cfg.in_channels, F, frames)))
    feat = T.conv2d(Tensor(img), embed.proj_w, stride=cfg.stride)  # (B, d, M, T)
    feat = T.add(feat, embed.proj_b.reshape(1, -1, 1, 1))
    d = cfg.embed_dim
    patches = feat.reshape(B, d, grid.n_patches).transpose(0, 2, 1)  # frequency-major order
    cls = T.add(Tensor(np.zeros((B, 1, d), dtype=arr.dtype)), embed.cls)
    Z = T.concat([cls, patches], axis=1)
    Z = T.add(Z, resize_pos_embed(embed.pos, embed.grid, grid))
    if single:
        Z = Z.reshape(grid.n_tokens, d)
    return TokenSequence(Z, grid)
