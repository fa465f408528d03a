"""WAV decoding and the 128-bin log-mel front end."""

from __future__ import annotations

import io
import wave
from dataclasses import dataclass

import numpy as np


class WavError(ValueError):
    pass


@dataclass(frozen=True)
class WavClip:
    sample_rate: int
    samples: np.ndarray

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if len(self.samples) == 0:
            raise ValueError("empty clip")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 16000
    win_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 128
    fmin: float = 0.0
    fmax: float | None = None  # None means Nyquist
    log_floor: float = 1e-10
    n_fft: int = 1024

    def __post_init__(self):
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if not 0 <= self.fmin < self.upper_hz <= self.sample_rate / 2:
            raise ValueError("need 0 <= fmin < fmax <= sample_rate/2")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        if self.n_fft < self.win_length:
            raise ValueError("n_fft shorter than the analysis window")

    @property
    def upper_hz(self) -> float:
        return self.sample_rate / 2 if self.fmax is None else self.fmax

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate * self.win_ms / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))


@dataclass(frozen=True)
class Spectrogram:
    values: np.ndarray  # (n_mels, frames)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]


def decode_wav(raw: bytes) -> WavClip:
    """Decode 16-bit PCM WAV bytes; stereo is averaged down to mono."""
    try:
        with wave.open(io.BytesIO(raw), "rb") as w:
            width, channels, rate, nframes = w.getsampwidth(), w.getnchannels(), w.getframerate(), w.getnframes()
            if width != 2:
                raise WavError(f"unsupported bit depth: {8 * width}-bit (only 16-bit PCM)")
            pcm = w.readframes(nframes)
    except wave.Error as exc:
        raise WavError(f"malformed or unsupported WAV: {exc}") from exc
    except EOFError as exc:
        raise WavError("malformed WAV: truncated header") from exc
    if len(pcm) != nframes * channels * 2:
        raise WavError(f"truncated WAV: header declares {nframes} frames, found {len(pcm) // (2 * channels)}")
    if nframes == 0:
        raise WavError("WAV contains no samples")
    x = np.frombuffer(pcm, dtype="<i2").astype(np.float64).reshape(-1, channels)
    samples = x.mean(axis=1) / 32768.0
    return WavClip(rate, samples)


def encode_wav(clip: WavClip) -> bytes:
    pcm = np.clip(np.round(np.asarray(clip.samples) * 32768.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate)
        w.writeframes(pcm.tobytes())
    return buf.getvalue()


def read_wav(path) -> WavClip:
    with open(path, "rb") as fh:
        return decode_wav(fh.read())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FrontendConfig) -> np.ndarray:
    """Triangular HTK-scale filters, shape (n_mels, n_fft // 2 + 1), unnormalised."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.upper_hz), cfg.n_mels + 2))
    freqs = np.arange(cfg.n_fft // 2 + 1) * (cfg.sample_rate / cfg.n_fft)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def frame_count(n_samples: int, hop: int) -> int:
    return n_samples // hop + 1


def log_mel(clip: WavClip, cfg: FrontendConfig | None = None) -> Spectrogram:
    cfg = cfg or FrontendConfig(sample_rate=clip.sample_rate)
    if cfg.sample_rate != clip.sample_rate:
        raise ValueError(f"clip rate {clip.sample_rate} Hz differs from config {cfg.sample_rate} Hz (no resampling)")
    hop, win = cfg.hop_length, cfg.win_length
    x = np.asarray(clip.samples, dtype=np.float64)
    if len(x) < hop:
        raise ValueError("clip shorter than one hop")
    half = win // 2
    padded = np.pad(x, (half, half), mode="reflect")
    n_frames = frame_count(len(x), hop)
    frames = np.lib.stride_tricks.sliding_window_view(padded, win)[::hop][:n_frames]
    spec = np.fft.rfft(frames * np.hamming(win), n=cfg.n_fft, axis=1)
    power = spec.real**2 + spec.imag**2
    mel = mel_filterbank(cfg) @ power.T
    return Spectrogram(np.log(np.maximum(mel, cfg.log_floor)))
