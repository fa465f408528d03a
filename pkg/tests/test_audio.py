import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ftacl.audio import (
    FrontendConfig,
    WavClip,
    WavError,
    decode_wav,
    encode_wav,
    frame_count,
    log_mel,
    mel_filterbank,
)

SR = 16000


def riff(pcm: bytes, channels=1, rate=SR, bits=16, declared=None):
    """Hand-built canonical 44-byte header, independent of the stdlib writer."""
    block = channels * bits // 8
    size = len(pcm) if declared is None else declared
    fmt = struct.pack("<HHIIHH", 1, channels, rate, rate * block, block, bits)
    return b"RIFF" + struct.pack("<I", 36 + size) + b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", size) + pcm


def tone(freq, seconds=1.0, amp=0.5):
    n = int(SR * seconds)
    return WavClip(SR, amp * np.sin(2 * np.pi * freq * np.arange(n) / SR))


# -- decoding ---------------------------------------------------------------


def test_zero_samples_decode_to_zeros():
    clip = decode_wav(riff(b"\x00\x00" * 1000))
    assert clip.sample_rate == SR
    assert clip.samples.shape == (1000,)
    assert not clip.samples.any()


def test_full_scale_square_wave():
    pcm = np.tile(np.array([32767, -32768], dtype="<i2"), 50).tobytes()
    s = decode_wav(riff(pcm)).samples
    assert s.max() == 32767 / 32768 and s.min() == -1.0


def test_stereo_is_averaged():
    pcm = np.array([1000, 3000, -200, 200], dtype="<i2").tobytes()
    s = decode_wav(riff(pcm, channels=2)).samples
    np.testing.assert_array_equal(s, np.array([2000, 0]) / 32768)


def test_sine_round_trip_within_one_lsb():
    clip = tone(440.0)
    back = decode_wav(encode_wav(clip))
    assert np.max(np.abs(back.samples - clip.samples)) <= 1 / 32768


def test_encode_matches_hand_header():
    clip = WavClip(SR, np.array([0.0, 0.25, -0.5]))
    pcm = np.array([0, 8192, -16384], dtype="<i2").tobytes()
    assert encode_wav(clip) == riff(pcm)


@pytest.mark.parametrize(
    "raw",
    [
        b"not a wav file at all",
        b"RIFF\x00\x00",
        riff(b"\x00" * 30, bits=8),
        riff(b"\x00" * 30, bits=24),
    ],
)
def test_malformed_or_unsupported(raw):
    with pytest.raises(WavError):
        decode_wav(raw)


def test_truncated_data_chunk():
    raw = riff(b"\x01\x00" * 100, declared=400)
    with pytest.raises(WavError, match="truncated"):
        decode_wav(raw)


# -- spectrogram geometry ---------------------------------------------------


@pytest.mark.parametrize("seconds,frames", [(1.0, 101), (5.0, 501)])
def test_one_and_five_second_shapes(seconds, frames):
    spec = log_mel(tone(700.0, seconds))
    assert spec.shape == (128, frames)


@given(st.integers(min_value=160, max_value=20000))
@settings(max_examples=40, deadline=None)
def test_frame_count_property(n):
    rng = np.random.default_rng(n)
    spec = log_mel(WavClip(SR, 0.1 * rng.standard_normal(n)))
    assert spec.frames == n // 160 + 1 == frame_count(n, 160)


def test_silence_hits_floor_everywhere():
    spec = log_mel(WavClip(SR, np.zeros(SR)))
    assert np.all(spec.values == np.log(1e-10))


def test_short_clip_rejected():
    with pytest.raises(ValueError):
        log_mel(WavClip(SR, np.zeros(100)))


def test_rate_mismatch_rejected():
    with pytest.raises(ValueError):
        log_mel(WavClip(8000, np.zeros(8000)), FrontendConfig())


# -- filterbank -------------------------------------------------------------


def oracle_filterbank(n_mels=128, n_fft=1024, sr=SR):
    """Loop-built HTK triangles."""
    mel = lambda f: 2595.0 * math.log10(1.0 + f / 700.0)  # noqa: E731
    inv = lambda m: 700.0 * (10.0 ** (m / 2595.0) - 1.0)  # noqa: E731
    top = mel(sr / 2)
    edges = [inv(top * i / (n_mels + 1)) for i in range(n_mels + 2)]
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        for k in range(n_fft // 2 + 1):
            f = k * sr / n_fft
            if lo < f <= mid:
                fb[m, k] = (f - lo) / (mid - lo)
            elif mid < f < hi:
                fb[m, k] = (hi - f) / (hi - mid)
    return fb, edges


def test_filterbank_matches_loop_oracle():
    fb = mel_filterbank(FrontendConfig())
    ref, _ = oracle_filterbank()
    np.testing.assert_allclose(fb, ref, atol=1e-12)


def test_filterbank_rows_nonnegative_contiguous_nonempty():
    fb = mel_filterbank(FrontendConfig())
    assert fb.min() >= 0
    for row in fb:
        nz = np.flatnonzero(row)
        assert len(nz) > 0
        assert nz[-1] - nz[0] + 1 == len(nz)


def test_tone_peak_matches_direct_dft_oracle():
    clip = tone(1000.0)
    spec = log_mel(clip)
    mid = 50
    # direct DFT of the same analysis frame
    x = np.pad(clip.samples, 200, mode="reflect")[mid * 160 : mid * 160 + 400]
    w = np.array([0.54 - 0.46 * math.cos(2 * math.pi * n / 399) for n in range(400)])
    n = np.arange(400)
    k = np.arange(513)[:, None]
    re = (x * w * np.cos(2 * np.pi * k * n / 1024)).sum(axis=1)
    im = (x * w * np.sin(2 * np.pi * k * n / 1024)).sum(axis=1)
    fb, edges = oracle_filterbank()
    energies = fb @ (re**2 + im**2)
    best = int(np.argmax(energies))
    assert int(np.argmax(spec.values[:, mid])) == best
    assert edges[best] < 1000.0 < edges[best + 2]
    np.testing.assert_allclose(spec.values[:, mid], np.log(np.maximum(energies, 1e-10)), rtol=1e-9, atol=1e-9)


@given(st.floats(min_value=1.01, max_value=10.0))
@settings(max_examples=20, deadline=None)
def test_louder_input_never_lowers_unfloored_bins(c):
    clip = tone(440.0, 0.5, amp=0.05)
    a = log_mel(clip).values
    b = log_mel(WavClip(SR, c * clip.samples)).values
    live = a > np.log(1e-10)
    assert np.all(b[live] >= a[live])
    np.testing.assert_allclose((b - a)[live & (b > np.log(1e-10))], 2 * np.log(c), rtol=1e-9)
