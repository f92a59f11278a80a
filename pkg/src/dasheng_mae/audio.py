"""Waveform decoding, resampling and 64-bin log-Mel features.

Feature settings: 16 kHz input, 512-sample (32 ms) periodic Hann window,
160-sample (10 ms) hop, 512-point FFT, centred STFT with reflect padding,
power spectrum, 64 HTK-scale triangular filters over 0-8000 Hz with unit
peak, natural log floored at 1e-10. A clip of ``n`` samples gives
``n // 160 + 1`` frames.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from functools import lru_cache
from math import gcd

import numpy as np

from . import kernels
from .errors import DomainError, FormatError

SAMPLE_RATE = 16000
N_FFT = 512
WIN_LENGTH = 512
HOP_LENGTH = 160
N_MELS = 64
F_MIN = 0.0
F_MAX = 8000.0
LOG_FLOOR = 1e-10
FRAME_RATE = SAMPLE_RATE // HOP_LENGTH

RESAMPLE_TAPS = 64
KAISER_BETA = 8.6
ROLLOFF = 0.94


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise DomainError(f"waveform must be mono (1-D), got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise DomainError(f"sample rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class MelSpectrogram:
    values: np.ndarray  # (T, 64) float32
    frame_rate: int = FRAME_RATE
    window_ms: int = 32
    hop_ms: int = 10

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_FLOAT = 0x0003
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


def decode_wav(data: bytes) -> Waveform:
    """Parse a RIFF/WAVE byte string (16-bit PCM or 32-bit float; mono or stereo).

    Multi-channel audio is averaged to mono; 16-bit samples are scaled by 1/32768.
    """
    if len(data) < 12:
        raise FormatError(f"RIFF header: need 12 bytes, got {len(data)}")
    riff, _, wave = struct.unpack_from("<4sI4s", data, 0)
    if riff != b"RIFF" or wave != b"WAVE":
        raise FormatError(f"RIFF header: expected 'RIFF'/'WAVE' magic, got {riff!r}/{wave!r}")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = pos + 8
        if cid == b"fmt ":
            if size < 16 or body + size > len(data):
                raise FormatError(f"'fmt ' chunk at offset {pos}: size {size} invalid or truncated")
            fmt = struct.unpack_from("<HHIIHH", data, body)
            if fmt[0] == _WAVE_FORMAT_EXTENSIBLE:
                if size < 40:
                    raise FormatError(f"'fmt ' chunk at offset {pos}: extensible format needs 40 bytes")
                sub = struct.unpack_from("<H", data, body + 24)[0]
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            if body + size > len(data):
                raise FormatError(
                    f"'data' chunk at offset {pos}: declares {size} bytes, only {len(data) - body} present"
                )
            payload = data[body : body + size]
            if fmt is not None:
                break
        pos = body + size + (size & 1)

    if fmt is None:
        raise FormatError("'fmt ' chunk missing")
    if payload is None:
        raise FormatError("'data' chunk missing")

    codec, channels, rate, _, block_align, bits = fmt
    if channels < 1:
        raise FormatError(f"'fmt ' chunk: invalid channel count {channels}")
    if codec == _WAVE_FORMAT_PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif codec == _WAVE_FORMAT_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise FormatError(f"'fmt ' chunk: unsupported codec {codec:#06x} with {bits} bits per sample")
    if block_align != channels * dtype.itemsize:
        raise FormatError(f"'fmt ' chunk: block align {block_align} inconsistent with {channels}x{bits} bit")
    if len(payload) % block_align:
        raise FormatError(f"'data' chunk: {len(payload)} bytes is not a whole number of {block_align}-byte frames")

    frames = np.frombuffer(payload, dtype=dtype).reshape(-1, channels).astype(np.float64) * scale
    return Waveform(frames.mean(axis=1), rate)


def decode_raw_pcm(data: bytes, sample_rate: int) -> Waveform:
    """Headerless signed 16-bit little-endian mono PCM."""
    if len(data) % 2:
        raise FormatError(f"raw s16le stream has odd length {len(data)}")
    return Waveform(np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0, sample_rate)


def encode_wav(w: Waveform, float32: bool = False) -> bytes:
    """Mono WAV bytes, 16-bit PCM by default."""
    if float32:
        payload = w.samples.astype("<f4").tobytes()
        codec, bits = _WAVE_FORMAT_FLOAT, 32
    else:
        pcm = np.clip(np.round(w.samples.astype(np.float64) * 32768.0), -32768, 32767)
        payload = pcm.astype("<i2").tobytes()
        codec, bits = _WAVE_FORMAT_PCM, 16
    buf = io.BytesIO()
    block = bits // 8
    buf.write(struct.pack("<4sI4s", b"RIFF", 36 + len(payload), b"WAVE"))
    buf.write(struct.pack("<4sIHHIIHH", b"fmt ", 16, codec, 1, w.sample_rate, w.sample_rate * block, block, bits))
    buf.write(struct.pack("<4sI", b"data", len(payload)))
    buf.write(payload)
    return buf.getvalue()


def read_audio(path, raw_rate: int | None = None) -> Waveform:
    with open(path, "rb") as fh:
        data = fh.read()
    return decode_raw_pcm(data, raw_rate) if raw_rate else decode_wav(data)


def write_wav(path, w: Waveform, float32: bool = False) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_wav(w, float32=float32))


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


@lru_cache(maxsize=16)
def polyphase_filter(up: int, down: int, taps: int = RESAMPLE_TAPS, beta: float = KAISER_BETA) -> np.ndarray:
    """Kaiser-windowed sinc low-pass split into ``up`` phases of ``taps`` coefficients.

    Each phase is scaled to unit sum so a constant input passes unchanged.
    """
    length = up * taps
    cutoff = ROLLOFF * 0.5 / max(up, down)  # cycles per upsampled sample
    n = np.arange(length) - length / 2
    proto = 2 * cutoff * np.sinc(2 * cutoff * n) * np.kaiser(length + 1, beta)[:length]
    bank = proto.reshape(taps, up).T.copy()  # bank[p, j] = proto[p + j * up]
    bank /= bank.sum(axis=1, keepdims=True)
    return bank


def resample(w: Waveform, target_hz: int = SAMPLE_RATE) -> Waveform:
    """Rational-ratio polyphase resampling (64 taps per phase, Kaiser window)."""
    if w.sample_rate == target_hz:
        return w
    if w.sample_rate < 8000:
        raise DomainError(f"source rate {w.sample_rate} Hz is below the supported 8000 Hz")
    g = gcd(w.sample_rate, target_hz)
    up, down = target_hz // g, w.sample_rate // g
    bank = polyphase_filter(up, down)
    taps = bank.shape[1]
    x = np.pad(w.samples.astype(np.float64), taps, mode="edge")
    n_out = -(-len(w.samples) * up // down)
    y = kernels.resample_poly(x, bank, up, down, n_out, taps)
    return Waveform(np.clip(y, -1.0, 1.0), target_hz)


# ---------------------------------------------------------------------------
# log-Mel
# ---------------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=1)
def mel_filterbank() -> np.ndarray:
    """(64, 257) triangular HTK-Mel filters with unit peak."""
    edges = mel_to_hz(np.linspace(hz_to_mel(F_MIN), hz_to_mel(F_MAX), N_MELS + 2))
    freqs = np.arange(N_FFT // 2 + 1) * SAMPLE_RATE / N_FFT
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=1)
def _hann() -> np.ndarray:
    n = np.arange(WIN_LENGTH)
    return 0.5 - 0.5 * np.cos(2 * np.pi * n / WIN_LENGTH)


def expected_frames(n_samples: int) -> int:
    return n_samples // HOP_LENGTH + 1


def logmel(w: Waveform) -> MelSpectrogram:
    if w.sample_rate != SAMPLE_RATE:
        raise DomainError(f"logmel expects {SAMPLE_RATE} Hz input, got {w.sample_rate} Hz; resample first")
    if len(w.samples) == 0:
        raise DomainError("logmel of an empty waveform")
    x = w.samples.astype(np.float64)
    half = N_FFT // 2
    mode = "reflect" if len(x) > 1 else "edge"
    xp = np.pad(x, half, mode=mode)
    frames = np.lib.stride_tricks.sliding_window_view(xp, N_FFT)[::HOP_LENGTH]
    power = np.abs(np.fft.rfft(frames * _hann(), n=N_FFT, axis=1)) ** 2
    mel = power @ mel_filterbank().T
    return MelSpectrogram(np.log(np.maximum(mel, LOG_FLOOR)).astype(np.float32))


def load_features(path, raw_rate: int | None = None) -> MelSpectrogram:
    return logmel(resample(read_audio(path, raw_rate)))
