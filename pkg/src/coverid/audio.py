"""Audio ingest and the 84-bin constant-Q front end.

Pipeline: ``load_wav`` -> ``resample`` to 22050 Hz -> ``compute_cqt`` (hop 512)
-> ``downsample_time`` -> ``normalize``. ``extract_features`` runs all of it.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SAMPLE_RATE = 22050
HOP = 512
N_BINS = 84
BINS_PER_OCTAVE = 12
FMIN = 32.703195662574764  # C1
Q_FACTOR = 1.0 / (2.0 ** (1.0 / BINS_PER_OCTAVE) - 1.0)
DEFAULT_FACTOR = 100

RESAMPLE_TAPS = 64
KAISER_BETA = 8.6

CQT_MAGIC = b"CQT1"
CQT_VERSION = 1


class WavError(ValueError):
    """Base class for WAV decoding failures."""


class MalformedWavError(WavError):
    pass


class UnsupportedWavError(WavError):
    pass


class CqtFormatError(ValueError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("AudioClip holds mono samples only")
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioClip samples must be finite")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class CqtSpectrogram:
    """Magnitudes of shape (84, T); row b is centered on fmin * 2**(b/12)."""

    values: np.ndarray
    fmin: float = FMIN
    hop_length: int = HOP
    downsample_factor: int = 1

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or v.shape[0] != N_BINS or v.shape[1] < 1:
            raise ValueError(f"expected a ({N_BINS}, T>=1) spectrogram, got shape {v.shape}")
        if not np.isfinite(v).all() or (v < 0).any():
            raise ValueError("spectrogram values must be finite and nonnegative")
        self.values = v

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def bin_frequencies(n_bins: int = N_BINS, fmin: float = FMIN) -> np.ndarray:
    return fmin * 2.0 ** (np.arange(n_bins) / BINS_PER_OCTAVE)


def window_lengths(sr: int = SAMPLE_RATE) -> np.ndarray:
    return np.round(Q_FACTOR * sr / bin_frequencies()).astype(int)


def frequency_to_bin(freq: float, fmin: float = FMIN) -> int:
    return int(round(BINS_PER_OCTAVE * math.log2(freq / fmin)))


# --------------------------------------------------------------------------
# WAV I/O


def load_wav(path) -> AudioClip:
    """Read PCM16, PCM24 or float32 RIFF/WAVE (mono or stereo) as a mono clip."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such WAV file: {path}")
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise MalformedWavError(f"{path}: not a RIFF/WAVE file")

    fmt = data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid, size = struct.unpack_from("<4sI", raw, pos)
        body = raw[pos + 8 : pos + 8 + size]
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or len(fmt) < 16:
        raise MalformedWavError(f"{path}: missing or short fmt chunk")
    if data is None:
        raise MalformedWavError(f"{path}: missing data chunk")

    tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", fmt)
    if tag == 0xFFFE and len(fmt) >= 26:  # WAVE_FORMAT_EXTENSIBLE: real tag in subformat GUID
        tag = struct.unpack_from("<H", fmt, 24)[0]
    if channels not in (1, 2):
        raise UnsupportedWavError(f"{path}: {channels} channels not supported")
    if rate == 0:
        raise MalformedWavError(f"{path}: zero sample rate")

    if tag == 1 and bits == 16:
        x = np.frombuffer(data[: len(data) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
    elif tag == 1 and bits == 24:
        b = np.frombuffer(data[: len(data) // 3 * 3], dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        v = np.where(v & 0x800000, v - (1 << 24), v)
        x = v.astype(np.float64) / float(1 << 23)
    elif tag == 3 and bits == 32:
        x = np.frombuffer(data[: len(data) // 4 * 4], dtype="<f4").astype(np.float64)
    else:
        raise UnsupportedWavError(f"{path}: unsupported codec (format tag {tag}, {bits} bits)")

    x = x[: x.size // channels * channels].reshape(-1, channels).mean(axis=1)
    if x.size == 0:
        raise MalformedWavError(f"{path}: no samples")
    return AudioClip(x, int(rate))


def write_wav(path, clip: AudioClip, bits: int = 16) -> None:
    """Write a mono clip as PCM16 (default) or float32."""
    x = np.clip(clip.samples, -1.0, 1.0)
    if bits == 16:
        tag, payload = 1, np.round(x * 32767.0).astype("<i2").tobytes()
    elif bits == 32:
        tag, payload = 3, x.astype("<f4").tobytes()
    else:
        raise ValueError("bits must be 16 or 32")
    nbytes = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, clip.sample_rate, clip.sample_rate * nbytes, nbytes, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


# --------------------------------------------------------------------------
# resampling


def _phase_filters(up: int, down: int) -> np.ndarray:
    """Kaiser-windowed sinc taps for each of the ``up`` fractional phases."""
    cutoff = min(1.0, up / down)
    half = RESAMPLE_TAPS // 2
    offsets = np.arange(-half + 1, half + 1)  # tap k sits at floor(t) + offset
    frac = np.arange(up) * down % up / up  # fractional position of each phase
    d = frac[:, None] - offsets[None, :]  # distance from output time to each tap
    win = np.kaiser(2 * half + 1, KAISER_BETA)
    # interpolate the Kaiser window at the continuous distance
    wv = np.interp(d, np.arange(-half, half + 1), win, left=0.0, right=0.0)
    h = cutoff * np.sinc(cutoff * d) * wv
    return h / h.sum(axis=1, keepdims=True)


def resample(clip: AudioClip, target_rate: int = SAMPLE_RATE) -> AudioClip:
    """Band-limited rational resampling (windowed sinc, 64 taps per phase)."""
    if target_rate <= 0:
        raise ValueError("target rate must be positive")
    if len(clip) == 0:
        raise ValueError("cannot resample an empty clip")
    if clip.sample_rate == target_rate:
        return AudioClip(clip.samples.copy(), clip.sample_rate)

    g = math.gcd(clip.sample_rate, target_rate)
    up, down = target_rate // g, clip.sample_rate // g
    n_out = int(round(len(clip) * target_rate / clip.sample_rate))
    filters = _phase_filters(up, down)
    half = RESAMPLE_TAPS // 2
    x = np.pad(clip.samples, (half, half))
    offsets = np.arange(-half + 1, half + 1)

    out = np.empty(n_out)
    chunk = 65536
    for start in range(0, n_out, chunk):
        n = np.arange(start, min(start + chunk, n_out))
        base = n * down // up  # floor of the input-time position
        phase = n % up
        idx = base[:, None] + offsets[None, :] + half
        taps = x[np.clip(idx, 0, x.size - 1)]
        out[n] = np.einsum("ij,ij->i", taps, filters[phase])
    return AudioClip(out, target_rate)


# --------------------------------------------------------------------------
# constant-Q transform


def _octave_kernels(sr: int):
    """Per-octave (half_width, kernel matrix) pairs; kernel columns are [re..., im...]."""
    freqs = bin_frequencies()
    lengths = window_lengths(sr)
    groups = []
    for lo in range(0, N_BINS, BINS_PER_OCTAVE):
        bins = range(lo, min(lo + BINS_PER_OCTAVE, N_BINS))
        half = int(max(lengths[b] for b in bins) // 2)
        width = 2 * half + 1
        ker = np.zeros((width, 2 * len(bins)))
        for j, b in enumerate(bins):
            L = int(lengths[b])
            w = np.hanning(L)
            t = np.arange(L) - L // 2
            phase = 2 * np.pi * freqs[b] * t / sr
            scale = 2.0 / w.sum()
            rows = t + half
            ker[rows, j] = w * np.cos(phase) * scale
            ker[rows, len(bins) + j] = -w * np.sin(phase) * scale
        groups.append((lo, len(bins), half, ker.astype(np.float32)))
    return groups


_KERNEL_CACHE: dict[int, list] = {}


def compute_cqt(clip: AudioClip) -> CqtSpectrogram:
    """84-bin CQT magnitudes by direct windowed correlation, frames centered at k*512.

    A unit-amplitude sinusoid at a bin's center frequency produces a response
    of about 1.0 in that bin.
    """
    sr = clip.sample_rate
    if sr != SAMPLE_RATE:
        raise ValueError(f"compute_cqt expects {SAMPLE_RATE} Hz audio, got {sr}")
    longest = int(window_lengths(sr).max())
    N = len(clip)
    if N < longest:
        raise ValueError(f"clip of {N} samples is shorter than the longest CQT window ({longest})")
    if sr not in _KERNEL_CACHE:
        _KERNEL_CACHE[sr] = _octave_kernels(sr)
    groups = _KERNEL_CACHE[sr]

    P = max(g[2] for g in groups)
    x = np.pad(clip.samples, (P, P + HOP), mode="reflect").astype(np.float32)
    T = N // HOP + 1
    frames = sliding_window_view(x, 2 * P + 1)[::HOP][:T]

    out = np.empty((N_BINS, T))
    chunk = 256
    for lo, nb, half, ker in groups:
        for s in range(0, T, chunk):
            block = frames[s : s + chunk, P - half : P + half + 1]
            resp = (block @ ker).astype(np.float64)
            out[lo : lo + nb, s : s + chunk] = np.hypot(resp[:, :nb], resp[:, nb:]).T
    return CqtSpectrogram(out)


def downsample_time(cqt: CqtSpectrogram, factor: int = DEFAULT_FACTOR) -> CqtSpectrogram:
    """Non-overlapping means of ``factor`` frames.

    A trailing partial window is kept iff it spans at least ceil(factor/2)
    frames; an input shorter than that still yields its single partial mean.
    """
    if factor < 1:
        raise ValueError("downsample factor must be >= 1")
    if cqt.downsample_factor != 1:
        raise ValueError("spectrogram is already downsampled")
    if factor == 1:
        return replace(cqt, values=cqt.values.copy())
    v = cqt.values
    T = v.shape[1]
    full, tail = divmod(T, factor)
    cols = []
    if full:
        cols.append(v[:, : full * factor].reshape(v.shape[0], full, factor).mean(axis=2))
    if tail and (tail >= -(-factor // 2) or full == 0):
        cols.append(v[:, full * factor :].mean(axis=1, keepdims=True))
    return replace(cqt, values=np.concatenate(cols, axis=1), downsample_factor=factor)


def normalize(cqt: CqtSpectrogram, log_compress: bool = False) -> CqtSpectrogram:
    v = cqt.values.astype(np.float64, copy=True)
    peak = v.max()
    if peak > 0:
        v /= peak
        if log_compress:
            v = np.log1p(1000.0 * v)
            v /= v.max()
    return replace(cqt, values=v)


def extract_features(
    source, factor: int = DEFAULT_FACTOR, log_compress: bool = False
) -> CqtSpectrogram:
    """Full front end from a WAV path or an :class:`AudioClip`."""
    clip = source if isinstance(source, AudioClip) else load_wav(source)
    clip = resample(clip, SAMPLE_RATE)
    return normalize(downsample_time(compute_cqt(clip), factor), log_compress)


# --------------------------------------------------------------------------
# .cqt feature files


def save_cqt(path, cqt: CqtSpectrogram) -> None:
    n_bins, n_frames = cqt.values.shape
    header = CQT_MAGIC + struct.pack("<IIIQ", CQT_VERSION, n_bins, cqt.downsample_factor, n_frames)
    body = np.ascontiguousarray(cqt.values.T, dtype="<f4").tobytes()
    Path(path).write_bytes(header + body)


def load_cqt(path) -> CqtSpectrogram:
    raw = Path(path).read_bytes()
    if raw[:4] != CQT_MAGIC:
        raise CqtFormatError(f"{path}: bad magic")
    if len(raw) < 24:
        raise CqtFormatError(f"{path}: truncated header")
    version, n_bins, factor, n_frames = struct.unpack_from("<IIIQ", raw, 4)
    if version != CQT_VERSION:
        raise CqtFormatError(f"{path}: unsupported version {version}")
    if n_bins != N_BINS:
        raise CqtFormatError(f"{path}: expected {N_BINS} bins, found {n_bins}")
    expected = 24 + 4 * n_bins * n_frames
    if len(raw) != expected:
        raise CqtFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    vals = np.frombuffer(raw, dtype="<f4", offset=24).reshape(n_frames, n_bins).T
    return CqtSpectrogram(vals.astype(np.float32), downsample_factor=factor)
