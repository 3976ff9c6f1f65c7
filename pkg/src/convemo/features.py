"""Acoustic front-end: WAV ingestion, MFCC extraction and the FMX feature file."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FMX_MAGIC = b"FMX1"
_FMX_HEADER = struct.Struct("<4sIII")
_MAX_FMX_ELEMENTS = 1 << 31


class WavFormatError(ValueError):
    """Unsupported or malformed WAV content."""


class FeatureFileError(ValueError):
    """Malformed FMX feature file."""


class AudioTooShortError(ValueError):
    pass


@dataclass
class WavAudio:
    sample_rate: int
    samples: np.ndarray

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise WavFormatError(f"sample rate must be positive, got {self.sample_rate}")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MfccConfig:
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    num_mel_filters: int = 26
    num_ceps: int = 13
    preemphasis: float = 0.97
    fft_size: int | None = None
    log_floor: float = 1e-10
    cepstral_mean_norm: bool = False

    def __post_init__(self):
        if self.frame_shift_ms > self.frame_length_ms:
            raise ValueError("frame_shift_ms must not exceed frame_length_ms")
        if self.num_ceps > self.num_mel_filters:
            raise ValueError("num_ceps must not exceed num_mel_filters")

    def frame_samples(self, sample_rate: int) -> int:
        return int(round(self.frame_length_ms * sample_rate / 1000.0))

    def shift_samples(self, sample_rate: int) -> int:
        return int(round(self.frame_shift_ms * sample_rate / 1000.0))

    def nfft(self, sample_rate: int) -> int:
        if self.fft_size is not None:
            return self.fft_size
        n = 1
        while n < self.frame_samples(sample_rate):
            n *= 2
        return n


@dataclass
class FeatureMatrix:
    values: np.ndarray
    frame_shift_ms: int = 10
    frame_length_ms: float = field(default=25.0, compare=False)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ValueError(f"feature matrix must be 2-D, got shape {self.values.shape}")

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def num_features(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# WAV


def read_wav(path) -> WavAudio:
    """Read a PCM16 or IEEE float32 WAV file as mono samples in [-1, 1]."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise WavFormatError(f"truncated RIFF header at byte offset {len(raw)}")
    riff, _, wave_id = struct.unpack_from("<4sI4s", raw, 0)
    if riff != b"RIFF" or wave_id != b"WAVE":
        raise WavFormatError("not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos < len(raw):
        if pos + 8 > len(raw):
            raise WavFormatError(f"truncated chunk header at byte offset {pos}")
        cid, size = struct.unpack_from("<4sI", raw, pos)
        body = pos + 8
        if body + size > len(raw):
            raise WavFormatError(
                f"truncated {cid.decode(errors='replace')!r} chunk at byte offset {pos}: "
                f"needs {size} bytes, {len(raw) - body} available"
            )
        if cid == b"fmt ":
            if size < 16:
                raise WavFormatError(f"fmt chunk too short at byte offset {pos}")
            fmt = struct.unpack_from("<HHIIHH", raw, body)
        elif cid == b"data":
            data = raw[body : body + size]
        pos = body + size + (size & 1)

    if fmt is None or data is None:
        raise WavFormatError("missing fmt or data chunk")
    encoding, channels, rate, _, _, bits = fmt
    if encoding == 1 and bits == 16:
        samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif encoding == 3 and bits == 32:
        samples = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise WavFormatError(f"unsupported WAV encoding: format tag {encoding}, {bits} bits per sample")
    if channels < 1 or samples.size % channels:
        raise WavFormatError(f"sample count {samples.size} is not a multiple of {channels} channels")
    if channels > 1:
        samples = samples.reshape(-1, channels).mean(axis=1)
    return WavAudio(sample_rate=rate, samples=samples)


def write_wav(path, audio: WavAudio) -> None:
    """Write mono 16-bit PCM."""
    pcm = np.clip(np.round(np.asarray(audio.samples) * 32768.0), -32768, 32767).astype("<i2")
    data = pcm.tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(data), b"WAVE",
        b"fmt ", 16, 1, 1, audio.sample_rate, audio.sample_rate * 2, 2, 16,
        b"data", len(data),
    )
    Path(path).write_bytes(header + data)


# ---------------------------------------------------------------------------
# MFCC


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filter_edges(num_filters: int, sample_rate: int) -> np.ndarray:
    """num_filters + 2 frequencies (Hz) evenly spaced on the mel scale from 0 to Nyquist."""
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), num_filters + 2))


def mel_filterbank(num_filters: int, nfft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters of unit peak over the nfft//2+1 rfft bins."""
    edges = mel_filter_edges(num_filters, sample_rate)
    bins = np.arange(nfft // 2 + 1) * sample_rate / nfft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - lo) / (mid - lo)
    falling = (hi - bins) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def dct_basis(num_ceps: int, n: int) -> np.ndarray:
    """First num_ceps rows of the orthonormal DCT-II matrix of size n."""
    k = np.arange(num_ceps)[:, None]
    i = np.arange(n)[None, :]
    basis = np.cos(np.pi * k * (2 * i + 1) / (2 * n)) * np.sqrt(2.0 / n)
    basis[0] /= np.sqrt(2.0)
    return basis


def frame_count(num_samples: int, frame_samples: int, shift_samples: int) -> int:
    if num_samples < frame_samples:
        return 0
    return (num_samples - frame_samples) // shift_samples + 1


def mfcc(audio: WavAudio, config: MfccConfig | None = None, log_mel: bool = False) -> FeatureMatrix:
    """MFCCs per frame; with ``log_mel=True`` return the pre-DCT log filterbank energies."""
    config = config or MfccConfig()
    sr = audio.sample_rate
    flen, fshift = config.frame_samples(sr), config.shift_samples(sr)
    x = np.asarray(audio.samples, dtype=np.float64)
    n_frames = frame_count(len(x), flen, fshift)
    if n_frames < 1:
        raise AudioTooShortError(f"audio too short: {len(x)} samples < one {flen}-sample frame")

    emphasized = np.concatenate([x[:1], x[1:] - config.preemphasis * x[:-1]])
    idx = np.arange(flen)[None, :] + fshift * np.arange(n_frames)[:, None]
    frames = emphasized[idx] * np.hamming(flen)
    nfft = config.nfft(sr)
    power = np.abs(np.fft.rfft(frames, nfft)) ** 2 / nfft
    energies = power @ mel_filterbank(config.num_mel_filters, nfft, sr).T
    logmel = np.log(np.maximum(energies, config.log_floor))
    if log_mel:
        out = logmel
    else:
        out = logmel @ dct_basis(config.num_ceps, config.num_mel_filters).T
        if config.cepstral_mean_norm:
            out = out - out.mean(axis=0, keepdims=True)
    return FeatureMatrix(out.astype(np.float32), frame_shift_ms=int(round(config.frame_shift_ms)),
                         frame_length_ms=config.frame_length_ms)


# ---------------------------------------------------------------------------
# FMX files


def write_features(path, m: FeatureMatrix) -> None:
    t, f = m.values.shape
    if t == 0 or f == 0:
        raise FeatureFileError(f"refusing to write an empty feature matrix ({t}x{f})")
    if t * f >= _MAX_FMX_ELEMENTS:
        raise FeatureFileError(f"feature matrix too large: {t}x{f}")
    if not np.all(np.isfinite(m.values)):
        raise FeatureFileError("feature matrix contains NaN or Inf")
    header = _FMX_HEADER.pack(FMX_MAGIC, t, f, int(m.frame_shift_ms))
    Path(path).write_bytes(header + np.ascontiguousarray(m.values, dtype="<f4").tobytes())


def read_features(path) -> FeatureMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < _FMX_HEADER.size:
        raise FeatureFileError(f"truncated FMX header: {len(raw)} bytes at offset 0, need {_FMX_HEADER.size}")
    magic, t, f, shift = _FMX_HEADER.unpack_from(raw, 0)
    if magic != FMX_MAGIC:
        raise FeatureFileError(f"bad magic {magic!r} at offset 0, expected {FMX_MAGIC.decode()!r}")
    if t * f >= _MAX_FMX_ELEMENTS:
        raise FeatureFileError(f"dimension overflow at offset 4: {t}x{f}")
    need = _FMX_HEADER.size + 4 * t * f
    if len(raw) < need:
        raise FeatureFileError(
            f"truncated FMX payload: data from offset {_FMX_HEADER.size} needs {4 * t * f} bytes, "
            f"file ends at offset {len(raw)}"
        )
    if len(raw) > need:
        raise FeatureFileError(f"trailing bytes after offset {need}")
    values = np.frombuffer(raw, dtype="<f4", count=t * f, offset=_FMX_HEADER.size).reshape(t, f)
    return FeatureMatrix(values.astype(np.float32), frame_shift_ms=shift)
