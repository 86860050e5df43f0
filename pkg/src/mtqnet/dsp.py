"""Signal-processing primitives: WAV I/O, framing, STFT power, sinc band-pass kernels.

All functions here are pure. The engine works at a single sample rate of
16 kHz; other rates are rejected rather than resampled.
"""
from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, InputTooShortError, ShapeError

SAMPLE_RATE = 16000
N_FFT = 512
HOP = 256
# Zero-padded transform length used for the learnable filterbank; large enough
# that a 512-sample frame convolved with a 251-tap kernel does not wrap around.
LFB_N_FFT = 1024
LFB_FILTERS = 64
LFB_KERNEL_LEN = 251
LFB_MIN_HZ = 30.0
LFB_MAX_HZ = 7700.0

EMB_MAGIC = b"MTQE"
EMB_VERSION = 1


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ShapeError(f"waveform must be mono 1-D, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("waveform contains NaN or Inf samples")
        if int(self.sample_rate_hz) <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        object.__setattr__(self, "samples", x)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz


def _as_samples(w) -> np.ndarray:
    if isinstance(w, Waveform):
        return w.samples
    return np.asarray(w, dtype=np.float64)


def require_rate(w: Waveform, rate: int = SAMPLE_RATE) -> None:
    if w.sample_rate_hz != rate:
        raise ConfigurationError(
            f"expected {rate} Hz audio, got {w.sample_rate_hz} Hz (resampling is not supported)")


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

def read_wav(path) -> Waveform:
    """Read a 16-bit PCM mono WAV file into a Waveform scaled to [-1, 1)."""
    try:
        fh = wave.open(str(path), "rb")
    except (wave.Error, EOFError) as exc:
        raise ConfigurationError(f"{path}: not a readable WAV file ({exc})") from exc
    with fh:
        if fh.getnchannels() != 1:
            raise ConfigurationError(f"{path}: expected mono, got {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2:
            raise ConfigurationError(f"{path}: expected 16-bit PCM, got {8 * fh.getsampwidth()}-bit")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def quantize(samples: np.ndarray) -> np.ndarray:
    """Round to the 16-bit grid used on disk (returns int16)."""
    q = np.round(np.asarray(samples, dtype=np.float64) * 32768.0)
    return np.clip(q, -32768, 32767).astype("<i2")


def write_wav(path, w: Waveform) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate_hz))
        fh.writeframes(quantize(w.samples).tobytes())


# ---------------------------------------------------------------------------
# Framing and STFT
# ---------------------------------------------------------------------------

def num_frames(length: int, frame_len: int = N_FFT, hop: int = HOP) -> int:
    """Frame count produced by frame_signal for a signal of ``length`` samples."""
    if length < frame_len:
        raise InputTooShortError(f"input too short: {length} samples < frame length {frame_len}")
    return -(-(length - frame_len) // hop) + 1


def frame_signal(w, frame_len: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Split a signal into overlapping frames, shape ``[num_frames, frame_len]``.

    A trailing partial frame is completed by reflect-padding the tail, so the
    last samples of the signal always land in some frame.
    """
    if not (frame_len >= hop >= 1):
        raise ValueError(f"need frame_len >= hop >= 1, got frame_len={frame_len}, hop={hop}")
    x = _as_samples(w)
    n = num_frames(x.shape[0], frame_len, hop)
    pad = (n - 1) * hop + frame_len - x.shape[0]
    if pad:
        x = np.pad(x, (0, pad), mode="reflect")
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def get_window(window, n: int) -> np.ndarray:
    if isinstance(window, str):
        if window == "hamming":
            return np.hamming(n)
        if window == "hann":
            return np.hanning(n)
        if window in ("rect", "rectangular", "boxcar"):
            return np.ones(n)
        raise ValueError(f"unknown window {window!r}")
    win = np.asarray(window, dtype=np.float64)
    if win.shape != (n,):
        raise ShapeError(f"window length {win.shape} does not match frame length {n}")
    return win


@dataclass(frozen=True)
class SpectralFrames:
    values: np.ndarray  # [num_frames, n_fft // 2 + 1], power
    frame_hop_samples: int
    frame_len_samples: int

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]


def stft_power(w, n_fft: int = N_FFT, hop: int = HOP, window="hamming",
               frame_len: int | None = None) -> SpectralFrames:
    """Power spectrogram ``|DFT(window * frame)|**2`` on the one-sided bins.

    ``frame_len`` defaults to ``n_fft``; a shorter frame is zero-padded to
    ``n_fft`` before the transform.
    """
    if n_fft < 1 or n_fft & (n_fft - 1):
        raise ValueError(f"n_fft must be a power of two, got {n_fft}")
    frame_len = n_fft if frame_len is None else frame_len
    if frame_len > n_fft:
        raise ValueError("frame_len cannot exceed n_fft")
    frames = frame_signal(w, frame_len, hop) * get_window(window, frame_len)
    spec = np.fft.rfft(frames, n=n_fft, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    return SpectralFrames(power, hop, frame_len)


# ---------------------------------------------------------------------------
# Sinc band-pass kernels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SincBandParams:
    low_hz: np.ndarray
    band_hz: np.ndarray
    kernel_len: int = LFB_KERNEL_LEN

    def __post_init__(self):
        low = np.atleast_1d(np.asarray(self.low_hz, dtype=np.float64))
        band = np.atleast_1d(np.asarray(self.band_hz, dtype=np.float64))
        if low.shape != band.shape or low.ndim != 1:
            raise ShapeError(f"low_hz {low.shape} and band_hz {band.shape} must be equal-length vectors")
        if self.kernel_len < 1 or self.kernel_len % 2 == 0:
            raise ValueError(f"kernel_len must be odd, got {self.kernel_len}")
        object.__setattr__(self, "low_hz", low)
        object.__setattr__(self, "band_hz", band)


def clamp_sinc_bands(low_hz, band_hz, sample_rate_hz: int = SAMPLE_RATE):
    """Keep cutoffs inside a usable, alias-free region.

    low in [30, fs/2 - 100] Hz, band in [30, fs/2 - low - 50] Hz.
    """
    nyq = sample_rate_hz / 2.0
    low = np.clip(low_hz, 30.0, nyq - 100.0)
    band = np.clip(band_hz, 30.0, nyq - low - 50.0)
    return low, band


def mel_band_init(n_filters: int = LFB_FILTERS, min_hz: float = LFB_MIN_HZ,
                  max_hz: float = LFB_MAX_HZ, kernel_len: int = LFB_KERNEL_LEN) -> SincBandParams:
    """Filters with edges equally spaced on the mel scale."""
    def to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def from_mel(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    edges = from_mel(np.linspace(to_mel(min_hz), to_mel(max_hz), n_filters + 1))
    return SincBandParams(edges[:-1], np.diff(edges), kernel_len)


def kernel_time_axis(kernel_len: int) -> np.ndarray:
    half = (kernel_len - 1) // 2
    return np.arange(-half, half + 1, dtype=np.float64)


def _lowpass_term(f_norm: np.ndarray, t: np.ndarray) -> np.ndarray:
    # 2 f sinc(2 pi f t) with f in cycles/sample and t in samples == sin(2 pi f t) / (pi t)
    arg = 2.0 * np.pi * f_norm[:, None] * t[None, :]
    out = np.empty_like(arg)
    nz = t != 0
    out[:, nz] = np.sin(arg[:, nz]) / (np.pi * t[None, nz])
    out[:, ~nz] = 2.0 * f_norm[:, None]
    return out


def sinc_kernels_from_arrays(low_hz, band_hz, sample_rate_hz: int, kernel_len: int) -> np.ndarray:
    low, band = clamp_sinc_bands(np.asarray(low_hz, dtype=np.float64),
                                 np.asarray(band_hz, dtype=np.float64), sample_rate_hz)
    t = kernel_time_axis(kernel_len)
    f1 = low / sample_rate_hz
    f2 = (low + band) / sample_rate_hz
    win = np.hamming(kernel_len)
    return (_lowpass_term(f2, t) - _lowpass_term(f1, t)) * win[None, :]


def sinc_kernels(p: SincBandParams, sample_rate_hz: int = SAMPLE_RATE) -> np.ndarray:
    """Hamming-windowed band-pass kernels, one row per filter.

    Frequencies are expressed in cycles per sample and time in samples, so a
    kernel has unit gain in its pass band. Out-of-range cutoffs are clamped.
    """
    return sinc_kernels_from_arrays(p.low_hz, p.band_hz, sample_rate_hz, p.kernel_len)


def dft_basis(kernel_len: int, n_fft: int = LFB_N_FFT):
    """Real/imag rDFT matrices ``[kernel_len, n_fft//2+1]`` for a centred kernel."""
    n = np.arange(kernel_len)[:, None]
    k = np.arange(n_fft // 2 + 1)[None, :]
    ang = 2.0 * np.pi * n * k / n_fft
    return np.cos(ang), -np.sin(ang)


# ---------------------------------------------------------------------------
# Embedding sidecars
# ---------------------------------------------------------------------------

def write_embeddings(path, emb: np.ndarray) -> None:
    emb = np.asarray(emb, dtype="<f4")
    if emb.ndim != 2:
        raise ShapeError(f"embeddings must be 2-D [frames, dim], got {emb.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC + struct.pack("<III", EMB_VERSION, emb.shape[0], emb.shape[1]))
        fh.write(np.ascontiguousarray(emb).tobytes())


def read_embeddings(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"embedding sidecar not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 16 or blob[:4] != EMB_MAGIC:
        raise ConfigurationError(f"{path}: not an embedding sidecar (bad magic)")
    version, frames, dim = struct.unpack("<III", blob[4:16])
    if version != EMB_VERSION:
        raise ConfigurationError(f"{path}: unsupported sidecar version {version}")
    if len(blob) != 16 + 4 * frames * dim:
        raise ShapeError(f"{path}: payload size does not match header {frames}x{dim}")
    return np.frombuffer(blob, dtype="<f4", offset=16).reshape(frames, dim).astype(np.float64)


def resample_rows(values: np.ndarray, target: int) -> np.ndarray:
    """Linearly interpolate rows along time so that there are ``target`` rows."""
    n = values.shape[0]
    if n == target:
        return values.copy()
    if n == 1:
        return np.repeat(values, target, axis=0)
    src = np.arange(n, dtype=np.float64)
    pos = np.linspace(0.0, n - 1.0, target) if target > 1 else np.zeros(1)
    return np.stack([np.interp(pos, src, values[:, j]) for j in range(values.shape[1])], axis=1)


def load_embeddings(path, target_num_frames: int, emb_dim: int | None = None) -> np.ndarray:
    emb = read_embeddings(path)
    if emb_dim is not None and emb.shape[1] != emb_dim:
        raise ShapeError(f"{path}: embedding dim {emb.shape[1]} != model emb_dim {emb_dim}")
    if emb.shape[0] < 1:
        raise ShapeError(f"{path}: sidecar has no frames")
    return resample_rows(emb, target_num_frames)


def sidecar_path(wav_path) -> Path:
    """Embedding sidecar that accompanies a degraded WAV (same stem, ``.mtqe``)."""
    return Path(wav_path).with_suffix(".mtqe")
