"""Intrusive reference metrics used to produce pseudo labels.

Each metric compares a degraded waveform with its time-aligned clean
reference: STOI (intelligibility), SDI (distortion energy ratio) and a
frequency-weighted segmental-SNR quality score that stands in for PESQ.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import resample_poly

from .dsp import HOP, N_FFT, Waveform, frame_signal, read_wav, stft_power
from .errors import ConfigurationError, DegenerateReferenceError, InsufficientSpeechError, MtqError
from .manifest import ManifestEntry, read_manifest, rebase, resolve, write_manifest

log = logging.getLogger(__name__)

EPS = np.finfo(np.float64).eps
MAX_LENGTH_MISMATCH = 0.05
SDI_LABEL_MAX = 2.0

# STOI constants (Taal et al.)
STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30
STOI_BETA = -15.0
STOI_DYN_RANGE = 40.0

PQ_SNR_MIN, PQ_SNR_MAX = -10.0, 35.0
PQ_POWER_EPS = 1e-12
PQ_WEIGHT_EXP = 0.2
ACTIVITY_RANGE_DB = 40.0


@dataclass(frozen=True)
class PairedUtterance:
    clean: Waveform
    degraded: Waveform

    def __post_init__(self):
        c, d = self.clean, self.degraded
        if c.sample_rate_hz != d.sample_rate_hz:
            raise ConfigurationError(
                f"sample-rate mismatch: clean {c.sample_rate_hz} Hz, degraded {d.sample_rate_hz} Hz")
        n, m = len(c), len(d)
        if n != m:
            if abs(n - m) > MAX_LENGTH_MISMATCH * max(n, m):
                raise ConfigurationError(f"clean/degraded lengths differ too much ({n} vs {m})")
            k = min(n, m)
            object.__setattr__(self, "clean", Waveform(c.samples[:k], c.sample_rate_hz))
            object.__setattr__(self, "degraded", Waveform(d.samples[:k], d.sample_rate_hz))

    @classmethod
    def of(cls, clean, degraded, sample_rate_hz: int = 16000) -> "PairedUtterance":
        if not isinstance(clean, Waveform):
            clean = Waveform(clean, sample_rate_hz)
        if not isinstance(degraded, Waveform):
            degraded = Waveform(degraded, sample_rate_hz)
        return cls(clean, degraded)


@dataclass(frozen=True)
class OracleScores:
    stoi: float
    sdi: float
    pq_proxy: float

    def as_pseudo(self) -> dict:
        return {"pq": self.pq_proxy, "stoi": self.stoi, "sdi": min(self.sdi, SDI_LABEL_MAX)}


def _pair(pair_or_clean, degraded=None) -> PairedUtterance:
    if isinstance(pair_or_clean, PairedUtterance):
        return pair_or_clean
    return PairedUtterance.of(pair_or_clean, degraded)


# ---------------------------------------------------------------------------
# SDI
# ---------------------------------------------------------------------------

def sdi(pair, degraded=None) -> float:
    """Distortion energy over clean energy across the whole utterance."""
    p = _pair(pair, degraded)
    c, d = p.clean.samples, p.degraded.samples
    energy = float(np.dot(c, c))
    if energy <= 0.0:
        raise DegenerateReferenceError("degenerate reference: clean signal has zero energy")
    diff = d - c
    return float(np.dot(diff, diff)) / energy


# ---------------------------------------------------------------------------
# STOI
# ---------------------------------------------------------------------------

def third_octave_matrix(fs=STOI_FS, nfft=STOI_NFFT, num_bands=STOI_BANDS, min_freq=STOI_MIN_FREQ):
    """Binary band-to-bin assignment ``[num_bands, nfft/2+1]`` and band centres."""
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(num_bands, dtype=np.float64)
    cf = min_freq * 2.0 ** (k / 3.0)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6.0)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6.0)
    obm = np.zeros((num_bands, f.size))
    for i in range(num_bands):
        a = int(np.argmin((f - lo[i]) ** 2))
        b = int(np.argmin((f - hi[i]) ** 2))
        obm[i, a:b] = 1.0
    return obm, cf


def _frames(x: np.ndarray, size: int, hop: int) -> np.ndarray:
    if x.size < size:
        return np.zeros((0, size))
    return sliding_window_view(x, size)[::hop]


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    n, size = frames.shape
    out = np.zeros((n - 1) * hop + size) if n else np.zeros(0)
    for i in range(n):
        out[i * hop:i * hop + size] += frames[i]
    return out


def remove_silent_frames(x, y, dyn_range=STOI_DYN_RANGE, size=STOI_FRAME, hop=STOI_FRAME // 2):
    """Drop frames whose clean energy is more than ``dyn_range`` dB below the loudest."""
    w = np.hanning(size + 2)[1:-1]
    xf = _frames(x, size, hop) * w
    yf = _frames(y, size, hop) * w
    energy = 20.0 * np.log10(np.linalg.norm(xf, axis=1) + EPS)
    keep = energy > energy.max() - dyn_range if energy.size else np.zeros(0, bool)
    return _overlap_add(xf[keep], hop), _overlap_add(yf[keep], hop)


def _band_envelopes(x: np.ndarray, obm: np.ndarray) -> np.ndarray:
    w = np.hanning(STOI_FRAME + 2)[1:-1]
    spec = np.fft.rfft(_frames(x, STOI_FRAME, STOI_FRAME // 2) * w, n=STOI_NFFT, axis=1)
    return np.sqrt(np.abs(spec) ** 2 @ obm.T).T  # [bands, frames]


def stoi(pair, degraded=None) -> float:
    """Short-time objective intelligibility in [0, 1]."""
    p = _pair(pair, degraded)
    fs = p.clean.sample_rate_hz
    x, y = p.clean.samples, p.degraded.samples
    if not np.any(x):
        raise InsufficientSpeechError("insufficient speech: clean signal is silent")
    if fs != STOI_FS:
        g = np.gcd(int(fs), STOI_FS)
        x = resample_poly(x, STOI_FS // g, int(fs) // g)
        y = resample_poly(y, STOI_FS // g, int(fs) // g)
    x, y = remove_silent_frames(x, y)
    obm, _ = third_octave_matrix()
    xe = _band_envelopes(x, obm)
    ye = _band_envelopes(y, obm)
    n_frames = xe.shape[1]
    if n_frames < STOI_SEGMENT:
        raise InsufficientSpeechError(
            f"insufficient speech: {n_frames} frames after silence removal, need {STOI_SEGMENT}")
    # segments: [num_segments, bands, N]
    xs = sliding_window_view(xe, STOI_SEGMENT, axis=1).transpose(1, 0, 2)
    ys = sliding_window_view(ye, STOI_SEGMENT, axis=1).transpose(1, 0, 2)
    scale = np.linalg.norm(xs, axis=2, keepdims=True) / (np.linalg.norm(ys, axis=2, keepdims=True) + EPS)
    yn = ys * scale
    clip = 10.0 ** (-STOI_BETA / 20.0)
    yp = np.minimum(yn, xs * (1.0 + clip))
    xc = xs - xs.mean(axis=2, keepdims=True)
    yc = yp - yp.mean(axis=2, keepdims=True)
    xc = xc / (np.linalg.norm(xc, axis=2, keepdims=True) + EPS)
    yc = yc / (np.linalg.norm(yc, axis=2, keepdims=True) + EPS)
    d = float(np.sum(xc * yc) / (xs.shape[0] * xs.shape[1]))
    return float(np.clip(d, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Quality proxy
# ---------------------------------------------------------------------------

def active_frames(x: np.ndarray, frame_len=N_FFT, hop=HOP, dyn_range=ACTIVITY_RANGE_DB) -> np.ndarray:
    """Mask of frames whose energy is within ``dyn_range`` dB of the loudest frame."""
    energy = np.sum(frame_signal(x, frame_len, hop) ** 2, axis=1)
    peak = energy.max()
    if peak <= 0:
        return np.zeros(energy.shape, bool)
    return energy >= peak * 10.0 ** (-dyn_range / 10.0)


def snr_to_pq(snr_mean_db: float) -> float:
    return float(np.clip(1.0 + 3.5 * (snr_mean_db - PQ_SNR_MIN) / (PQ_SNR_MAX - PQ_SNR_MIN), 1.0, 4.5))


def fw_segmental_snr(pair, degraded=None) -> float:
    """Mean frequency-weighted segmental SNR (dB) over speech-active frames."""
    p = _pair(pair, degraded)
    c, d = p.clean.samples, p.degraded.samples
    if not np.any(c):
        raise DegenerateReferenceError("degenerate reference: clean signal has zero energy")
    pc = stft_power(c).values
    pe = stft_power(d - c).values
    mask = active_frames(c)
    pc, pe = pc[mask], pe[mask]
    w = pc ** PQ_WEIGHT_EXP
    num = np.sum(w * pc, axis=1)
    den = np.sum(w * np.maximum(pe, PQ_POWER_EPS), axis=1)
    snr = np.clip(10.0 * np.log10(num / den), PQ_SNR_MIN, PQ_SNR_MAX)
    return float(np.mean(snr))


def pq_proxy(pair, degraded=None) -> float:
    """Quality score in [1.0, 4.5] from the weighted segmental SNR."""
    return snr_to_pq(fw_segmental_snr(pair, degraded))


def oracle_scores(pair, degraded=None) -> OracleScores:
    p = _pair(pair, degraded)
    return OracleScores(stoi=stoi(p), sdi=sdi(p), pq_proxy=pq_proxy(p))


# ---------------------------------------------------------------------------
# Manifest labelling
# ---------------------------------------------------------------------------

def _label_one(args):
    entry, manifest_path = args
    if entry.pseudo is not None:
        return entry, None
    if entry.clean_path is None:
        return entry, "entry has neither clean_path nor a pseudo block"
    try:
        clean = read_wav(resolve(manifest_path, entry.clean_path))
        degraded = read_wav(resolve(manifest_path, entry.degraded_path))
        scores = oracle_scores(PairedUtterance(clean, degraded))
    except (MtqError, OSError, ValueError) as exc:
        return entry, f"{type(exc).__name__}: {exc}"
    return ManifestEntry(entry.id, entry.degraded_path, entry.clean_path, entry.labels,
                         scores.as_pseudo(), entry.condition), None


def compute_pseudo_labels(manifest_in, out_path=None, workers: int = 1):
    """Fill ``pseudo`` blocks from the oracle; existing blocks pass through untouched.

    Returns ``(entries, errors)`` where ``errors`` maps entry id to a message.
    Failed entries are written unchanged. Output order always follows input.
    """
    manifest_in = Path(manifest_in)
    entries = read_manifest(manifest_in)
    jobs = [(e, manifest_in) for e in entries]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_label_one, jobs, chunksize=4))
    else:
        results = [_label_one(j) for j in jobs]
    out_entries, errors = [], {}
    for entry, err in results:
        if err is not None:
            errors[entry.id] = err
            log.error("pseudo label failed for %s: %s", entry.id, err)
        out_entries.append(entry)
    if out_path is not None:
        out_entries = [rebase(e, manifest_in, out_path) for e in out_entries]
        write_manifest(out_path, out_entries)
    return out_entries, errors
