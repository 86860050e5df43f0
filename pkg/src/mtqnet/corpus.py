"""Synthetic paired corpus: speech-like clean signals, noisy and processed versions,
and proxy ground-truth speech/noise/overall quality labels.

The proxy labels are fixed formulas of the audio pair:

* speech score  S = clip(5 - 8 * SDI, 1, 5)
* noise score   N = clip(1 + 4 * (snr_resid + 5) / 25, 1, 5), with snr_resid the
  clean-to-residual segmental SNR clamped to [-5, 20] dB
* overall score G = clip((S + N) / 2, 1, 5)
"""
from __future__ import annotations

import itertools
import logging
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from .dsp import HOP, N_FFT, SAMPLE_RATE, Waveform, frame_signal, quantize, write_wav
from .manifest import ManifestEntry, write_manifest
from .oracle import ACTIVITY_RANGE_DB, PairedUtterance, sdi

log = logging.getLogger(__name__)

NOISE_TYPES = ("white", "pink", "modulated-tonal")
ENHANCERS = ("none", "spectral-subtraction", "wiener-gain", "hard-clip", "lowpass")
SPLITS = {"train": 0, "test": 1}

PEAK = 0.5
NOISE_EST_S = 0.2
OVERSUB = 1.5
SPECTRAL_FLOOR = 0.01
CLIP_LEVEL = 0.3
LOWPASS_HZ = 3000.0
RESID_SNR_MIN, RESID_SNR_MAX = -5.0, 20.0


@dataclass
class CorpusConfig:
    n_train: int = 300
    n_test: int = 100
    duration_s: float = 2.0
    noise_types: tuple = NOISE_TYPES
    snr_db_grid: tuple = (-5.0, 0.0, 5.0, 10.0, 15.0)
    enhancers: tuple = ENHANCERS
    seed: int = 0
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.noise_types = tuple(self.noise_types)
        self.snr_db_grid = tuple(float(s) for s in self.snr_db_grid)
        self.enhancers = tuple(self.enhancers)

    def validate(self) -> None:
        if not (self.noise_types and self.snr_db_grid and self.enhancers):
            raise ValueError("noise, SNR and enhancer grids must be non-empty")
        if self.duration_s < 1.0:
            raise ValueError("duration_s must be at least 1 s")
        if set(self.noise_types) - set(NOISE_TYPES):
            raise ValueError(f"unknown noise types {sorted(set(self.noise_types) - set(NOISE_TYPES))}")
        if set(self.enhancers) - set(ENHANCERS):
            raise ValueError(f"unknown enhancers {sorted(set(self.enhancers) - set(ENHANCERS))}")
        if self.n_train < 0 or self.n_test < 0:
            raise ValueError("utterance counts must be non-negative")

    def conditions(self) -> list[tuple[str, float, str]]:
        return list(itertools.product(self.noise_types, self.snr_db_grid, self.enhancers))

    def condition_for(self, split: str, index: int) -> tuple[str, float, str]:
        """Each block of ``len(conditions())`` utterances covers every condition once,
        in a seeded order, so small corpora still span the grid."""
        conds = self.conditions()
        block, pos = divmod(index, len(conds))
        order = np.random.default_rng([self.seed, SPLITS[split], block, 99]).permutation(len(conds))
        return conds[order[pos]]


def _rng(cfg: CorpusConfig, split: str, index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, SPLITS[split], index, stream])


def _ramp_gate(n: int, fs: int, segments, ramp_s: float = 0.01) -> np.ndarray:
    """1 inside each (start, stop) sample segment, raised-cosine edges, 0 elsewhere."""
    gate = np.zeros(n)
    r = max(1, int(ramp_s * fs))
    edge = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
    for a, b in segments:
        if b - a <= 2 * r:
            continue
        gate[a:b] = 1.0
        gate[a:a + r] = edge
        gate[b - r:b] = edge[::-1]
    return gate


def _pink(rng: np.random.Generator, n: int) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.size, dtype=np.float64)
    f[0] = np.inf
    return np.fft.irfft(spec / np.sqrt(f), n)


def synth_clean(cfg: CorpusConfig, index: int, split: str = "train") -> Waveform:
    """Harmonic speech surrogate with syllabic envelope, breath noise and pauses."""
    rng = _rng(cfg, split, index, 0)
    fs = cfg.sample_rate
    n = int(round(cfg.duration_s * fs))
    t = np.arange(n) / fs

    f0 = rng.uniform(100.0, 250.0)
    contour = f0 * (1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.3, 1.0) * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(contour) / fs
    voiced = np.zeros(n)
    for k in range(1, int(rng.integers(3, 6)) + 1):
        voiced += rng.uniform(0.5, 1.0) / k * np.sin(k * phase + rng.uniform(0, 2 * np.pi))

    # aspiration: pink noise band-limited below 5 kHz, ~15 dB under the voiced part
    sos = signal.butter(4, 5000.0, fs=fs, output="sos")
    breath = signal.sosfilt(sos, _pink(rng, n))
    breath *= np.sqrt(np.mean(voiced ** 2) / (np.mean(breath ** 2) + 1e-30)) * 10 ** (-15 / 20)

    rate = rng.uniform(2.0, 6.0)
    env = 0.15 + 0.85 * (0.5 - 0.5 * np.cos(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))

    lead = int(rng.uniform(0.25, 0.35) * fs)
    tail = n - int(rng.uniform(0.05, 0.15) * fs)
    plen = int(rng.uniform(0.15, 0.3) * fs)
    pstart = int(rng.uniform(lead + 0.2 * fs, max(lead + 0.2 * fs + 1, tail - plen - 0.2 * fs)))
    gate = _ramp_gate(n, fs, [(lead, pstart), (pstart + plen, tail)])

    x = (voiced + breath) * env * gate
    x *= PEAK / np.max(np.abs(x))
    return Waveform(x, fs)


def make_noise(noise_type: str, n: int, fs: int, rng: np.random.Generator) -> np.ndarray:
    if noise_type == "white":
        return rng.standard_normal(n)
    if noise_type == "pink":
        return _pink(rng, n)
    if noise_type == "modulated-tonal":
        t = np.arange(n) / fs
        out = np.zeros(n)
        for _ in range(3):
            f = rng.uniform(300.0, 3000.0)
            am = 1.0 + 0.8 * np.sin(2 * np.pi * rng.uniform(1.0, 8.0) * t + rng.uniform(0, 2 * np.pi))
            out += am * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        return out
    raise ValueError(f"unknown noise type {noise_type!r}")


def _spectral_enhance(noisy: np.ndarray, fs: int, mode: str) -> np.ndarray:
    _, times, Y = signal.stft(noisy, fs=fs, window="hann", nperseg=N_FFT, noverlap=N_FFT - HOP)
    p = np.abs(Y) ** 2
    head = times <= NOISE_EST_S
    noise_psd = p[:, head].mean(axis=1, keepdims=True)
    if mode == "spectral-subtraction":
        ps = np.maximum(p - OVERSUB * noise_psd, SPECTRAL_FLOOR * p)
        S = np.sqrt(ps) * np.exp(1j * np.angle(Y))
    else:
        ps = np.maximum(p - noise_psd, 0.0)
        S = Y * ps / (ps + noise_psd + 1e-30)
    _, out = signal.istft(S, fs=fs, window="hann", nperseg=N_FFT, noverlap=N_FFT - HOP)
    out = out[: noisy.size]
    if out.size < noisy.size:
        out = np.pad(out, (0, noisy.size - out.size))
    return out


def enhance(noisy: np.ndarray, fs: int, enhancer: str) -> np.ndarray:
    if enhancer == "none":
        return noisy.copy()
    if enhancer in ("spectral-subtraction", "wiener-gain"):
        return _spectral_enhance(noisy, fs, enhancer)
    if enhancer == "hard-clip":
        return np.clip(noisy, -CLIP_LEVEL, CLIP_LEVEL)
    if enhancer == "lowpass":
        return signal.sosfilt(signal.butter(4, LOWPASS_HZ, fs=fs, output="sos"), noisy)
    raise ValueError(f"unknown enhancer {enhancer!r}")


def degrade(clean: Waveform, noise_type: str, snr_db: float, enhancer: str = "none",
            seed=0) -> Waveform:
    """Add noise at exactly ``snr_db`` (clean energy / noise energy), then enhance."""
    if not np.isfinite(snr_db):
        raise ValueError("snr_db must be finite")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = clean.samples
    noise = make_noise(noise_type, x.size, clean.sample_rate_hz, rng)
    gain = np.sqrt(np.dot(x, x) / (np.dot(noise, noise) * 10.0 ** (snr_db / 10.0)))
    noisy = x + gain * noise
    return Waveform(enhance(noisy, clean.sample_rate_hz, enhancer), clean.sample_rate_hz)


def residual_segmental_snr(clean: np.ndarray, degraded: np.ndarray) -> float:
    """Mean per-frame clean/residual SNR (dB) over active frames, clamped to [-5, 20]."""
    cf = frame_signal(clean, N_FFT, HOP)
    rf = frame_signal(degraded - clean, N_FFT, HOP)
    ec = np.sum(cf ** 2, axis=1)
    er = np.sum(rf ** 2, axis=1)
    active = ec >= ec.max() * 10.0 ** (-ACTIVITY_RANGE_DB / 10.0)
    with np.errstate(divide="ignore"):
        snr = 10.0 * np.log10(ec[active] / np.maximum(er[active], 1e-300))
    return float(np.mean(np.clip(snr, RESID_SNR_MIN, RESID_SNR_MAX)))


def assign_proxy_truth(pair: PairedUtterance) -> dict:
    s = float(np.clip(5.0 - 8.0 * sdi(pair), 1.0, 5.0))
    resid = residual_segmental_snr(pair.clean.samples, pair.degraded.samples)
    n = float(np.clip(1.0 + 4.0 * (resid - RESID_SNR_MIN) / (RESID_SNR_MAX - RESID_SNR_MIN), 1.0, 5.0))
    g = float(np.clip(0.5 * s + 0.5 * n, 1.0, 5.0))
    return {"smos": s, "nmos": n, "gmos": g}


def _as_stored(w: Waveform) -> Waveform:
    return Waveform(quantize(w.samples).astype(np.float64) / 32768.0, w.sample_rate_hz)


def make_utterance(cfg: CorpusConfig, split: str, index: int):
    """(clean, degraded, labels, condition tag) as they will be stored on disk."""
    noise_type, snr, enh = cfg.condition_for(split, index)
    clean = _as_stored(synth_clean(cfg, index, split))
    degraded = _as_stored(degrade(clean, noise_type, snr, enh, _rng(cfg, split, index, 1)))
    labels = assign_proxy_truth(PairedUtterance(clean, degraded))
    return clean, degraded, labels, f"{noise_type}/snr{snr:+g}/{enh}"


def _build_one(args):
    cfg, split, index, out_dir = args
    uid = f"{split}-{index:05d}"
    clean, degraded, labels, cond = make_utterance(cfg, split, index)
    clean_rel = f"{split}/clean/{uid}.wav"
    deg_rel = f"{split}/degraded/{uid}.wav"
    write_wav(out_dir / clean_rel, clean)
    write_wav(out_dir / deg_rel, degraded)
    return ManifestEntry(uid, deg_rel, clean_rel, labels, None, cond)


def build_corpus(cfg: CorpusConfig, out_dir, workers: int = 1) -> dict[str, Path]:
    """Write WAV trees and ``train.jsonl`` / ``test.jsonl`` under ``out_dir``."""
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    created = [out_dir / s for s in SPLITS if not (out_dir / s).exists()]
    manifests = {}
    try:
        for split, count in (("train", cfg.n_train), ("test", cfg.n_test)):
            jobs = [(cfg, split, i, out_dir) for i in range(count)]
            if workers > 1:
                with ProcessPoolExecutor(workers) as pool:
                    entries = list(pool.map(_build_one, jobs, chunksize=8))
            else:
                entries = [_build_one(j) for j in jobs]
            path = out_dir / f"{split}.jsonl"
            write_manifest(path, entries)
            manifests[split] = path
    except Exception:
        for p in created:
            shutil.rmtree(p, ignore_errors=True)
        for p in manifests.values():
            p.unlink(missing_ok=True)
        raise
    return manifests
