"""Cross-domain feature extraction for the quality model."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsp import (HOP, LFB_N_FFT, N_FFT, Waveform, load_embeddings, require_rate,
                  sidecar_path, stft_power)
from .errors import ConfigurationError, ShapeError

# Power values are compressed as log1p(P / POWER_FLOOR): zero power maps to a
# zero feature and the usable dynamic range lands roughly in [0, 20].
POWER_FLOOR = 1e-4


@dataclass
class FeatureBundle:
    """Frame-aligned model inputs for one utterance.

    ``stft`` holds compressed STFT power ``[T, n_fft/2+1]``. ``lfb_power`` is
    the raw zero-padded frame power spectrum ``[T, LFB_N_FFT/2+1]`` that the
    learnable filterbank integrates; the filterbank itself lives in the model.
    ``ssl`` holds optional precomputed embeddings ``[T, emb_dim]``.
    """

    stft: np.ndarray | None = None
    lfb_power: np.ndarray | None = None
    ssl: np.ndarray | None = None

    @property
    def num_frames(self) -> int:
        counts = {a.shape[0] for a in (self.stft, self.lfb_power, self.ssl) if a is not None}
        if not counts:
            raise ShapeError("feature bundle is empty")
        if len(counts) != 1:
            raise ShapeError(f"feature streams disagree on frame count: {sorted(counts)}")
        return counts.pop()


def compress_power(power: np.ndarray) -> np.ndarray:
    return np.log1p(power / POWER_FLOOR)


def extract_features(w: Waveform, stft: bool = True, lfb: bool = True, ssl: bool = False,
                     emb_path=None, emb_dim: int | None = None) -> FeatureBundle:
    require_rate(w)
    bundle = FeatureBundle()
    frames = None
    if stft:
        bundle.stft = compress_power(stft_power(w, N_FFT, HOP).values)
        frames = bundle.stft.shape[0]
    if lfb:
        bundle.lfb_power = stft_power(w, LFB_N_FFT, HOP, frame_len=N_FFT).values
        frames = bundle.lfb_power.shape[0]
    if ssl:
        if emb_path is None:
            raise ConfigurationError("SSL features enabled but no embedding sidecar given")
        if frames is None:
            frames = stft_power(w, N_FFT, HOP).num_frames
        bundle.ssl = load_embeddings(emb_path, frames, emb_dim)
    return bundle


def features_for_file(wav_path, stft=True, lfb=True, ssl=False, emb_dim=None) -> FeatureBundle:
    from .dsp import read_wav

    wav_path = Path(wav_path)
    emb = sidecar_path(wav_path) if ssl else None
    return extract_features(read_wav(wav_path), stft, lfb, ssl, emb, emb_dim)
