"""The six-head quality network: per-stream CNNs, a shared BLSTM, and task heads.

Each enabled feature stream runs through its own conv stack (stride 2 along
frequency only, so the time axis keeps one row per STFT frame). Flattened
per-frame outputs are concatenated, fed to a bidirectional LSTM, and then to
six heads. A head is attention -> per-frame dense layers -> squashed scalar;
the utterance score is the mean of the frame scores. Only the three primary
heads are evaluated at inference.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import nn
from .dsp import (LFB_FILTERS, LFB_KERNEL_LEN, LFB_N_FFT, N_FFT, SAMPLE_RATE, Waveform,
                  clamp_sinc_bands, dft_basis, mel_band_init)
from .errors import ConfigurationError, ShapeError
from .features import POWER_FLOOR, FeatureBundle, extract_features

PRIMARY = ("smos", "nmos", "gmos")
PSEUDO = ("pq", "stoi", "sdi")
METRICS = PRIMARY + PSEUDO
STREAMS = ("stft", "lfb", "ssl")

DEFAULT_RANGES = {
    "smos": (1.0, 5.0), "nmos": (1.0, 5.0), "gmos": (1.0, 5.0),
    "pq": (1.0, 4.5), "stoi": (0.0, 1.0), "sdi": (0.0, 2.0),
}


@dataclass
class MtqNetConfig:
    conv_channels: tuple = (16, 32, 64, 128)
    conv_kernel: int = 3
    conv_stride_freq: int = 2
    blstm_hidden: int = 128
    head_fc_width: int = 64
    features: tuple = ("stft", "lfb")
    emb_dim: int = 0
    stft_bins: int = N_FFT // 2 + 1
    lfb_filters: int = LFB_FILTERS
    lfb_kernel_len: int = LFB_KERNEL_LEN
    lfb_n_fft: int = LFB_N_FFT
    sample_rate: int = SAMPLE_RATE
    ranges: dict = field(default_factory=lambda: dict(DEFAULT_RANGES))

    @classmethod
    def tiny(cls, **overrides) -> "MtqNetConfig":
        base = dict(conv_channels=(4, 8), blstm_hidden=16, head_fc_width=16)
        base.update(overrides)
        return cls(**base)

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        self.features = tuple(self.features)
        self.ranges = {k: tuple(float(x) for x in v) for k, v in self.ranges.items()}

    def validate(self) -> None:
        if not self.features:
            raise ConfigurationError("at least one feature stream must be enabled")
        unknown = set(self.features) - set(STREAMS)
        if unknown:
            raise ConfigurationError(f"unknown feature streams {sorted(unknown)}")
        widths = (*self.conv_channels, self.blstm_hidden, self.head_fc_width, self.conv_kernel,
                  self.conv_stride_freq, self.stft_bins, self.lfb_filters)
        if not self.conv_channels or min(widths) < 1:
            raise ConfigurationError("all layer widths must be >= 1")
        if "ssl" in self.features and self.emb_dim < 1:
            raise ConfigurationError("ssl stream enabled but emb_dim < 1")
        if self.lfb_kernel_len % 2 == 0 or self.lfb_kernel_len > self.lfb_n_fft:
            raise ConfigurationError("lfb_kernel_len must be odd and no longer than lfb_n_fft")
        missing = set(METRICS) - set(self.ranges)
        if missing:
            raise ConfigurationError(f"score ranges missing for {sorted(missing)}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["features"] = list(self.features)
        d["ranges"] = {k: list(v) for k, v in self.ranges.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MtqNetConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown model config keys {sorted(extra)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def stream_width(self, stream: str) -> int:
        """Input width (frequency/feature axis) of a stream before the conv stack."""
        return {"stft": self.stft_bins, "lfb": self.lfb_filters, "ssl": self.emb_dim}[stream]

    def conv_out_width(self, width: int) -> int:
        pad = self.conv_kernel // 2
        for _ in self.conv_channels:
            width = (width + 2 * pad - self.conv_kernel) // self.conv_stride_freq + 1
        return width

    def encoder_input_dim(self) -> int:
        return sum(self.conv_channels[-1] * self.conv_out_width(self.stream_width(s))
                   for s in self.features)


@dataclass
class HeadOutput:
    frames: ad.Tensor     # [F_u] frame scores
    utterance: ad.Tensor  # scalar, mean of frames


class PredictionSet(dict):
    """metric name -> HeadOutput."""

    def utterance_scores(self) -> dict[str, float]:
        return {m: h.utterance.item() for m, h in self.items()}


class MtqNet:
    def __init__(self, config: MtqNetConfig, params: nn.ParamStore):
        config.validate()
        self.config = config
        self.params = params
        if "lfb" in config.features:
            self._basis = dft_basis(config.lfb_kernel_len, config.lfb_n_fft)
            params.hooks.append(_clamp_hook(config.sample_rate))

    # construction --------------------------------------------------------
    @classmethod
    def build(cls, config: MtqNetConfig, seed: int = 0) -> "MtqNet":
        config.validate()
        rng = np.random.default_rng(seed)
        p = nn.ParamStore()
        k = config.conv_kernel
        for stream in config.features:
            if stream == "lfb":
                bands = mel_band_init(config.lfb_filters, kernel_len=config.lfb_kernel_len)
                low, band = clamp_sinc_bands(bands.low_hz, bands.band_hz, config.sample_rate)
                p.add("lfb_low_hz", low)
                p.add("lfb_band_hz", band)
            c_in = 1
            for i, c_out in enumerate(config.conv_channels):
                p.add(f"{stream}_conv{i}_w", nn.conv_init(rng, c_out, c_in, k, k))
                p.add(f"{stream}_conv{i}_b", np.zeros(c_out))
                c_in = c_out
        d_in = config.encoder_input_dim()
        hidden = config.blstm_hidden
        for direction in ("fw", "bw"):
            w_ih, w_hh, b = nn.lstm_init(rng, d_in, hidden)
            p.add(f"blstm_{direction}_w_ih", w_ih)
            p.add(f"blstm_{direction}_w_hh", w_hh)
            p.add(f"blstm_{direction}_b", b)
        d = 2 * hidden
        fc = config.head_fc_width
        for m in METRICS:
            for part in ("q", "k", "v"):
                p.add(f"head_{m}_att_w{part}", nn.glorot_uniform(rng, d, d, (d, d)))
            p.add(f"head_{m}_fc_w", nn.glorot_uniform(rng, d, fc, (d, fc)))
            p.add(f"head_{m}_fc_b", np.zeros(fc))
            p.add(f"head_{m}_out_w", nn.glorot_uniform(rng, fc, 1, (fc, 1)))
            p.add(f"head_{m}_out_b", np.zeros(1))
        return cls(config, p)

    # forward -------------------------------------------------------------
    def _conv_stack(self, stream: str, x: np.ndarray | ad.Tensor) -> ad.Tensor:
        cfg = self.config
        h = ad.as_tensor(x)
        T = h.shape[0]
        h = h.reshape(1, T, h.shape[1])
        pad = cfg.conv_kernel // 2
        for i in range(len(cfg.conv_channels)):
            h = nn.conv2d(h, self.params[f"{stream}_conv{i}_w"], self.params[f"{stream}_conv{i}_b"],
                          stride=(1, cfg.conv_stride_freq), padding=pad)
            h = ad.gelu(h)
        c, _, w = h.shape
        return h.transpose(1, 0, 2).reshape(T, c * w)

    def _lfb_features(self, power: np.ndarray) -> ad.Tensor:
        cfg = self.config
        expected = cfg.lfb_n_fft // 2 + 1
        if power.shape[1] != expected:
            raise ShapeError(f"lfb power has {power.shape[1]} bins, model expects {expected}")
        kernels = nn.sinc_bank(self.params["lfb_low_hz"], self.params["lfb_band_hz"],
                               cfg.sample_rate, cfg.lfb_kernel_len)
        energies = nn.filterbank_energies(power, kernels, *self._basis)
        return ad.log1p(energies * (1.0 / POWER_FLOOR))

    def fuse(self, bundle: FeatureBundle) -> ad.Tensor:
        """Per-stream conv outputs, flattened per frame and concatenated: ``[F_u, D]``."""
        cfg = self.config
        T = bundle.num_frames
        parts = []
        for stream in cfg.features:
            if stream == "stft":
                if bundle.stft is None:
                    raise ShapeError("model expects STFT features but bundle has none")
                if bundle.stft.shape[1] != cfg.stft_bins:
                    raise ShapeError(f"stft features have {bundle.stft.shape[1]} bins, "
                                     f"model expects {cfg.stft_bins}")
                x = bundle.stft
            elif stream == "lfb":
                if bundle.lfb_power is None:
                    raise ShapeError("model expects filterbank power but bundle has none")
                x = self._lfb_features(bundle.lfb_power)
            else:
                if bundle.ssl is None:
                    raise ShapeError("model expects SSL embeddings but bundle has none")
                if bundle.ssl.shape[1] != cfg.emb_dim:
                    raise ShapeError(f"embedding dim {bundle.ssl.shape[1]} != model emb_dim {cfg.emb_dim}")
                x = bundle.ssl
            parts.append(self._conv_stack(stream, x))
        fused = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
        if fused.shape[0] != T:
            raise ShapeError("encoder lost frame alignment")
        return fused

    def recur(self, fused: ad.Tensor) -> ad.Tensor:
        p = self.params
        return nn.bilstm(fused,
                         (p["blstm_fw_w_ih"], p["blstm_fw_w_hh"], p["blstm_fw_b"]),
                         (p["blstm_bw_w_ih"], p["blstm_bw_w_hh"], p["blstm_bw_b"]))

    def encode(self, bundle: FeatureBundle) -> ad.Tensor:
        """Shared encoder output ``[F_u, 2*blstm_hidden]``."""
        return self.recur(self.fuse(bundle))

    def head(self, metric: str, enc: ad.Tensor) -> HeadOutput:
        p = self.params
        pre = f"head_{metric}_"
        h = nn.attention(enc, p[pre + "att_wq"], p[pre + "att_wk"], p[pre + "att_wv"])
        h = ad.gelu(nn.dense(h, p[pre + "fc_w"], p[pre + "fc_b"]))
        z = nn.dense(h, p[pre + "out_w"], p[pre + "out_b"]).reshape(enc.shape[0])
        lo, hi = self.config.ranges[metric]
        frames = ad.sigmoid(z) * (hi - lo) + lo
        return HeadOutput(frames, frames.mean())

    def forward(self, bundle: FeatureBundle, heads=METRICS) -> PredictionSet:
        enc = self.encode(bundle)
        return PredictionSet((m, self.head(m, enc)) for m in heads)

    __call__ = forward

    # inference -----------------------------------------------------------
    def features(self, w: Waveform, emb_path=None) -> FeatureBundle:
        f = self.config.features
        return extract_features(w, "stft" in f, "lfb" in f, "ssl" in f, emb_path,
                                self.config.emb_dim or None)

    def predict(self, w: Waveform, emb_path=None) -> dict[str, float]:
        """Primary scores only; the auxiliary heads are never evaluated here."""
        preds = self.forward(self.features(w, emb_path), heads=PRIMARY)
        return preds.utterance_scores()

    # persistence ---------------------------------------------------------
    def save(self, path, meta: dict | None = None) -> str:
        return ckpt.save(path, self.params.state_dict(), self.config.to_dict(), meta)

    @classmethod
    def load(cls, path) -> "MtqNet":
        header, state = ckpt.load(path)
        config = MtqNetConfig.from_dict(header["model_config"])
        model = cls.build(config, seed=0)
        model.params.load_state_dict(state)
        return model

    def load_weights(self, path) -> dict:
        """Copy weights from a checkpoint with an identical architecture."""
        header, state = ckpt.load(path)
        other = MtqNetConfig.from_dict(header["model_config"])
        if other.to_dict() != self.config.to_dict():
            raise ConfigurationError("checkpoint model_config does not match this model")
        self.params.load_state_dict(state)
        return header


def _clamp_hook(sample_rate: int):
    def hook(store: nn.ParamStore) -> None:
        low, band = clamp_sinc_bands(store["lfb_low_hz"].data, store["lfb_band_hz"].data, sample_rate)
        store["lfb_low_hz"].data = low
        store["lfb_band_hz"].data = band
    return hook
