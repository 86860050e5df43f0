import json
import struct

import numpy as np
import pytest
from gradcheck import full_model_check, tiny_fd_setup
from hypothesis import given, settings
from hypothesis import strategies as st

from mtqnet import autodiff as ad
from mtqnet import checkpoint as ckpt
from mtqnet.corpus import CorpusConfig, synth_clean
from mtqnet.dsp import Waveform, stft_power, write_embeddings
from mtqnet.errors import ConfigurationError, ShapeError
from mtqnet.features import FeatureBundle, extract_features
from mtqnet.losses import LossConfig, metric_loss
from mtqnet.model import DEFAULT_RANGES, METRICS, PRIMARY, MtqNet, MtqNetConfig

FS = 16000


@pytest.fixture(scope="module")
def tiny():
    return MtqNet.build(MtqNetConfig.tiny(), seed=0)


@pytest.fixture(scope="module")
def wave():
    return synth_clean(CorpusConfig(seed=2, duration_s=1.0), 0)


def random_bundle(cfg, frames, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return FeatureBundle(stft=scale * rng.uniform(0, 10, (frames, cfg.stft_bins)),
                         lfb_power=scale * rng.uniform(0, 1e-2, (frames, cfg.lfb_n_fft // 2 + 1)))


# ---------------------------------------------------------------- build

def test_build_is_seeded(tiny):
    again = MtqNet.build(MtqNetConfig.tiny(), seed=0)
    assert again.params.names() == tiny.params.names()
    for name in tiny.params:
        assert tiny.params[name].data.tobytes() == again.params[name].data.tobytes()
    other = MtqNet.build(MtqNetConfig.tiny(), seed=1)
    assert any(not np.array_equal(other.params[n].data, tiny.params[n].data) for n in tiny.params)


def test_ssl_gating(tiny):
    assert not any(n.startswith("ssl_") for n in tiny.params)
    with_ssl = MtqNet.build(MtqNetConfig.tiny(features=("stft", "lfb", "ssl"), emb_dim=8))
    assert any(n.startswith("ssl_") for n in with_ssl.params)


def test_default_parameter_count():
    channels = (16, 32, 64, 128)
    conv = 0
    c_in = 1
    for c in channels:
        conv += c * c_in * 9 + c
        c_in = c

    def out_width(w):
        for _ in channels:
            w = (w + 2 - 3) // 2 + 1
        return w
    d_in = 128 * (out_width(257) + out_width(64))
    lstm = 2 * ((d_in + 128) * 512 + 512)
    head = 3 * 256 * 256 + 256 * 64 + 64 + 64 + 1
    expected = 2 * conv + 2 * 64 + lstm + 6 * head
    assert expected == 4_357_766
    model = MtqNet.build(MtqNetConfig(), seed=0)
    assert model.params.num_scalars() == expected


@pytest.mark.parametrize("bad", [
    dict(features=()), dict(features=("mfcc",)), dict(conv_channels=(4, 0)), dict(blstm_hidden=0),
    dict(features=("ssl",), emb_dim=0), dict(lfb_kernel_len=250)])
def test_invalid_config(bad):
    with pytest.raises(ConfigurationError):
        MtqNet.build(MtqNetConfig.tiny(**bad))


def test_config_round_trip():
    cfg = MtqNetConfig.tiny(features=("stft", "ssl"), emb_dim=4)
    back = MtqNetConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg and back.digest() == cfg.digest()
    with pytest.raises(ConfigurationError):
        MtqNetConfig.from_dict({**cfg.to_dict(), "dropout": 0.1})


# ---------------------------------------------------------------- forward

def test_utterance_is_mean_of_frames(tiny):
    preds = tiny.forward(random_bundle(tiny.config, 7))
    assert set(preds) == set(METRICS)
    for h in preds.values():
        assert h.frames.shape == (7,)
        assert h.utterance.item() == h.frames.data.mean()


def test_zero_input_gives_range_midpoints():
    model = MtqNet.build(MtqNetConfig.tiny(), seed=4)
    for name, p in model.params.items():
        if name.endswith("_b"):
            p.data = np.zeros_like(p.data)
    cfg = model.config
    bundle = FeatureBundle(stft=np.zeros((5, cfg.stft_bins)), lfb_power=np.zeros((5, cfg.lfb_n_fft // 2 + 1)))
    for m, h in model.forward(bundle).items():
        lo, hi = DEFAULT_RANGES[m]
        assert np.all(h.frames.data == (lo + hi) / 2)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.floats(0.0, 1e3), st.integers(1, 6))
def test_heads_stay_in_range(seed, scale, frames):
    model = MtqNet.build(MtqNetConfig.tiny(), seed=seed % 3)
    preds = model.forward(random_bundle(model.config, frames, seed, scale))
    for m, h in preds.items():
        lo, hi = DEFAULT_RANGES[m]
        assert np.all(h.frames.data >= lo) and np.all(h.frames.data <= hi)
        assert np.all(np.isfinite(h.frames.data))


@pytest.mark.parametrize("features", [("stft",), ("lfb",), ("stft", "lfb"), ("stft", "lfb", "ssl"), ("ssl",)])
def test_frame_count_matches_stft(features, wave, tmp_path):
    emb = tmp_path / "e.mtqe"
    write_embeddings(emb, np.random.default_rng(0).standard_normal((20, 6)))
    cfg = MtqNetConfig.tiny(features=features, emb_dim=6 if "ssl" in features else 0)
    model = MtqNet.build(cfg)
    bundle = model.features(wave, emb if "ssl" in features else None)
    preds = model.forward(bundle)
    expected = stft_power(wave).num_frames
    assert {h.frames.shape[0] for h in preds.values()} == {expected}


def test_misaligned_streams_rejected(tiny):
    cfg = tiny.config
    bundle = FeatureBundle(stft=np.zeros((5, cfg.stft_bins)), lfb_power=np.zeros((6, cfg.lfb_n_fft // 2 + 1)))
    with pytest.raises(ShapeError):
        tiny.forward(bundle)


def test_wrong_bin_count_rejected(tiny):
    with pytest.raises(ShapeError):
        tiny.forward(FeatureBundle(stft=np.zeros((5, 100)), lfb_power=np.zeros((5, 513))))


def test_pseudo_loss_reaches_encoder_but_not_other_heads(tiny):
    tiny.params.zero_grad()
    bundle = random_bundle(tiny.config, 5, seed=3)
    with ad.Graph() as g:
        preds = tiny.forward(bundle)
        ad.backward(g, metric_loss(0.5, preds["stoi"], LossConfig(), "stoi"))
    grads = {n: np.abs(p.grad).sum() for n, p in tiny.params.items()}
    assert grads["blstm_fw_w_ih"] > 0 and grads["stft_conv0_w"] > 0 and grads["lfb_low_hz"] > 0
    assert grads["head_stoi_fc_w"] > 0
    for n, v in grads.items():
        if n.startswith("head_") and not n.startswith("head_stoi_"):
            assert v == 0.0, n
    tiny.params.zero_grad()


def test_sampled_full_model_gradients():
    model, bundle, labels = tiny_fd_setup(seed=2, frames=3)
    errors = full_model_check(model, bundle, labels, LossConfig(), per_tensor=6, seed=1)
    assert max(errors.values()) < 1e-4, errors


# ---------------------------------------------------------------- predict

def test_predict_matches_forward_primary(tiny, wave):
    scores = tiny.predict(wave)
    assert set(scores) == set(PRIMARY)
    full = tiny.forward(extract_features(wave)).utterance_scores()
    for m in PRIMARY:
        assert scores[m] == full[m]
        assert 1.0 <= scores[m] <= 5.0
    assert tiny.predict(wave) == scores


def test_predict_rejects_other_rates(tiny):
    with pytest.raises(ConfigurationError):
        tiny.predict(Waveform(np.zeros(8000), 8000))


def test_ssl_predict_needs_sidecar(wave, tmp_path):
    model = MtqNet.build(MtqNetConfig.tiny(features=("stft", "ssl"), emb_dim=3))
    with pytest.raises(ConfigurationError):
        model.predict(wave)
    write_embeddings(tmp_path / "bad.mtqe", np.zeros((10, 5)))
    with pytest.raises(ShapeError):
        model.predict(wave, tmp_path / "bad.mtqe")


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_bit_identical(tiny, wave, tmp_path):
    digest = tiny.save(tmp_path / "m.ckpt", {"note": "x"})
    assert digest == ckpt.file_hash(tmp_path / "m.ckpt")
    loaded = MtqNet.load(tmp_path / "m.ckpt")
    assert loaded.params.names() == tiny.params.names()
    bundle = extract_features(wave)
    a, b = tiny.forward(bundle), loaded.forward(bundle)
    for m in METRICS:
        assert a[m].frames.data.tobytes() == b[m].frames.data.tobytes()


def test_checkpoint_layout(tiny, tmp_path):
    tiny.save(tmp_path / "m.ckpt")
    blob = (tmp_path / "m.ckpt").read_bytes()
    assert blob[:4] == b"MTQC"
    (n,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8:8 + n])
    assert header["format_version"] == 1
    assert MtqNetConfig.from_dict(header["model_config"]) == tiny.config
    base = 8 + n
    for name, info in header["parameters"].items():
        p = tiny.params[name].data
        assert tuple(info["shape"]) == p.shape
        raw = np.frombuffer(blob, "<f8", count=p.size, offset=base + info["offset"])
        assert np.array_equal(raw.reshape(p.shape), p)


def test_load_weights_rejects_other_architecture(tiny, tmp_path):
    tiny.save(tmp_path / "m.ckpt")
    other = MtqNet.build(MtqNetConfig.tiny(blstm_hidden=8))
    with pytest.raises(ConfigurationError):
        other.load_weights(tmp_path / "m.ckpt")


def test_corrupt_checkpoint(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(Exception):
        MtqNet.load(tmp_path / "bad.ckpt")


def test_sinc_cutoffs_clamped_after_update(tiny):
    model = MtqNet.build(MtqNetConfig.tiny())
    p = model.params["lfb_low_hz"]
    p.grad = np.full(p.shape, 1e6)
    from mtqnet import nn
    for _ in range(5):
        nn.adam_step(model.params, lr=5e3)
    low, band = model.params["lfb_low_hz"].data, model.params["lfb_band_hz"].data
    assert low.min() >= 30.0 and np.all(low + band <= FS / 2 - 50.0)
