import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtqnet import autodiff as ad
from mtqnet.features import FeatureBundle
from mtqnet.losses import (LabelSet, LossConfig, TrainingBatch, huber, metric_loss,
                           total_objective)
from mtqnet.model import METRICS, PRIMARY, PSEUDO, HeadOutput, MtqNet, MtqNetConfig


def head(frames):
    t = ad.Tensor(np.asarray(frames, dtype=float))
    return HeadOutput(t, t.mean())


def preds_from(values: dict):
    return {m: head(v) for m, v in values.items()}


def huber_oracle(e, d):
    return 0.5 * e * e if abs(e) <= d else d * (abs(e) - 0.5 * d)


# ---------------------------------------------------------------- Huber

def test_huber_values():
    assert huber(0.5, 1.0) == 0.125
    assert huber(2.0, 1.0) == 1.5
    assert huber(-2.0, 1.0) == 1.5
    for d in (0.1, 1.0, 7.0):
        assert huber(0.0, d) == 0.0


@given(st.floats(-50, 50), st.floats(0.01, 20))
def test_huber_quadratic_inside_linear_outside(e, d):
    assert huber(e, d) == pytest.approx(huber_oracle(e, d), rel=1e-12, abs=1e-15)
    if abs(e) <= d:
        assert huber(e, d) == 0.5 * e * e


@pytest.mark.parametrize("d", [0.5, 0.75, 1.0, 1.25])
def test_huber_value_and_slope_continuous_at_delta(d):
    eps = 1e-9
    assert abs(huber(d + eps, d) - huber(d - eps, d)) < 1e-6
    h = 1e-7
    # one-sided differences that stay on their own side of the kink
    left = (huber(d - eps, d) - huber(d - eps - h, d)) / h
    right = (huber(d + eps + h, d) - huber(d + eps, d)) / h
    assert abs(right - left) < 1e-6
    t = ad.Tensor(np.array([d - eps, d + eps]), requires_grad=True)
    with ad.Graph() as g:
        ad.backward(g, ad.huber(t, d).sum())
    assert abs(t.grad[1] - t.grad[0]) < 1e-6


def test_tensor_huber_matches_numpy():
    e = np.linspace(-3, 3, 61)
    assert np.allclose(ad.huber(ad.Tensor(e), 1.25).data, huber(e, 1.25), atol=0)


# ---------------------------------------------------------------- per-metric loss

def test_perfect_prediction_is_zero():
    assert metric_loss(3.0, head([3.0, 3.0, 3.0]), LossConfig(), "smos").item() == 0.0


def test_hand_evaluated_two_level_loss():
    assert metric_loss(3.0, head([3.5, 3.5]), LossConfig(delta=1.0), "smos").item() == pytest.approx(0.25)


def test_alpha_zero_is_utterance_only():
    cfg = LossConfig(frame_weight=0.0)
    assert metric_loss(3.0, head([2.0, 5.0]), cfg, "nmos").item() == pytest.approx(huber(3.0 - 3.5, 1.0))


def test_frame_weight_per_metric():
    cfg = LossConfig(frame_weight={"smos": 2.0})
    frames = [1.0, 4.0, 2.0]
    utt = huber(3.0 - np.mean(frames), 1.0)
    fr = np.mean([huber(3.0 - f, 1.0) for f in frames])
    assert metric_loss(3.0, head(frames), cfg, "smos").item() == pytest.approx(utt + 2.0 * fr)
    assert metric_loss(3.0, head(frames), cfg, "nmos").item() == pytest.approx(utt + fr)


@settings(max_examples=50)
@given(st.lists(st.floats(-2, 6), min_size=1, max_size=8), st.floats(-2, 6))
def test_mse_kind_equals_huber_with_huge_delta(frames, target):
    mse = metric_loss(target, head(frames), LossConfig(loss_kind="mse"), "gmos").item()
    hub = metric_loss(target, head(frames), LossConfig(delta=1e9), "gmos").item()
    assert mse == pytest.approx(hub, abs=1e-9)


@settings(max_examples=50)
@given(st.lists(st.floats(-2, 6), min_size=1, max_size=8), st.floats(-2, 6))
def test_mae_kind_is_absolute_deviation(frames, target):
    got = metric_loss(target, head(frames), LossConfig(loss_kind="mae"), "pq").item()
    expect = abs(target - np.mean(frames)) + np.mean(np.abs(target - np.asarray(frames)))
    assert got == pytest.approx(expect, abs=1e-12)


@pytest.mark.parametrize("bad", [dict(delta=0.0), dict(delta=-1.0), dict(loss_kind="l1"),
                                 dict(frame_weight=-1.0)])
def test_invalid_loss_config(bad):
    with pytest.raises(ValueError):
        LossConfig(**bad)


# ---------------------------------------------------------------- objective composition

FULL = LabelSet({"smos": 3.0, "nmos": 2.0, "gmos": 4.0}, {"pq": 2.5, "stoi": 0.8, "sdi": 0.3})


def test_perfect_predictions_give_zero_objective():
    preds = preds_from({m: [FULL.get(m)] * 4 for m in METRICS})
    assert total_objective([FULL], [preds], LossConfig()).objective.item() == 0.0


def test_missing_pseudo_block():
    lab = LabelSet({"smos": 3.0, "nmos": 2.0, "gmos": 4.0}, None)
    preds = preds_from({m: [1.5, 2.5] for m in METRICS})
    bd = total_objective([lab], [preds], LossConfig(semi_enabled=True))
    assert bd.semi.item() == 0.0
    assert bd.objective.item() == bd.superv.item()
    assert set(bd.unlabeled) == set(PSEUDO)


def test_two_utterance_hand_composition():
    a = FULL
    b = LabelSet({"smos": 1.0, "nmos": 5.0, "gmos": 2.0}, {"pq": 4.0, "stoi": 0.2, "sdi": 1.5})
    pa = {m: [1.0, 3.0] for m in METRICS}
    pb = {m: [2.0, 2.0, 5.0] for m in METRICS}
    bd = total_objective(TrainingBatch([(None, a), (None, b)]), [preds_from(pa), preds_from(pb)], LossConfig())

    def one(target, frames):
        return huber_oracle(target - np.mean(frames), 1.0) + np.mean([huber_oracle(target - f, 1.0) for f in frames])
    expect = sum((one(a.get(m), pa[m]) + one(b.get(m), pb[m])) / 2 for m in METRICS)
    assert bd.objective.item() == pytest.approx(expect, rel=1e-12)


def test_partial_labels_average_over_labelled_only():
    a = LabelSet({"smos": 3.0, "nmos": 2.0, "gmos": 4.0}, None)
    b = FULL
    preds = [preds_from({m: [2.0] for m in METRICS}) for _ in range(2)]
    bd = total_objective([a, b], preds, LossConfig())
    assert bd.counts == {"smos": 2, "nmos": 2, "gmos": 2, "pq": 1, "stoi": 1, "sdi": 1}
    assert bd.terms["pq"].item() == pytest.approx(2 * huber_oracle(0.5, 1.0))


def test_semi_disabled_zeroes_pseudo_terms():
    preds = preds_from({m: [1.0, 2.0] for m in METRICS})
    bd = total_objective([FULL], [preds], LossConfig(semi_enabled=False))
    assert bd.semi.item() == 0.0 and bd.unlabeled == ()
    assert bd.objective.item() == bd.superv.item() > 0


def test_length_mismatch():
    with pytest.raises(ValueError):
        total_objective([FULL, FULL], [preds_from({m: [1.0] for m in METRICS})], LossConfig())


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_aggregate_identities_on_random_batches(seed):
    rng = np.random.default_rng(seed)
    labels, preds = [], []
    for _ in range(rng.integers(1, 5)):
        prim = {m: rng.uniform(1, 5) for m in PRIMARY} if rng.random() < 0.8 else None
        pseu = {m: rng.uniform(0, 2) for m in PSEUDO} if rng.random() < 0.8 else None
        labels.append(LabelSet(prim, pseu))
        preds.append(preds_from({m: rng.uniform(0, 5, rng.integers(1, 6)) for m in METRICS}))
    cfg = LossConfig(delta=rng.uniform(0.2, 2), frame_weight=rng.uniform(0, 2))
    v = total_objective(labels, preds, cfg).values()
    assert abs(v["O"] - (v["L_superv"] + v["L_semi"])) <= 1e-12
    assert abs(v["L_superv"] - (v["L_smos"] + v["L_nmos"] + v["L_gmos"])) <= 1e-12
    assert abs(v["L_semi"] - (v["L_pq"] + v["L_stoi"] + v["L_sdi"])) <= 1e-12


def test_semi_terms_change_encoder_gradients():
    model = MtqNet.build(MtqNetConfig.tiny(), seed=0)
    cfg = model.config
    rng = np.random.default_rng(0)
    bundle = FeatureBundle(stft=rng.uniform(0, 5, (6, cfg.stft_bins)),
                           lfb_power=rng.uniform(0, 1e-2, (6, cfg.lfb_n_fft // 2 + 1)))

    def encoder_grads(semi):
        model.params.zero_grad()
        with ad.Graph() as g:
            bd = total_objective([FULL], [model.forward(bundle)], LossConfig(semi_enabled=semi))
            ad.backward(g, bd.objective)
        return {n: p.grad.copy() for n, p in model.params.items() if not n.startswith("head_")}

    on, off = encoder_grads(True), encoder_grads(False)
    assert all(not np.allclose(on[n], off[n]) for n in on)
