"""Utterance + frame regression losses and the multi-task objective.

For one metric and one utterance with target ``S``, utterance prediction
``S_hat`` and frame predictions ``s_1..s_F``::

    L = rho(S - S_hat) + (alpha / F) * sum_f rho(S - s_f)

where ``rho`` is the Huber penalty (or its pure-quadratic / absolute
variants). Per-metric losses are averaged over the utterances that carry
that label, the three primary terms form the supervised part, the three
auxiliary terms the pseudo-label part, and the objective is their sum.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .model import METRICS, PRIMARY, PSEUDO, HeadOutput, PredictionSet

log = logging.getLogger(__name__)

LOSS_KINDS = ("huber", "mse", "mae")


def huber(error, delta: float):
    """Huber penalty: 0.5*e**2 inside ``delta``, linear with matched slope outside."""
    e = np.abs(np.asarray(error, dtype=np.float64))
    out = np.where(e <= delta, 0.5 * e * e, delta * (e - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


@dataclass
class LossConfig:
    delta: float = 1.0
    frame_weight: dict = field(default_factory=lambda: {m: 1.0 for m in METRICS})
    loss_kind: str = "huber"
    semi_enabled: bool = True
    superv_enabled: bool = True

    def __post_init__(self):
        if isinstance(self.frame_weight, (int, float)):
            self.frame_weight = {m: float(self.frame_weight) for m in METRICS}
        else:
            self.frame_weight = {m: float(self.frame_weight.get(m, 1.0)) for m in METRICS}
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if min(self.frame_weight.values()) < 0:
            raise ValueError("frame weights must be non-negative")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")

    def enabled_metrics(self) -> tuple:
        return (PRIMARY if self.superv_enabled else ()) + (PSEUDO if self.semi_enabled else ())


@dataclass
class LabelSet:
    primary: dict | None = None  # smos, nmos, gmos
    pseudo: dict | None = None   # pq, stoi, sdi

    def get(self, metric: str):
        block = self.primary if metric in PRIMARY else self.pseudo
        if block is None:
            return None
        return block.get(metric)


@dataclass
class TrainingBatch:
    """Utterances as (FeatureBundle or None, LabelSet) pairs."""

    utterances: list

    @property
    def num_utterances(self) -> int:
        return len(self.utterances)


@dataclass
class LossBreakdown:
    terms: dict          # metric -> scalar Tensor
    superv: ad.Tensor
    semi: ad.Tensor
    objective: ad.Tensor
    counts: dict         # metric -> number of labelled utterances
    unlabeled: tuple = ()

    def values(self) -> dict[str, float]:
        out = {f"L_{m}": self.terms[m].item() for m in METRICS}
        out.update(L_superv=self.superv.item(), L_semi=self.semi.item(), O=self.objective.item())
        return out


def _penalty(err, cfg: LossConfig):
    if cfg.loss_kind == "huber":
        return ad.huber(err, cfg.delta)
    if cfg.loss_kind == "mse":
        return ad.square(err) * 0.5
    return ad.abs_(err)


def metric_loss(target: float, pred: HeadOutput, cfg: LossConfig, metric: str) -> ad.Tensor:
    """Utterance-level plus weighted frame-level loss for one utterance and metric."""
    frames = ad.as_tensor(pred.frames)
    n = frames.shape[0]
    if n < 1:
        raise ValueError("frame scores must be non-empty")
    utt = _penalty(ad.sub(float(target), pred.utterance), cfg)
    alpha = cfg.frame_weight[metric]
    if alpha == 0.0:
        return utt
    fr = _penalty(ad.sub(float(target), frames), cfg).sum() * (alpha / n)
    return utt + fr


def total_objective(batch: TrainingBatch | Sequence, preds: Sequence[PredictionSet],
                    cfg: LossConfig) -> LossBreakdown:
    """Per-metric means over labelled utterances, composed into the full objective."""
    utterances = batch.utterances if isinstance(batch, TrainingBatch) else list(batch)
    labels = [u[1] if isinstance(u, tuple) else u for u in utterances]
    if len(labels) != len(preds):
        raise ValueError(f"{len(labels)} label sets but {len(preds)} prediction sets")
    enabled = cfg.enabled_metrics()
    zero = ad.Tensor(0.0)
    terms, counts, unlabeled = {}, {}, []
    for m in METRICS:
        acc, k = None, 0
        if m in enabled:
            for lab, pred in zip(labels, preds):
                target = lab.get(m)
                if target is None:
                    continue
                term = metric_loss(target, pred[m], cfg, m)
                acc = term if acc is None else acc + term
                k += 1
            if k == 0:
                unlabeled.append(m)
                log.warning("metric %s enabled but unlabelled in this batch; term set to 0", m)
        counts[m] = k
        terms[m] = zero if acc is None else acc * (1.0 / k)
    superv = terms["smos"] + terms["nmos"] + terms["gmos"]
    semi = terms["pq"] + terms["stoi"] + terms["sdi"]
    return LossBreakdown(terms, superv, semi, superv + semi, counts, tuple(unlabeled))
