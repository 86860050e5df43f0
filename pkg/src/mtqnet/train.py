"""Training loops: from-scratch, knowledge transfer, multi-task pseudo-label, teacher.

Modes differ only in the objective terms that are active and the starting
weights:

=========  ======================  ===========================
mode       objective               initial weights
=========  ======================  ===========================
scratch    primary terms           random (seeded)
kt         primary terms           teacher checkpoint (required)
mpl        primary + pseudo terms  teacher checkpoint if given
teacher    pseudo terms            random (seeded)
=========  ======================  ===========================
"""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import nn
from .errors import ConfigurationError
from .features import FeatureBundle, features_for_file
from .losses import LabelSet, LossConfig, total_objective
from .manifest import read_manifest, resolve
from .model import METRICS, PRIMARY, PSEUDO, MtqNet, MtqNetConfig

log = logging.getLogger(__name__)

MODES = ("scratch", "kt", "mpl", "teacher")


@dataclass
class TrainConfig:
    mode: str = "mpl"
    lr: float = 1e-4
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    init_checkpoint: str | None = None
    valid_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.max_epochs < 1 or self.patience < 0:
            raise ConfigurationError("max_epochs must be >= 1 and patience >= 0")
        if not 0.0 <= self.valid_fraction < 1.0:
            raise ConfigurationError("valid_fraction must be in [0, 1)")


@dataclass
class Example:
    id: str
    bundle: FeatureBundle
    labels: LabelSet


@dataclass
class TrainResult:
    model: MtqNet
    history: list = field(default_factory=list)
    best_epoch: int = 0
    checkpoint: Path | None = None
    checkpoint_hash: str | None = None
    init_hash: str | None = None
    warnings: int = 0


def load_examples(manifest_path, config: MtqNetConfig) -> list[Example]:
    """Extract features for every manifest entry (degraded audio only)."""
    f = config.features
    out = []
    for e in read_manifest(manifest_path):
        bundle = features_for_file(resolve(manifest_path, e.degraded_path), "stft" in f, "lfb" in f,
                                   "ssl" in f, config.emb_dim or None)
        out.append(Example(e.id, bundle, LabelSet(e.labels, e.pseudo)))
    return out


def split_indices(n: int, seed: int, valid_fraction: float = 0.1):
    """Seeded shuffle split; returns (train, valid) index arrays in shuffled order."""
    perm = np.random.default_rng([seed, 0]).permutation(n)
    n_valid = int(round(n * valid_fraction)) if n >= 2 else 0
    if valid_fraction > 0 and n >= 2:
        n_valid = min(max(n_valid, 1), n - 1)
    return perm[n_valid:], perm[:n_valid]


def loss_config_for_mode(cfg: LossConfig, mode: str) -> LossConfig:
    semi = mode in ("mpl", "teacher")
    superv = mode != "teacher"
    return dataclasses.replace(cfg, semi_enabled=semi, superv_enabled=superv)


def check_mode(mode: str, examples, tc: TrainConfig) -> None:
    if mode == "kt" and not tc.init_checkpoint:
        raise ConfigurationError("mode 'kt' requires an initial (teacher) checkpoint")
    need_primary = mode in ("scratch", "kt", "mpl")
    need_pseudo = mode in ("mpl", "teacher")
    for ex in examples:
        if need_primary and (ex.labels.primary is None or any(ex.labels.get(m) is None for m in PRIMARY)):
            raise ConfigurationError(f"mode {mode!r} needs primary labels; entry {ex.id!r} has none")
        if need_pseudo and (ex.labels.pseudo is None or any(ex.labels.get(m) is None for m in PSEUDO)):
            raise ConfigurationError(f"mode {mode!r} needs pseudo labels; entry {ex.id!r} has none "
                                     "(run the labels step first)")


def _mean_breakdown(examples, preds, cfg: LossConfig) -> dict:
    if not examples:
        return {}
    return total_objective([ex.labels for ex in examples], preds, cfg).values()


class _EpochAccumulator:
    def __init__(self):
        self.sums = {m: 0.0 for m in METRICS}
        self.counts = {m: 0 for m in METRICS}

    def add(self, bd):
        for m in METRICS:
            if bd.counts[m]:
                self.sums[m] += bd.terms[m].item()
                self.counts[m] += bd.counts[m]

    def values(self) -> dict:
        terms = {m: (self.sums[m] / self.counts[m] if self.counts[m] else 0.0) for m in METRICS}
        out = {f"L_{m}": terms[m] for m in METRICS}
        superv = terms["smos"] + terms["nmos"] + terms["gmos"]
        semi = terms["pq"] + terms["stoi"] + terms["sdi"]
        out.update(L_superv=superv, L_semi=semi, O=superv + semi)
        return out


def evaluate_objective(model: MtqNet, examples, cfg: LossConfig) -> dict:
    """Loss breakdown of the current weights on a fixed set (no gradient)."""
    heads = cfg.enabled_metrics()
    preds = [model.forward(ex.bundle, heads=heads) for ex in examples]
    return _mean_breakdown(examples, preds, cfg)


def train(model: MtqNet, data, loss_cfg: LossConfig, tc: TrainConfig, out_dir=None) -> TrainResult:
    """Per-utterance Adam training with early stopping on the validation loss.

    ``data`` is a manifest path or a list of :class:`Example`. The returned
    model holds the weights of the best validation epoch. When ``out_dir``
    is given, ``model.ckpt`` and ``history.jsonl`` are written there.
    """
    examples = load_examples(data, model.config) if isinstance(data, (str, Path)) else list(data)
    if not examples:
        raise ConfigurationError("no training examples")
    check_mode(tc.mode, examples, tc)
    cfg = loss_config_for_mode(loss_cfg, tc.mode)
    heads = cfg.enabled_metrics()
    select_key = "L_semi" if tc.mode == "teacher" else "L_superv"

    result = TrainResult(model)
    if tc.init_checkpoint:
        model.load_weights(tc.init_checkpoint)
        result.init_hash = ckpt.file_hash(tc.init_checkpoint)
        log.info("initialised from %s (sha256 %s)", tc.init_checkpoint, result.init_hash[:12])

    train_idx, valid_idx = split_indices(len(examples), tc.seed, tc.valid_fraction)
    train_set = [examples[i] for i in train_idx]
    valid_set = [examples[i] for i in valid_idx]
    order_rng = np.random.default_rng([tc.seed, 1])
    params = model.params

    best = np.inf
    best_state = params.state_dict()
    stale = 0
    for epoch in range(1, tc.max_epochs + 1):
        acc = _EpochAccumulator()
        for i in order_rng.permutation(len(train_set)):
            ex = train_set[i]
            params.zero_grad()
            with ad.Graph() as g:
                preds = model.forward(ex.bundle, heads=heads)
                bd = total_objective([ex.labels], [preds], cfg)
                ad.backward(g, bd.objective)
            result.warnings += len(bd.unlabeled)
            nn.adam_step(params, tc.lr, tc.beta1, tc.beta2, tc.eps)
            acc.add(bd)
        train_vals = acc.values()
        valid_vals = evaluate_objective(model, valid_set, cfg) if valid_set else {}
        score = (valid_vals or train_vals)[select_key]
        improved = score < best
        if improved:
            best, best_state, stale, result.best_epoch = score, params.state_dict(), 0, epoch
        else:
            stale += 1
        result.history.append({"epoch": epoch, "train": train_vals, "valid": valid_vals,
                               "best_so_far": improved})
        log.info("epoch %d train %s=%.4f valid %s=%.4f%s", epoch, select_key, train_vals[select_key],
                 select_key, score, " *" if improved else "")
        if stale > 0 and stale >= tc.patience:
            break

    params.load_state_dict(best_state)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        meta = {"mode": tc.mode, "best_epoch": result.best_epoch, "init_sha256": result.init_hash,
                "loss": dataclasses.asdict(cfg), "train": dataclasses.asdict(tc)}
        result.checkpoint = out_dir / "model.ckpt"
        result.checkpoint_hash = model.save(result.checkpoint, meta)
        write_history(out_dir / "history.jsonl", result.history)
    return result


def pretrain_teacher(model: MtqNet, data, loss_cfg: LossConfig, tc: TrainConfig, out_dir=None) -> TrainResult:
    """Train on the pseudo-label targets only; the result can initialise kt/mpl runs."""
    return train(model, data, loss_cfg, dataclasses.replace(tc, mode="teacher", init_checkpoint=None),
                 out_dir)


def write_history(path, history) -> None:
    Path(path).write_text("".join(json.dumps(r) + "\n" for r in history), encoding="utf-8")


def read_history(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
