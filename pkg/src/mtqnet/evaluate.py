"""Held-out evaluation: per-metric LCC / SRCC / MSE reports."""
from __future__ import annotations

import datetime as _dt
import json
import logging
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .dsp import read_wav, sidecar_path
from .errors import DegenerateDistributionError, MtqError
from .manifest import read_manifest, resolve
from .model import PRIMARY, MtqNet
from .stats import lcc, mse, srcc

log = logging.getLogger(__name__)

MAX_EXCLUDED_FRACTION = 0.05
STATS = ("lcc", "srcc", "mse")


class EvaluationError(MtqError):
    pass


def predict_manifest(model, manifest_path):
    """Run primary-score prediction for every entry.

    Returns ``(ids, predictions, truths, errors)``; entries whose audio cannot
    be read are skipped and reported in ``errors``.
    """
    uses_ssl = "ssl" in getattr(getattr(model, "config", None), "features", ())
    ids, preds, truths, errors = [], [], [], {}
    for e in read_manifest(manifest_path):
        if e.labels is None:
            raise EvaluationError(f"entry {e.id!r} has no ground-truth labels")
        wav = resolve(manifest_path, e.degraded_path)
        try:
            w = read_wav(wav)
            scores = model.predict(w, sidecar_path(wav) if uses_ssl else None)
        except (OSError, EOFError, MtqError, ValueError) as exc:
            errors[e.id] = f"{type(exc).__name__}: {exc}"
            log.error("skipping %s: %s", e.id, exc)
            continue
        ids.append(e.id)
        preds.append([scores[m] for m in PRIMARY])
        truths.append([e.labels[m] for m in PRIMARY])
    return ids, np.array(preds).reshape(-1, 3), np.array(truths).reshape(-1, 3), errors


def score_block(pred, truth) -> dict:
    out = {}
    for name, fn in (("lcc", lcc), ("srcc", srcc)):
        try:
            out[name] = fn(pred, truth)
        except DegenerateDistributionError as exc:
            out[name] = None
            out[f"{name}_error"] = str(exc)
    out["mse"] = mse(pred, truth)
    return out


def evaluate(model, manifest_path, dataset: str | None = None, checkpoint_path=None,
             timestamp: bool = True) -> dict:
    """Evaluate a model (or checkpoint path) on a labelled manifest."""
    if isinstance(model, (str, Path)):
        checkpoint_path = model
        model = MtqNet.load(model)
    ids, pred, truth, errors = predict_manifest(model, manifest_path)
    total = len(ids) + len(errors)
    if total == 0:
        raise EvaluationError("manifest is empty")
    if len(errors) > MAX_EXCLUDED_FRACTION * total:
        raise EvaluationError(f"{len(errors)} of {total} entries could not be evaluated (> 5%)")
    if len(ids) < 2:
        raise EvaluationError("need at least two evaluable entries")
    config = getattr(model, "config", None)
    report = {
        "dataset": dataset or Path(manifest_path).name,
        "n": len(ids),
        "excluded": len(errors),
        "excluded_ids": sorted(errors),
        "per_metric": {m: score_block(pred[:, i], truth[:, i]) for i, m in enumerate(PRIMARY)},
        "checkpoint": ckpt.file_hash(checkpoint_path) if checkpoint_path else "in-memory",
        "config_hash": config.digest() if config is not None else None,
    }
    if timestamp:
        report["timestamp"] = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    return report


def _fmt(v):
    return "   n/a" if v is None else f"{v:6.3f}"


def format_table(report: dict, title: str | None = None) -> str:
    lines = [title or f"{report['dataset']} (n={report['n']})",
             f"{'metric':<8}{'LCC':>8}{'SRCC':>8}{'MSE':>8}"]
    for m in PRIMARY:
        b = report["per_metric"][m]
        lines.append(f"{m:<8}{_fmt(b['lcc']):>8}{_fmt(b['srcc']):>8}{_fmt(b['mse']):>8}")
    return "\n".join(lines) + "\n"


def csv_header(prefix=()) -> str:
    cols = list(prefix) + [f"{m}_{s}" for m in PRIMARY for s in STATS]
    return ",".join(cols)


def csv_row(report: dict, prefix=()) -> str:
    vals = [str(p) for p in prefix]
    for m in PRIMARY:
        for s in STATS:
            v = report["per_metric"][m][s]
            vals.append("" if v is None else repr(float(v)))
    return ",".join(vals)


def write_report(report: dict, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out_dir / "report.txt").write_text(format_table(report), encoding="utf-8")
    return path
