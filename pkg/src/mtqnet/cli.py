"""Command-line entry point: ``mtqnet <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import checkpoint as ckpt
from .corpus import ENHANCERS, NOISE_TYPES, CorpusConfig, build_corpus
from .dsp import read_wav, sidecar_path
from .errors import MtqError
from .evaluate import csv_header, csv_row, evaluate, format_table, write_report
from .losses import LOSS_KINDS, LossConfig
from .model import PRIMARY, MtqNet, MtqNetConfig
from .oracle import compute_pseudo_labels
from .train import MODES, TrainConfig, train

log = logging.getLogger("mtqnet")

OUTPUT_ROOT_ENV = "MTQNET_OUTPUT_ROOT"
DELTA_GRID = (0.5, 0.75, 1.0, 1.25)
PRESETS = {
    "default": {},
    "desk": {"conv_channels": (8, 16), "blstm_hidden": 32, "head_fc_width": 32},
    "tiny": {"conv_channels": (4, 8), "blstm_hidden": 16, "head_fc_width": 16},
}


# Required flags; checked after config-file merging so a config file may supply them.
REQUIRED = {
    "corpus": (),
    "labels": ("manifest", "out"),
    "train": ("manifest",),
    "eval": ("checkpoint", "manifest"),
    "predict": ("checkpoint", "wav"),
    "sweep-delta": ("train_manifest", "test_manifest"),
    "compare-modes": ("train_manifest", "test_manifest"),
}


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _names(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

def _add_model_args(p):
    g = p.add_argument_group("model")
    g.add_argument("--preset", choices=sorted(PRESETS), default="default",
                   help="model size preset (individual flags override it)")
    g.add_argument("--conv-channels", type=_ints, default=None)
    g.add_argument("--blstm-hidden", type=int, default=None)
    g.add_argument("--head-fc-width", type=int, default=None)
    g.add_argument("--features", type=_names, default=None, help="comma list of stft,lfb,ssl")
    g.add_argument("--emb-dim", type=int, default=None)


def _add_train_args(p, with_mode=True):
    g = p.add_argument_group("training")
    if with_mode:
        g.add_argument("--mode", choices=MODES, default="mpl")
        g.add_argument("--init", default=None, help="initial checkpoint (teacher)")
    g.add_argument("--loss", choices=LOSS_KINDS, default="huber")
    g.add_argument("--delta", type=float, default=1.0)
    g.add_argument("--alpha", type=float, default=1.0, help="frame-level loss weight")
    g.add_argument("--lr", type=float, default=1e-4)
    g.add_argument("--max-epochs", type=int, default=50)
    g.add_argument("--patience", type=int, default=5)
    g.add_argument("--workers", type=int, default=1)
    _add_model_args(p)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="JSON/YAML file with default flag values")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="mtqnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corpus", parents=[common], help="synthesise a paired corpus")
    p.add_argument("--out", default=None)
    p.add_argument("--n-train", type=int, default=300)
    p.add_argument("--n-test", type=int, default=100)
    p.add_argument("--duration", type=float, default=2.0)
    p.add_argument("--noise-types", type=_names, default=list(NOISE_TYPES))
    p.add_argument("--snr-grid", type=_floats, default=[-5.0, 0.0, 5.0, 10.0, 15.0])
    p.add_argument("--enhancers", type=_names, default=list(ENHANCERS))
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_corpus)

    p = sub.add_parser("labels", parents=[common], help="compute pseudo labels with the oracle")
    p.add_argument("--manifest", default=None)
    p.add_argument("--out", default=None, help="output manifest path")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_labels)

    p = sub.add_parser("train", parents=[common], help="train a model (scratch/kt/mpl/teacher)")
    p.add_argument("--manifest", default=None)
    p.add_argument("--out", default=None)
    _add_train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="LCC/SRCC/MSE on a labelled manifest")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="score one WAV file")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--wav", default=None)
    p.add_argument("--emb", default=None, help="embedding sidecar (if the model uses ssl)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("sweep-delta", parents=[common], help="MPL runs over a grid of Huber deltas")
    p.add_argument("--train-manifest", default=None)
    p.add_argument("--test-manifest", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--deltas", type=_floats, default=list(DELTA_GRID))
    p.add_argument("--init", default=None, help="teacher checkpoint (pretrained here if omitted)")
    _add_train_args(p, with_mode=False)
    p.set_defaults(func=cmd_sweep_delta)

    p = sub.add_parser("compare-modes", parents=[common], help="scratch vs KT vs MPL comparison")
    p.add_argument("--train-manifest", default=None)
    p.add_argument("--test-manifest", default=None)
    p.add_argument("--out", default=None)
    _add_train_args(p, with_mode=False)
    p.set_defaults(func=cmd_compare_modes)
    return parser


def _load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    if path.suffix in (".yaml", ".yml"):
        import yaml

        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise UsageError("config file must hold a mapping of flag names to values")
    return {k.replace("-", "_"): v for k, v in data.items()}


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            values = _load_config_file(args.config)
        except (UsageError, ValueError) as exc:
            parser.error(str(exc))
        # Re-parse with config values as defaults so explicit flags still win.
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(values) - known
        if unknown:
            parser.error(f"unknown keys in config file: {sorted(unknown)}")
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    missing = [f"--{name.replace('_', '-')}" for name in REQUIRED[args.command] if not getattr(args, name)]
    if missing:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.error(f"the following arguments are required: {', '.join(missing)}")
    return args


def _resolve_out(args, name: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if not root:
        raise UsageError(f"--out not given and ${OUTPUT_ROOT_ENV} is unset")
    return Path(root) / name


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, tuple):
        return list(v)
    return v


def echo_config(args, out_dir: Path, name: str = "run-config.json") -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k != "func"}
    (out_dir / name).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def model_config_from_args(args) -> MtqNetConfig:
    kw = dict(PRESETS[args.preset])
    for name in ("conv_channels", "blstm_hidden", "head_fc_width", "features", "emb_dim"):
        v = getattr(args, name, None)
        if v is not None:
            kw[name] = v
    cfg = MtqNetConfig(**kw)
    try:
        cfg.validate()
    except MtqError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def loss_config_from_args(args, delta=None) -> LossConfig:
    try:
        return LossConfig(delta=args.delta if delta is None else delta, frame_weight=args.alpha,
                          loss_kind=args.loss)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def train_config_from_args(args, mode: str, init) -> TrainConfig:
    return TrainConfig(mode=mode, lr=args.lr, max_epochs=args.max_epochs, patience=args.patience,
                       seed=args.seed, init_checkpoint=str(init) if init else None)


# ---------------------------------------------------------------------------
# shared run helpers (used by the single-run commands and the drivers alike)
# ---------------------------------------------------------------------------

def run_training(manifest, out_dir, model_cfg: MtqNetConfig, loss_cfg: LossConfig, tc: TrainConfig,
                 examples=None):
    model = MtqNet.build(model_cfg, tc.seed)
    data = examples if examples is not None else manifest
    return train(model, data, loss_cfg, tc, out_dir)


def run_eval(checkpoint, manifest, out_dir=None) -> dict:
    report = evaluate(checkpoint, manifest, timestamp=True)
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def _train_and_eval(job):
    manifest, test_manifest, out_dir, model_cfg, loss_cfg, tc = job
    result = run_training(manifest, out_dir, model_cfg, loss_cfg, tc)
    return result.init_hash, run_eval(result.checkpoint, test_manifest, out_dir)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_corpus(args) -> int:
    cfg = CorpusConfig(n_train=args.n_train, n_test=args.n_test, duration_s=args.duration,
                       noise_types=args.noise_types, snr_db_grid=args.snr_grid,
                       enhancers=args.enhancers, seed=args.seed)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _resolve_out(args, "corpus")
    echo_config(args, out)
    manifests = build_corpus(cfg, out, workers=args.workers)
    for split, path in manifests.items():
        print(f"{split}: {path}")
    return 0


def cmd_labels(args) -> int:
    out = Path(args.out)
    echo_config(args, out.parent, out.stem + ".run-config.json")
    entries, errors = compute_pseudo_labels(args.manifest, out, workers=args.workers)
    print(f"labelled {len(entries) - len(errors)} of {len(entries)} entries -> {out}")
    if errors:
        report = out.with_name(out.stem + ".errors.json")
        report.write_text(json.dumps(errors, indent=2, sort_keys=True) + "\n")
        for uid, msg in errors.items():
            print(f"error: {uid}: {msg}", file=sys.stderr)
        return 1
    return 0


def cmd_train(args) -> int:
    if args.mode == "kt" and not args.init:
        raise UsageError("--mode kt requires --init <teacher checkpoint>")
    if args.mode == "teacher" and args.init:
        raise UsageError("--mode teacher always starts from random weights; drop --init")
    out = _resolve_out(args, "train")
    echo_config(args, out)
    result = run_training(args.manifest, out, model_config_from_args(args), loss_config_from_args(args),
                          train_config_from_args(args, args.mode, args.init))
    print(f"best epoch {result.best_epoch}; checkpoint {result.checkpoint} (sha256 {result.checkpoint_hash})")
    return 0


def cmd_eval(args) -> int:
    out = Path(args.out) if args.out else None
    if out is not None:
        echo_config(args, out)
    report = run_eval(args.checkpoint, args.manifest, out)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_predict(args) -> int:
    model = MtqNet.load(args.checkpoint)
    emb = args.emb
    if emb is None and "ssl" in model.config.features and sidecar_path(args.wav).exists():
        emb = sidecar_path(args.wav)
    scores = model.predict(read_wav(args.wav), emb)
    for m in PRIMARY:
        print(f"{m} {scores[m]:.4f}")
    return 0


def _ensure_teacher(args, out: Path, model_cfg, loss_cfg, examples) -> Path:
    if getattr(args, "init", None):
        return Path(args.init)
    tc = train_config_from_args(args, "teacher", None)
    result = run_training(args.train_manifest, out / "teacher", model_cfg, loss_cfg, tc, examples)
    return result.checkpoint


def _run_jobs(jobs, workers: int):
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_train_and_eval, jobs))
    return [_train_and_eval(j) for j in jobs]


def cmd_sweep_delta(args) -> int:
    out = _resolve_out(args, "sweep-delta")
    echo_config(args, out)
    model_cfg = model_config_from_args(args)
    base_loss = loss_config_from_args(args)
    teacher = _ensure_teacher(args, out, model_cfg, base_loss, None)
    jobs = []
    for delta in args.deltas:
        tc = train_config_from_args(args, "mpl", teacher)
        jobs.append((args.train_manifest, args.test_manifest, out / f"delta_{delta:g}", model_cfg,
                     loss_config_from_args(args, delta), tc))
    results = _run_jobs(jobs, args.workers)
    lines = ["delta,smos_srcc,nmos_srcc,gmos_srcc"]
    for delta, (_, report) in zip(args.deltas, results):
        srccs = [report["per_metric"][m]["srcc"] for m in PRIMARY]
        lines.append(",".join([f"{delta:g}"] + ["" if v is None else repr(float(v)) for v in srccs]))
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    summary = {"teacher_sha256": ckpt.file_hash(teacher),
               "runs": {f"{d:g}": r for d, (_, r) in zip(args.deltas, results)}}
    (out / "sweep.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print("\n".join(lines))
    return 0


def cmd_compare_modes(args) -> int:
    out = _resolve_out(args, "compare-modes")
    echo_config(args, out)
    model_cfg = model_config_from_args(args)
    loss_cfg = loss_config_from_args(args)
    teacher = _ensure_teacher(argparse.Namespace(**{**vars(args), "init": None}),
                              out, model_cfg, loss_cfg, None)
    teacher_hash = ckpt.file_hash(teacher)
    jobs = []
    for mode in ("scratch", "kt", "mpl"):
        init = teacher if mode in ("kt", "mpl") else None
        jobs.append((args.train_manifest, args.test_manifest, out / mode, model_cfg, loss_cfg,
                     train_config_from_args(args, mode, init)))
    results = _run_jobs(jobs, args.workers)
    modes = {}
    for (mode, (init_hash, report)) in zip(("scratch", "kt", "mpl"), results):
        modes[mode] = {"init_sha256": init_hash, "per_metric": report["per_metric"], "n": report["n"]}
    provenance = all(modes[m]["init_sha256"] == teacher_hash for m in ("kt", "mpl")) \
        and modes["scratch"]["init_sha256"] is None
    ordering = {}
    for m in PRIMARY:
        a, b = modes["mpl"]["per_metric"][m], modes["scratch"]["per_metric"][m]
        ordering[m] = {
            "mpl_minus_scratch_lcc": None if None in (a["lcc"], b["lcc"]) else a["lcc"] - b["lcc"],
            "mpl_minus_scratch_srcc": None if None in (a["srcc"], b["srcc"]) else a["srcc"] - b["srcc"],
            "mpl_minus_scratch_mse": a["mse"] - b["mse"],
        }
    summary = {"teacher_sha256": teacher_hash, "provenance_verified": provenance,
               "modes": modes, "ordering_mpl_vs_scratch": ordering}
    (out / "compare.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    rows = [csv_header(("mode",))] + [csv_row({"per_metric": modes[m]["per_metric"]}, (m,)) for m in modes]
    (out / "compare.csv").write_text("\n".join(rows) + "\n")
    text = "".join(format_table({"dataset": f"mode={m}", "n": modes[m]["n"], "per_metric": modes[m]["per_metric"]})
                   for m in modes)
    (out / "compare.txt").write_text(text)
    print(text, end="")
    if not provenance:
        log.error("teacher initialisation provenance check failed")
        return 1
    return 0


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mtqnet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (MtqError, OSError, ValueError) as exc:
        print(f"mtqnet {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
