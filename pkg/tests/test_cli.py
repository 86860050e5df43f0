import csv
import json

import numpy as np
import pytest

from mtqnet import checkpoint as ckpt
from mtqnet.cli import main, parse_args
from mtqnet.dsp import write_embeddings
from mtqnet.manifest import ManifestEntry, read_manifest, resolve, write_manifest
from mtqnet.model import PRIMARY, MtqNet, MtqNetConfig

QUICK = ["--preset", "tiny", "--max-epochs", "1", "--lr", "1e-3"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


# ---------------------------------------------------------------- corpus / labels

def test_corpus_command_is_repeatable(tmp_path, capsys):
    args = ["corpus", "--n-train", 4, "--n-test", 2, "--duration", 1.0, "--seed", 7]
    assert run(capsys, *args, "--out", tmp_path / "a")[0] == 0
    assert run(capsys, *args, "--out", tmp_path / "b")[0] == 0
    assert len((tmp_path / "a" / "train.jsonl").read_text().splitlines()) == 4
    for name in ("train.jsonl", "test.jsonl", "train/degraded/train-00003.wav"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    cfg = json.loads((tmp_path / "a" / "run-config.json").read_text())
    assert cfg["seed"] == 7 and cfg["n_train"] == 4


def test_corpus_without_out_is_usage_error(capsys, monkeypatch):
    monkeypatch.delenv("MTQNET_OUTPUT_ROOT", raising=False)
    code, _, err = run(capsys, "corpus", "--n-train", 1)
    assert code == 2 and "--out" in err


def test_output_root_from_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("MTQNET_OUTPUT_ROOT", str(tmp_path))
    assert run(capsys, "corpus", "--n-train", 1, "--n-test", 1, "--duration", 1.0)[0] == 0
    assert (tmp_path / "corpus" / "train.jsonl").exists()


def test_bad_grid_is_usage_error(tmp_path, capsys):
    assert run(capsys, "corpus", "--out", tmp_path, "--enhancers", "magic")[0] == 2


def test_labels_command(small_corpus, tmp_path, capsys):
    out = tmp_path / "pl.jsonl"
    code, stdout, _ = run(capsys, "labels", "--manifest", small_corpus["train"], "--out", out)
    assert code == 0 and "12 of 12" in stdout
    assert all(set(e.pseudo) == {"pq", "stoi", "sdi"} for e in read_manifest(out))
    assert (tmp_path / "pl.run-config.json").exists()


def test_labels_identity_and_missing_reference(small_corpus, tmp_path, capsys):
    src = read_manifest(small_corpus["test"])[0]
    clean = str(resolve(small_corpus["test"], src.clean_path))
    write_manifest(tmp_path / "m.jsonl", [ManifestEntry("same", clean, clean),
                                          ManifestEntry("orphan", clean, None)])
    code, _, err = run(capsys, "labels", "--manifest", tmp_path / "m.jsonl", "--out", tmp_path / "o.jsonl")
    assert code == 1 and "orphan" in err
    assert "orphan" in json.loads((tmp_path / "o.errors.json").read_text())
    same = read_manifest(tmp_path / "o.jsonl")[0].pseudo
    assert same["pq"] == 4.5 and same["stoi"] == pytest.approx(1.0, abs=1e-6) and same["sdi"] == 0.0


# ---------------------------------------------------------------- train / eval / predict

@pytest.fixture(scope="module")
def trained(small_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_train")
    assert main(["train", "--manifest", str(small_corpus["train_pl"]), "--out", str(out), *QUICK]) == 0
    return out


def test_train_outputs(trained):
    assert (trained / "model.ckpt").exists() and (trained / "history.jsonl").exists()
    cfg = json.loads((trained / "run-config.json").read_text())
    assert cfg["mode"] == "mpl" and cfg["delta"] == 1.0 and cfg["loss"] == "huber"


@pytest.mark.parametrize("loss", ["huber", "mse", "mae"])
def test_train_loss_kinds(small_corpus, tmp_path, capsys, loss):
    code, out, _ = run(capsys, "train", "--manifest", small_corpus["train_pl"], "--out", tmp_path,
                       "--loss", loss, *QUICK)
    assert code == 0 and "best epoch 1" in out
    assert ckpt.load(tmp_path / "model.ckpt")[0]["meta"]["loss"]["loss_kind"] == loss


def test_kt_without_init_is_usage_error(small_corpus, tmp_path, capsys):
    code, _, err = run(capsys, "train", "--mode", "kt", "--manifest", small_corpus["train_pl"],
                       "--out", tmp_path, *QUICK)
    assert code == 2 and "--init" in err


def test_scratch_without_pseudo_labels_succeeds(small_corpus, tmp_path, capsys):
    assert run(capsys, "train", "--mode", "scratch", "--manifest", small_corpus["train"],
               "--out", tmp_path, *QUICK)[0] == 0


def test_mpl_without_pseudo_labels_is_runtime_error(small_corpus, tmp_path, capsys):
    code, _, err = run(capsys, "train", "--manifest", small_corpus["train"], "--out", tmp_path, *QUICK)
    assert code == 1 and "pseudo" in err


def test_eval_emits_three_blocks(trained, small_corpus, tmp_path, capsys):
    code, out, _ = run(capsys, "eval", "--checkpoint", trained / "model.ckpt", "--manifest",
                       small_corpus["test"], "--out", tmp_path)
    assert code == 0
    report = json.loads(out)
    assert set(report["per_metric"]) == set(PRIMARY)
    assert all(set(b) >= {"lcc", "srcc", "mse"} for b in report["per_metric"].values())
    assert report["checkpoint"] == ckpt.file_hash(trained / "model.ckpt")
    assert (tmp_path / "report.json").exists() and (tmp_path / "run-config.json").exists()


def test_predict_prints_three_scores(trained, small_corpus, capsys):
    wav = resolve(small_corpus["test"], read_manifest(small_corpus["test"])[0].degraded_path)
    code, out, _ = run(capsys, "predict", "--checkpoint", trained / "model.ckpt", "--wav", wav)
    assert code == 0
    lines = out.split("\n")[:3]
    assert [ln.split()[0] for ln in lines] == list(PRIMARY)
    assert all(1.0 <= float(ln.split()[1]) <= 5.0 for ln in lines)


def test_predict_with_wrong_sidecar(small_corpus, tmp_path, capsys):
    MtqNet.build(MtqNetConfig.tiny(features=("stft", "ssl"), emb_dim=4)).save(tmp_path / "s.ckpt")
    write_embeddings(tmp_path / "e.mtqe", np.zeros((5, 7)))
    wav = resolve(small_corpus["test"], read_manifest(small_corpus["test"])[0].degraded_path)
    code, _, err = run(capsys, "predict", "--checkpoint", tmp_path / "s.ckpt", "--wav", wav,
                       "--emb", tmp_path / "e.mtqe")
    assert code == 1 and "ShapeError" in err


def test_missing_checkpoint_is_runtime_error(small_corpus, tmp_path, capsys):
    assert run(capsys, "eval", "--checkpoint", tmp_path / "none.ckpt", "--manifest", small_corpus["test"])[0] == 1


def test_missing_required_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--manifest", "x.jsonl"])
    assert exc.value.code == 2
    assert "--checkpoint" in capsys.readouterr().err


# ---------------------------------------------------------------- config files

def test_config_file_supplies_defaults_and_flags_win(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"manifest": "m.jsonl", "delta": 0.5, "max-epochs": 3}))
    args = parse_args(["train", "--config", str(tmp_path / "c.json"), "--delta", "0.75"])
    assert args.manifest == "m.jsonl" and args.max_epochs == 3 and args.delta == 0.75


def test_yaml_config(tmp_path):
    (tmp_path / "c.yaml").write_text("checkpoint: a.ckpt\nmanifest: m.jsonl\n")
    args = parse_args(["eval", "--config", str(tmp_path / "c.yaml")])
    assert args.checkpoint == "a.ckpt"


def test_unknown_config_key(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"learning_rate": 1}))
    with pytest.raises(SystemExit) as exc:
        parse_args(["train", "--manifest", "m", "--config", str(tmp_path / "c.json")])
    assert exc.value.code == 2


# ---------------------------------------------------------------- experiment drivers

def test_sweep_delta_matches_recomposed_runs(small_corpus, tmp_path, capsys):
    out = tmp_path / "sweep"
    code, _, _ = run(capsys, "sweep-delta", "--train-manifest", small_corpus["train_pl"], "--test-manifest",
                     small_corpus["test"], "--out", out, "--deltas", "0.5,1.25", *QUICK)
    assert code == 0
    rows = list(csv.DictReader((out / "sweep.csv").open()))
    assert [r["delta"] for r in rows] == ["0.5", "1.25"]
    teacher = out / "teacher" / "model.ckpt"
    for row in rows:
        d = row["delta"]
        run(capsys, "train", "--manifest", small_corpus["train_pl"], "--out", tmp_path / d, "--delta", d,
            "--init", teacher, *QUICK)
        _, text, _ = run(capsys, "eval", "--checkpoint", tmp_path / d / "model.ckpt", "--manifest",
                         small_corpus["test"])
        report = json.loads(text)
        for m in PRIMARY:
            assert float(row[f"{m}_srcc"]) == report["per_metric"][m]["srcc"]
            assert -1.0 <= float(row[f"{m}_srcc"]) <= 1.0


def test_compare_modes_report(small_corpus, tmp_path, capsys):
    out = tmp_path / "cmp"
    code, text, _ = run(capsys, "compare-modes", "--train-manifest", small_corpus["train_pl"],
                        "--test-manifest", small_corpus["test"], "--out", out, "--workers", 2, *QUICK)
    assert code == 0 and "mode=mpl" in text
    summary = json.loads((out / "compare.json").read_text())
    assert summary["provenance_verified"]
    teacher_hash = ckpt.file_hash(out / "teacher" / "model.ckpt")
    assert summary["teacher_sha256"] == teacher_hash
    for mode in ("kt", "mpl"):
        assert summary["modes"][mode]["init_sha256"] == teacher_hash
        assert ckpt.load(out / mode / "model.ckpt")[0]["meta"]["init_sha256"] == teacher_hash
    assert summary["modes"]["scratch"]["init_sha256"] is None
    rows = list(csv.reader((out / "compare.csv").open()))
    assert [r[0] for r in rows[1:]] == ["scratch", "kt", "mpl"]
    assert sum(len(r) - 1 for r in rows[1:]) == 27
    assert set(summary["ordering_mpl_vs_scratch"]) == set(PRIMARY)

    # the scratch row is what a standalone train + eval produces
    run(capsys, "train", "--mode", "scratch", "--manifest", small_corpus["train_pl"], "--out",
        tmp_path / "solo", *QUICK)
    assert (tmp_path / "solo" / "model.ckpt").read_bytes() == (out / "scratch" / "model.ckpt").read_bytes()
    _, text, _ = run(capsys, "eval", "--checkpoint", tmp_path / "solo" / "model.ckpt", "--manifest",
                     small_corpus["test"])
    assert json.loads(text)["per_metric"] == summary["modes"]["scratch"]["per_metric"]
