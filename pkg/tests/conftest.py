import numpy as np
import pytest

from mtqnet.corpus import CorpusConfig, build_corpus, synth_clean
from mtqnet.oracle import compute_pseudo_labels


@pytest.fixture(scope="session")
def speech():
    """A fixed speech surrogate (2 s at 16 kHz)."""
    return synth_clean(CorpusConfig(seed=3), 0).samples


def add_white_noise(x, snr_db, seed):
    n = np.random.default_rng(seed).standard_normal(x.size)
    n *= np.sqrt(np.dot(x, x) / (np.dot(n, n) * 10 ** (snr_db / 10)))
    return x + n


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """12 train / 6 test utterances with pseudo labels on the training split."""
    root = tmp_path_factory.mktemp("corpus")
    paths = build_corpus(CorpusConfig(n_train=12, n_test=6, seed=11), root)
    labelled = root / "train_pl.jsonl"
    _, errors = compute_pseudo_labels(paths["train"], labelled)
    assert not errors
    return {"root": root, "train": paths["train"], "test": paths["test"], "train_pl": labelled}


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
