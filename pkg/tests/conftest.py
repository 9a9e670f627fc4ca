"""Pytest configuration and fixtures for all tests"""
import os
import sys

import numpy as np
import pytest

# Add src to path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "src")))

from gda_kit.checkpoint import Checkpoint  # noqa: E402
from gda_kit.config import GdaConfig, LmConfig, TrainConfig  # noqa: E402

SAMPLE_TEXT = (
    "The quick brown fox jumps over the lazy dog. "
    "Pack my box with five dozen liquor jugs. "
    "How vexingly quick daft zebras jump! "
) * 8


@pytest.fixture
def rng():
    """Seeded generator"""
    return np.random.default_rng(1234)


@pytest.fixture
def small_gda():
    """H=8, G=3 (S=6, h=2), two KV units, float64"""
    return GdaConfig(d_model=16, n_layers=2, n_heads=8, ratio=3, d_head=4, n_kv=2, max_seq_len=16, precision="f64")


@pytest.fixture
def small_lm(small_gda):
    return LmConfig(gda=small_gda, vocab_size=20, mlp_hidden=32)


@pytest.fixture
def byte_lm():
    """Byte-vocabulary model small enough to train in a test"""
    gda = GdaConfig(d_model=16, n_layers=1, n_heads=4, ratio=1, d_head=4, n_kv=2, max_seq_len=16, precision="f64")
    return LmConfig(gda=gda, mlp_hidden=32)


@pytest.fixture
def small_ckpt(small_lm):
    return Checkpoint.initialize(small_lm, seed=7, weight_std=0.2)


@pytest.fixture
def train_cfg():
    return TrainConfig(
        total_steps=6, batch_sequences=2, seq_len=8, peak_lr=1e-2, warmup_frac=0.2, decay_frac=0.2,
        holdout_frac=0.1, eval_every=3, checkpoint_every=3, precision="f64",
    )


@pytest.fixture
def corpus_file(tmp_path):
    path = tmp_path / "corpus.txt"
    path.write_text(SAMPLE_TEXT, encoding="utf-8")
    return path


@pytest.fixture
def run_config_file(tmp_path, corpus_file):
    """Run config for the byte-vocabulary model"""
    path = tmp_path / "run.cfg"
    path.write_text(
        "# tiny run\n"
        "d_model = 16\n"
        "n_layers = 1\n"
        "n_heads = 4\n"
        "ratio = 1\n"
        "d_head = 4\n"
        "n_kv = 2\n"
        "max_seq_len = 16\n"
        "mlp_hidden = 32\n"
        "precision = f64\n"
        "total_steps = 4\n"
        "batch_sequences = 2\n"
        "seq_len = 8\n"
        "peak_lr = 0.01\n"
        "holdout_frac = 0.1\n"
        "checkpoint_every = 2\n"
        f"corpus = {corpus_file}\n",
        encoding="utf-8",
    )
    return path
