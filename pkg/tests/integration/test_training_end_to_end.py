"""End-to-end: train, grow, keep training"""
import math
import os
from pathlib import Path

import numpy as np
import pytest

from gda_kit.checkpoint import Checkpoint
from gda_kit.config import GdaConfig, LmConfig, TrainConfig
from gda_kit.corpus import ingest
from gda_kit.growth import apply_plan, make_plan, verify_preservation
from gda_kit.lm import batch_loss, generate
from gda_kit.training import read_metrics, smoothed, train


@pytest.mark.integration
class TestTrainGrowContinue:
    """Growth between training phases"""

    def test_grown_model_starts_where_source_stopped(self, byte_lm, corpus_file, tmp_path):
        stream = ingest([corpus_file], seq_len=8, seed=0, holdout_frac=0.1)
        cfg = TrainConfig(total_steps=8, batch_sequences=2, seq_len=8, peak_lr=1e-2, precision="f64")
        base = train(Checkpoint.initialize(byte_lm, seed=0), stream, cfg, tmp_path / "base")

        grown = apply_plan(base.checkpoint, make_plan(base.checkpoint.config, 2, target_ratio=3))
        assert verify_preservation(base.checkpoint, grown, n_samples=4).passed
        inputs, targets = stream.batch(0, 4)
        before = batch_loss(base.checkpoint.model_tensors(), base.checkpoint.config, inputs, targets)
        after = batch_loss(grown.model_tensors(), grown.config, inputs, targets)
        assert after == pytest.approx(before, abs=1e-9)

        cont = train(grown, stream, cfg.model_copy(update={"total_steps": 4}), tmp_path / "grown")
        assert all(math.isfinite(x) for x in cont.losses)
        assert cont.checkpoint.config.gda.ratio == 3
        assert cont.checkpoint.provenance[-1]["op"] == "group_diff"
        records = read_metrics(cont.metrics_path)
        assert records[0]["step"] == 0

    def test_generate_after_training(self, byte_lm, corpus_file, tmp_path):
        stream = ingest([corpus_file], seq_len=8, seed=0)
        cfg = TrainConfig(total_steps=3, batch_sequences=2, seq_len=8, precision="f64", holdout_frac=0.0)
        result = train(Checkpoint.initialize(byte_lm, seed=1), stream, cfg, tmp_path)
        out = generate([256, 84], result.checkpoint, 5)
        assert len(out) == 7
        assert all(0 <= t < 258 for t in out)


@pytest.mark.slow
@pytest.mark.requires_corpus
@pytest.mark.timeout(7200)
@pytest.mark.skipif(not os.getenv("GDA_TRAIN_CORPUS"), reason="GDA_TRAIN_CORPUS not set")
class TestTrainability:
    """A small grouped model learns a real corpus"""

    def test_loss_falls(self, tmp_path):
        paths = [p for p in os.environ["GDA_TRAIN_CORPUS"].split(os.pathsep) if p]
        stream = ingest([Path(p) for p in paths], seq_len=128, seed=0, holdout_frac=0.05)
        gda = GdaConfig(d_model=128, n_layers=2, n_heads=8, ratio=3, d_head=16, n_kv=2, max_seq_len=128,
                        precision="f64")
        model = Checkpoint.initialize(LmConfig(gda=gda), seed=0)
        cfg = TrainConfig(total_steps=2000, batch_sequences=16, seq_len=128, peak_lr=3e-3, eval_every=500,
                          precision="f64")
        result = train(model, stream, cfg, tmp_path)
        assert np.isfinite(result.losses).all()
        curve = smoothed(result.losses, window=100)
        assert curve[-1] < curve[499] < curve[99]
        assert np.mean(result.losses[-100:]) <= 2.8
        assert result.eval_ppl is not None and result.eval_ppl < 258


@pytest.mark.integration
class TestPeriodicCorpus:
    """A model trained on a period-2 text continues the period"""

    def test_greedy_continues_abab(self, byte_lm, tmp_path):
        corpus = tmp_path / "abab.txt"
        corpus.write_text("ab" * 400, encoding="utf-8")
        stream = ingest([corpus], seq_len=8, seed=0)
        cfg = TrainConfig(total_steps=120, batch_sequences=4, seq_len=8, peak_lr=1e-2, precision="f64",
                          holdout_frac=0.0)
        result = train(Checkpoint.initialize(byte_lm, seed=0), stream, cfg, tmp_path / "run")
        out = generate([256, 97, 98, 97, 98], result.checkpoint, 6)
        assert out[5:] == [97, 98, 97, 98, 97, 98]
