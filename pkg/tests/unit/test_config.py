"""Unit tests for configuration models and run-config loading"""
import pytest
from pydantic import ValidationError

from gda_kit.config import (
    PRESETS,
    GdaConfig,
    LmConfig,
    TrainConfig,
    default_mlp_hidden,
    load_run_config,
    parse_config_text,
    preset,
)
from gda_kit.exceptions import ConfigurationError


class TestGdaConfig:
    """Test head grouping arithmetic"""

    @pytest.mark.parametrize("ratio,signal,noise", [(1, 24, 24), (2, 32, 16), (3, 36, 12), (5, 40, 8), (11, 44, 4)])
    def test_h48_splits(self, ratio, signal, noise):
        cfg = GdaConfig(d_model=1536, n_layers=1, n_heads=48, ratio=ratio, d_head=32)
        assert cfg.n_signal == signal
        assert cfg.n_noise == noise
        assert cfg.kv_units == signal

    def test_ratio_must_divide_heads(self):
        with pytest.raises(ValidationError, match="must divide H"):
            GdaConfig(d_model=64, n_layers=1, n_heads=48, ratio=4, d_head=8)

    def test_odd_head_width_rejected(self):
        with pytest.raises(ValidationError):
            GdaConfig(d_model=64, n_layers=1, n_heads=4, ratio=1, d_head=5)

    def test_kv_units_must_divide_signal(self):
        with pytest.raises(ValidationError):
            GdaConfig(d_model=64, n_layers=1, n_heads=8, ratio=3, d_head=8, n_kv=4)

    def test_config_is_frozen(self, small_gda):
        with pytest.raises(ValidationError):
            small_gda.ratio = 1


class TestLmConfig:
    """Test language-model config defaults"""

    def test_default_mlp_hidden(self):
        assert default_mlp_hidden(1536) == 4096
        assert default_mlp_hidden(16) == 64

    def test_mlp_hidden_filled(self, small_gda):
        cfg = LmConfig(gda=small_gda)
        assert cfg.hidden == default_mlp_hidden(16)
        assert cfg.vocab_size == 258

    def test_mlp_hidden_below_width_rejected(self, small_gda):
        with pytest.raises(ValidationError):
            LmConfig(gda=small_gda, mlp_hidden=8)


class TestTrainConfig:
    """Test schedule constraints"""

    def test_phases_cannot_overlap(self):
        with pytest.raises(ValidationError):
            TrainConfig(total_steps=10, warmup_frac=0.6, decay_frac=0.5)

    def test_tokens_per_step(self):
        assert TrainConfig(total_steps=1, batch_sequences=4, seq_len=32).tokens_per_step == 128


class TestPresets:
    """Test named presets"""

    def test_all_presets_build(self):
        for name in PRESETS:
            cfg = preset(name)
            assert cfg.n_signal % cfg.kv_units == 0

    def test_h48_r3_shape(self):
        cfg = preset("h48-r3")
        assert (cfg.n_signal, cfg.n_noise, cfg.kv_units) == (36, 12, 12)

    def test_overrides(self):
        assert preset("toy", precision="f64").precision == "f64"

    def test_unknown_preset(self):
        with pytest.raises(ConfigurationError, match="Unknown preset"):
            preset("nope")


class TestRunConfig:
    """Test the key = value run-config format"""

    def test_parse_skips_comments_and_blanks(self):
        values = parse_config_text("# comment\n\nd_model = 16\nratio=3\n")
        assert values == {"d_model": "16", "ratio": "3"}

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError) as exc:
            parse_config_text("colour = blue\n")
        assert exc.value.key == "colour"

    def test_duplicate_key(self):
        with pytest.raises(ConfigurationError, match="duplicate"):
            parse_config_text("ratio = 1\nratio = 2\n")

    def test_malformed_line(self):
        with pytest.raises(ConfigurationError, match="line 1"):
            parse_config_text("ratio 3\n")

    def test_load_file(self, run_config_file, corpus_file):
        run = load_run_config(run_config_file)
        assert run.lm.gda.n_signal == 2
        assert run.lm.gda.precision == "f64"
        assert run.train.precision == "f64"
        assert run.train.total_steps == 4
        assert run.corpus == [str(corpus_file)]

    def test_missing_required_key_is_named(self):
        values = {"d_model": "16", "n_layers": "1", "n_heads": "4", "ratio": "1", "d_head": "4"}
        with pytest.raises(ConfigurationError) as exc:
            load_run_config(values)
        assert exc.value.key == "total_steps"

    def test_total_steps_optional_for_eval(self):
        values = {"d_model": "16", "n_layers": "1", "n_heads": "4", "ratio": "1", "d_head": "4"}
        run = load_run_config(values, require_train=False)
        assert run.train.total_steps == 1

    def test_invalid_value(self):
        values = {"d_model": "16", "n_layers": "1", "n_heads": "6", "ratio": "3", "d_head": "4", "total_steps": "1"}
        with pytest.raises(ConfigurationError):
            load_run_config(values)

    def test_preset_key(self):
        run = load_run_config({"preset": "toy", "total_steps": "3"})
        assert run.lm.gda.n_heads == 8

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError, match="not found"):
            load_run_config(tmp_path / "missing.cfg")
