"""Unit tests for function-preserving width growth"""
import json

import numpy as np
import pytest

from gda_kit.accounting import lm_param_count
from gda_kit.attention import kv_partners, noise_partners
from gda_kit.checkpoint import Checkpoint
from gda_kit.config import GdaConfig, LmConfig
from gda_kit.exceptions import ConfigurationError, PlanError
from gda_kit.growth import (
    apply_plan,
    group_diff_grow,
    hyperclone_linear,
    hyperclone_model,
    make_plan,
    verify_preservation,
)
from gda_kit.inspection import layer_maps
from gda_kit.lm import lm_forward


@pytest.fixture
def r1_lm():
    """Balanced 1:1 source: H=4, S=2, h=2, one KV unit per head"""
    gda = GdaConfig(d_model=8, n_layers=2, n_heads=4, ratio=1, d_head=4, max_seq_len=12, precision="f64")
    return LmConfig(gda=gda, vocab_size=13, mlp_hidden=16)


@pytest.fixture
def r1_ckpt(r1_lm):
    return Checkpoint.initialize(r1_lm, seed=11, weight_std=0.3)


class TestHypercloneLinear:
    """Test the block-tiling primitive"""

    def test_duplicated_input_gives_duplicated_output(self, rng):
        w = rng.standard_normal((3, 5))
        x = rng.standard_normal((2, 3))
        out = np.tile(x, (1, 2)) @ hyperclone_linear(w, 2, 3)
        np.testing.assert_allclose(out, np.tile(x @ w, (1, 3)), atol=1e-12)

    def test_identity_factor(self, rng):
        w = rng.standard_normal((2, 2))
        np.testing.assert_array_equal(hyperclone_linear(w, 1, 1), w)

    def test_invalid_factor(self):
        with pytest.raises(PlanError):
            hyperclone_linear(np.ones((2, 2)), 0, 1)


class TestPlans:
    """Test growth plan construction and validation"""

    def test_uniform_plan(self, r1_lm):
        plan = make_plan(r1_lm, 2)
        tgt = plan.target.gda
        assert plan.mode == "uniform"
        assert (tgt.d_model, tgt.n_signal, tgt.n_noise, tgt.kv_units) == (16, 4, 4, 4)
        assert tgt.ratio == 1
        assert plan.signal_map == [0, 1, 0, 1]
        assert plan.target.hidden == 32

    @pytest.mark.parametrize("target_ratio,signal", [(3, 6), (4, 8)])
    def test_group_diff_plan(self, r1_lm, target_ratio, signal):
        plan = make_plan(r1_lm, 2, target_ratio=target_ratio)
        tgt = plan.target.gda
        assert plan.mode == "group_diff"
        assert plan.noise_factor == 1
        assert tgt.ratio == target_ratio
        assert (tgt.n_signal, tgt.n_noise) == (signal, 2)
        assert tgt.kv_units == signal
        assert plan.noise_map == [0, 1]

    def test_clones_keep_partners(self, r1_lm):
        plan = make_plan(r1_lm, 2, target_ratio=3)
        src, tgt = plan.source.gda, plan.target.gda
        for t, s in enumerate(plan.signal_map):
            assert plan.noise_map[noise_partners(tgt)[t]] == noise_partners(src)[s]
            assert plan.kv_map[kv_partners(tgt)[t]] == kv_partners(src)[s]
        assert plan.clone_layout == {0: [0, 2, 4], 1: [1, 3, 5]}

    def test_bad_factor(self, r1_lm):
        for factor in (0, 1.5, True):
            with pytest.raises(PlanError):
                make_plan(r1_lm, factor)

    def test_ratio_must_be_multiple(self):
        gda = GdaConfig(d_model=8, n_layers=1, n_heads=6, ratio=2, d_head=4, precision="f64")
        lm = LmConfig(gda=gda, vocab_size=5, mlp_hidden=8)
        with pytest.raises(PlanError, match="multiple"):
            make_plan(lm, 2, target_ratio=3)
        with pytest.raises(PlanError):
            make_plan(lm, 2, target_ratio=1)

    def test_broken_map_rejected(self, r1_lm):
        plan = make_plan(r1_lm, 2, target_ratio=3)
        swapped = plan.model_copy(update={"noise_map": [1, 0]})
        with pytest.raises(PlanError, match="noise head"):
            swapped.validate_partnerships()

    def test_short_map_rejected(self, r1_lm):
        plan = make_plan(r1_lm, 2)
        with pytest.raises(PlanError, match="entries"):
            plan.model_copy(update={"kv_map": [0]}).validate_partnerships()


class TestPreservation:
    """Test that growth leaves the function unchanged"""

    @pytest.mark.parametrize("n", [1, 2, 3])
    def test_hyperclone_preserves_logits(self, r1_ckpt, n):
        grown = hyperclone_model(r1_ckpt, n)
        assert grown.config.gda.d_model == 8 * n
        report = verify_preservation(r1_ckpt, grown, n_samples=5, seed=0, tol=1e-9)
        assert report.passed, report.to_lines()
        assert report.first_drift_layer is None
        assert report.embed_diff == 0.0

    @pytest.mark.parametrize("target_ratio", [3, 4])
    def test_group_diff_preserves_logits(self, r1_ckpt, target_ratio):
        plan = make_plan(r1_ckpt.config, 2, target_ratio=target_ratio)
        grown = group_diff_grow(r1_ckpt, plan)
        assert grown.config.gda.ratio == target_ratio
        report = verify_preservation(r1_ckpt, grown, n_samples=5, seed=1)
        assert report.passed, report.to_lines()

    @pytest.mark.parametrize("n", [2, 3])
    def test_preserves_logits_over_many_sequences(self, r1_ckpt, n):
        report = verify_preservation(r1_ckpt, hyperclone_model(r1_ckpt, n), n_samples=20, seed=3, tol=1e-9)
        assert report.passed, report.to_lines()

    @pytest.mark.parametrize("n", [2, 3])
    def test_undoing_scaling_breaks_preservation(self, r1_ckpt, n):
        grown = hyperclone_model(r1_ckpt, n)
        grown.tensors["layers.0.mlp.w_gate"] = grown.tensors["layers.0.mlp.w_gate"] * n
        report = verify_preservation(r1_ckpt, grown, n_samples=5)
        assert report.max_logit_diff > 1e-3

    def test_undoing_output_split_breaks_preservation(self, r1_ckpt):
        grown = group_diff_grow(r1_ckpt, make_plan(r1_ckpt.config, 2, target_ratio=3))
        for layer in range(2):
            name = f"layers.{layer}.attn.wo"
            grown.tensors[name] = grown.tensors[name] * 3
        report = verify_preservation(r1_ckpt, grown, n_samples=5)
        assert report.max_logit_diff > 1e-3

    @pytest.mark.parametrize("n", [2, 3])
    @pytest.mark.parametrize("target_ratio", [None, 3])
    def test_f32_preserves_within_single_precision(self, r1_lm, n, target_ratio):
        lm32 = r1_lm.model_copy(update={"gda": r1_lm.gda.model_copy(update={"precision": "f32"})})
        ckpt = Checkpoint.initialize(lm32, seed=11, weight_std=0.3)
        grown = apply_plan(ckpt, make_plan(lm32, n, target_ratio=target_ratio))
        assert grown.tensors["embed"].dtype == np.float32
        report = verify_preservation(ckpt, grown, n_samples=20, tol=1e-3)
        assert report.passed, report.to_lines()

    @pytest.mark.parametrize("target_ratio", [None, 3, 4])
    def test_grown_parameter_count_matches_target(self, r1_ckpt, target_ratio):
        plan = make_plan(r1_ckpt.config, 2, target_ratio=target_ratio)
        grown = apply_plan(r1_ckpt, plan)
        assert grown.num_parameters() == lm_param_count(plan.target)["total"]

    def test_identity_plan_copies_tensors(self, r1_ckpt):
        grown = hyperclone_model(r1_ckpt, 1)
        assert grown.config == r1_ckpt.config
        for name, tensor in r1_ckpt.model_tensors().items():
            np.testing.assert_array_equal(grown.tensors[name], tensor)

    @pytest.mark.parametrize("target_ratio,heads", [(3, 32), (4, 40)])
    def test_balanced_source_grows_to_imbalanced_width(self, target_ratio, heads):
        gda = GdaConfig(d_model=64, n_layers=2, n_heads=16, ratio=1, d_head=4, max_seq_len=12, precision="f64")
        source = Checkpoint.initialize(LmConfig(gda=gda, vocab_size=17, mlp_hidden=32), seed=2, weight_std=0.2)
        grown = group_diff_grow(source, make_plan(source.config, 2, target_ratio=target_ratio))
        assert grown.config.gda.d_model == 128
        assert grown.config.gda.n_heads == heads
        assert grown.config.gda.n_noise == 8
        assert verify_preservation(source, grown, n_samples=5, tol=1e-9).passed

        tokens = [3, 1, 4, 1, 5, 9, 2, 6]
        before, after = layer_maps(source, tokens), layer_maps(grown, tokens)
        for src_maps, grown_maps in zip(before, after):
            for t in range(grown.config.gda.n_signal):
                np.testing.assert_allclose(grown_maps.signal[t], src_maps.signal[t % 8], rtol=0, atol=1e-12)
            np.testing.assert_allclose(grown_maps.noise, src_maps.noise, rtol=0, atol=1e-12)

    def test_grouped_source_with_shared_kv(self, small_ckpt):
        plan = make_plan(small_ckpt.config, 2, target_ratio=6)
        grown = apply_plan(small_ckpt, plan)
        assert grown.config.gda.kv_units == 4
        assert verify_preservation(small_ckpt, grown, n_samples=4).passed

    def test_untied_head(self, r1_lm):
        ckpt = Checkpoint.initialize(r1_lm.model_copy(update={"tie_embeddings": False}), seed=5, weight_std=0.3)
        grown = hyperclone_model(ckpt, 2)
        assert verify_preservation(ckpt, grown, n_samples=3).passed

    def test_grown_checkpoint_metadata(self, r1_ckpt, tmp_path):
        r1_ckpt.step = 40
        grown = hyperclone_model(r1_ckpt, 2)
        assert grown.step == 0
        assert grown.optimizer_tensors() == {}
        assert grown.provenance[-1]["op"] == "hyperclone"
        assert grown.provenance[-1]["source_step"] == 40
        loaded = Checkpoint.load(grown.save(tmp_path / "grown.gda"))
        tokens = [1, 2, 3, 4]
        np.testing.assert_array_equal(lm_forward(tokens, loaded), lm_forward(tokens, grown))

    def test_clone_noise_breaks_symmetry(self, r1_ckpt):
        plan = make_plan(r1_ckpt.config, 2, target_ratio=3, noise_std=0.05, seed=4)
        grown = apply_plan(r1_ckpt, plan)
        report = verify_preservation(r1_ckpt, grown, n_samples=3)
        assert not report.passed
        assert report.first_drift_layer == 0

    def test_plan_must_match_checkpoint(self, r1_ckpt, small_lm):
        plan = make_plan(small_lm, 2)
        with pytest.raises(PlanError):
            apply_plan(r1_ckpt, plan)

    def test_group_diff_grow_requires_group_plan(self, r1_ckpt):
        with pytest.raises(PlanError):
            group_diff_grow(r1_ckpt, make_plan(r1_ckpt.config, 2))


class TestAudit:
    """Test the audit report itself"""

    def test_detects_perturbation(self, r1_ckpt):
        grown = hyperclone_model(r1_ckpt, 2)
        grown.tensors["layers.1.mlp.w_down"] = grown.tensors["layers.1.mlp.w_down"] + 0.01
        report = verify_preservation(r1_ckpt, grown, n_samples=3)
        assert not report.passed
        assert report.first_drift_layer == 1

    def test_vocab_mismatch(self, r1_ckpt, small_ckpt):
        with pytest.raises(ConfigurationError):
            verify_preservation(r1_ckpt, small_ckpt)

    def test_lines(self, r1_ckpt):
        report = verify_preservation(r1_ckpt, r1_ckpt, n_samples=2)
        lines = report.to_lines()
        assert len(lines) == 3
        summary = json.loads(lines[-1])
        assert summary["summary"] == "audit"
        assert summary["max_logit_diff"] == 0.0
        assert summary["pass"] is True
