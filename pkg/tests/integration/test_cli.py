"""Integration tests for the gda-kit command line"""
import json

import pytest

from gda_kit.cli import EXIT_AUDIT, EXIT_OK, EXIT_USAGE, main
from gda_kit.reports import read_summary


def last_json(capsys):
    out = capsys.readouterr().out
    return json.loads(out.strip().splitlines()[-1])


@pytest.fixture
def trained(run_config_file, tmp_path):
    """Checkpoint produced by `gda-kit train`"""
    out = tmp_path / "run"
    assert main(["train", "--config", str(run_config_file), "--out", str(out)]) == EXIT_OK
    return out / "final.gda"


@pytest.mark.integration
class TestAccountingCommands:
    """alloc and flops"""

    def test_alloc_h48(self, tmp_path, capsys):
        code = main(["alloc", "--heads", "48", "--ratios", "1,2,3,5,11", "--out", str(tmp_path)])
        assert code == EXIT_OK
        summary = read_summary(tmp_path / "alloc.txt")
        assert summary["valid"] == [[1, 24, 24], [2, 32, 16], [3, 36, 12], [5, 40, 8], [11, 44, 4]]
        assert summary["invalid"] == []
        assert (tmp_path / "alloc.csv").read_text().startswith("ratio,heads,signal,noise")
        assert last_json(capsys)["summary"] == "alloc"

    def test_alloc_invalid_ratio(self, tmp_path):
        assert main(["alloc", "--heads", "48", "--ratio", "4", "--ratio", "3", "--out", str(tmp_path)]) == EXIT_OK
        summary = read_summary(tmp_path / "alloc.txt")
        assert summary["invalid"] == [4]
        assert summary["valid"] == [[3, 36, 12]]

    def test_flops(self, tmp_path):
        code = main(["flops", "--heads", "48", "--ratio", "3", "--ratio", "11", "--seq-len", "128",
                     "--out", str(tmp_path)])
        assert code == EXIT_OK
        summary = read_summary(tmp_path / "flops.txt")
        assert summary["score_maps"] == {"3:1": 48, "11:1": 48}
        assert (tmp_path / "flops.csv").is_file()

    def test_flops_preset(self, tmp_path):
        assert main(["flops", "--preset", "h48-r5", "--seq-len", "64", "--out", str(tmp_path)]) == EXIT_OK
        assert "h48-r5" in (tmp_path / "flops.txt").read_text()

    def test_flops_bad_kv(self, tmp_path):
        code = main(["flops", "--heads", "48", "--ratio", "11", "--n-kv", "12", "--out", str(tmp_path)])
        assert code == EXIT_USAGE


@pytest.mark.integration
class TestGradcheckCommand:
    """gradcheck"""

    def test_passes(self, tmp_path, capsys):
        assert main(["gradcheck", "--seeds", "2", "--out", str(tmp_path)]) == EXIT_OK
        summary = read_summary(tmp_path / "gradcheck.txt")
        assert summary["pass"] is True
        assert summary["precision"] == "f64"
        assert last_json(capsys)["seeds"] == 2

    def test_impossible_tolerance_fails(self):
        assert main(["gradcheck", "--tol", "1e-30"]) == EXIT_AUDIT


@pytest.mark.integration
class TestModelCommands:
    """train, eval, grow and inspect on a tiny byte-level model"""

    def test_train_outputs(self, trained, capsys):
        assert trained.is_file()
        assert (trained.parent / "metrics.jsonl").is_file()
        assert (trained.parent / "step_000002.gda").is_file()

    def test_eval(self, trained, run_config_file, tmp_path, capsys):
        out = tmp_path / "eval"
        code = main(["eval", "--config", str(run_config_file), "--ckpt", str(trained), "--out", str(out)])
        assert code == EXIT_OK
        summary = read_summary(out / "eval.txt")
        assert summary["split"] == "holdout"
        assert 1.0 < summary["perplexity"] < 1000.0

    def test_grow_group_diff(self, trained, tmp_path, capsys):
        out = tmp_path / "grown"
        code = main(["grow", "--ckpt", str(trained), "--out", str(out), "--factor", "2",
                     "--target-ratio", "3", "--audit", "--samples", "4"])
        assert code == EXIT_OK
        summary = read_summary(out / "audit.txt")
        assert summary["pass"] is True
        assert summary["max_logit_diff"] <= 1e-9
        assert (out / "grown.gda").is_file()

    def test_grow_requires_audit(self, trained, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["grow", "--ckpt", str(trained), "--out", str(tmp_path)])
        assert exc.value.code == EXIT_USAGE

    def test_grow_with_clone_noise_fails_audit(self, trained, tmp_path):
        code = main(["grow", "--ckpt", str(trained), "--out", str(tmp_path), "--audit",
                     "--noise-std", "0.1", "--samples", "2"])
        assert code == EXIT_AUDIT

    def test_grow_bad_factor(self, trained, tmp_path):
        code = main(["grow", "--ckpt", str(trained), "--out", str(tmp_path), "--audit", "--factor", "0"])
        assert code == EXIT_USAGE

    def test_inspect(self, trained, tmp_path, capsys):
        text = tmp_path / "input.txt"
        text.write_text("hello world")
        out = tmp_path / "maps"
        assert main(["inspect", "--ckpt", str(trained), "--input", str(text), "--out", str(out)]) == EXIT_OK
        for name in ("layer0_signal0.csv", "layer0_signal1.csv", "layer0_noise1.csv", "layer0_diff1.csv"):
            assert (out / name).is_file()
        lines = (out / "summary.jsonl").read_text().splitlines()
        summary = json.loads(lines[-1])
        assert summary["summary"] == "inspect"
        assert summary["tokens"] == 12
        assert summary["max_row_sum_error"] < 1e-9

    def test_inspect_input_too_long(self, trained, tmp_path):
        text = tmp_path / "long.txt"
        text.write_text("x" * 40)
        assert main(["inspect", "--ckpt", str(trained), "--input", str(text), "--out", str(tmp_path)]) == EXIT_USAGE


@pytest.mark.integration
class TestErrors:
    """Exit codes for bad inputs"""

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("d_model = 16\nwidth = 3\n")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_USAGE

    def test_missing_corpus(self, run_config_file, tmp_path):
        code = main(["train", "--config", str(run_config_file), "--corpus", str(tmp_path / "none.txt"),
                     "--out", str(tmp_path)])
        assert code == EXIT_USAGE

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)])
        assert exc.value.code == EXIT_USAGE

    def test_resume_with_other_config(self, trained, tmp_path):
        cfg = tmp_path / "other.cfg"
        cfg.write_text(
            "d_model = 16\nn_layers = 2\nn_heads = 4\nratio = 1\nd_head = 4\nmax_seq_len = 16\n"
            f"precision = f64\ntotal_steps = 2\nseq_len = 8\ncorpus = {trained.parent.parent / 'corpus.txt'}\n"
        )
        code = main(["train", "--config", str(cfg), "--ckpt", str(trained), "--out", str(tmp_path / "r")])
        assert code == EXIT_USAGE

    def test_corrupt_checkpoint(self, tmp_path, run_config_file):
        bad = tmp_path / "bad.gda"
        bad.write_bytes(b"GDA0")
        code = main(["eval", "--config", str(run_config_file), "--ckpt", str(bad), "--out", str(tmp_path)])
        assert code == EXIT_USAGE
