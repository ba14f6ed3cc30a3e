import csv
import json

import pytest

from dama.cli.error_handler import EXIT_INVALID_CONFIG, EXIT_OK, EXIT_REJECTED
from dama.cli.main import main, parse_overrides
from dama.core.exceptions import ConfigurationError

from tests.conftest import TINY_OVERRIDES

pytestmark = pytest.mark.integration


def tiny_args(**extra):
    pairs = {**TINY_OVERRIDES, **extra}
    args = []
    for key, value in pairs.items():
        args += ["--set", f"{key}={value}"]
    return args


def error_envelope(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return json.loads(err[-1])["error"]


def read_csv(path):
    with path.open(newline="") as handle:
        return list(csv.DictReader(handle))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Corpus and pretrained base checkpoint shared by the workflow tests."""
    root = tmp_path_factory.mktemp("pipeline")
    corpus = root / "corpus"
    base = root / "base"
    assert main(["generate", "--out", str(corpus)] + tiny_args()) == EXIT_OK
    assert main(["pretrain", "--corpus", str(corpus), "--out", str(base)] + tiny_args()) == EXIT_OK
    return root, corpus, base / "base.ckpt"


class TestOverrides:
    """Test KEY=VALUE parsing."""

    def test_keys_upper_cased(self):
        """Test keys are normalized and values kept verbatim."""
        assert parse_overrides(["model__d_model=16", "SEED = 3"]) == {"MODEL__D_MODEL": "16", "SEED": "3"}

    def test_missing_separator(self):
        """Test a pair without '=' is rejected."""
        with pytest.raises(ConfigurationError):
            parse_overrides(["SEED"])


class TestCountCommand:
    """Test the accounting verb."""

    def test_whisper_counts(self, tmp_path):
        """Test the default preset reports the reference Whisper counts."""
        out = tmp_path / "count"
        assert main(["count", "--out", str(out)]) == EXIT_OK
        rows = {row["mode"]: row for row in read_csv(out / "accounting.csv")}
        assert rows["lora_uniform"]["params"] == "68157440"
        assert rows["dama"]["params"] == "14909440"
        assert (out / "accounting.json").exists()
        assert (out / "resolved_config.env").exists()

    def test_geometry_file(self, tmp_path):
        """Test a custom geometry JSON replaces the preset."""
        geometry = tmp_path / "geom.json"
        geometry.write_text(json.dumps(
            {"name": "square", "layers": 8, "sites": [{"name": "w", "d_in": 4, "d_out": 4}]}
        ))
        out = tmp_path / "count"
        assert main(["count", "--geometry", str(geometry), "--out", str(out)]) == EXIT_OK
        rows = {row["mode"]: row for row in read_csv(out / "accounting.csv")}
        assert rows["fft"]["params"] == str(16 * 8)
        assert rows["lora_uniform"]["params"] == str(64 * (4 + 4) * 8)


class TestErrorEnvelope:
    """Test exit codes and the JSON error envelope."""

    def test_corrupt_checkpoint(self, tmp_path, capsys):
        """Test a bad checkpoint exits 1 and names the failing field."""
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"NOPE" + bytes(32))
        status = main(["eval", "--checkpoint", str(bad), "--corpus", str(tmp_path), "--out", str(tmp_path / "o")])
        assert status == EXIT_REJECTED
        envelope = error_envelope(capsys)
        assert envelope["code"] == "checkpoint"
        assert envelope["field"] == "magic"
        assert envelope["run_id"]

    def test_invalid_config(self, tmp_path, capsys):
        """Test a config that fails validation exits 2."""
        status = main(["count", "--set", "DATA__VOCAB_SIZE=100", "--out", str(tmp_path)])
        assert status == EXIT_INVALID_CONFIG
        envelope = error_envelope(capsys)
        assert envelope["code"] == "validation"
        assert envelope["details"]

    def test_malformed_override(self, tmp_path, capsys):
        """Test an override without '=' is a rejected operation."""
        assert main(["count", "--set", "SEED", "--out", str(tmp_path)]) == EXIT_REJECTED
        assert error_envelope(capsys)["code"] == "configuration"

    def test_missing_corpus(self, tmp_path, capsys):
        """Test pretraining on a directory without a corpus exits 1."""
        status = main(["pretrain", "--corpus", str(tmp_path / "none"), "--out", str(tmp_path / "o")] + tiny_args())
        assert status == EXIT_REJECTED
        assert error_envelope(capsys)["code"] == "data"


@pytest.mark.slow
class TestWorkflow:
    """Test the command sequence on the tiny configuration."""

    def test_generate_and_pretrain(self, pipeline):
        """Test the corpus files and base checkpoint exist."""
        root, corpus, base = pipeline
        assert (corpus / "seen.ndjson").exists()
        assert (corpus / "unseen.ndjson").exists()
        manifest = json.loads((corpus / "languages.json").read_text())
        assert len(manifest["languages"]) == 4
        assert base.exists()
        assert "wall_time_seconds" not in json.loads((base.parent / "training_report.json").read_text())

    def test_adapt_eval_forget_probe(self, pipeline):
        """Test adapting, scoring, forgetting and probing end to end."""
        root, corpus, base = pipeline
        adapted_dir = root / "dama"
        assert main(["adapt", "--checkpoint", str(base), "--corpus", str(corpus),
                     "--out", str(adapted_dir)] + tiny_args()) == EXIT_OK
        report = json.loads((adapted_dir / "training_report.json").read_text())
        accounting = json.loads((adapted_dir / "accounting.json").read_text())
        assert report["trainable_params"] == accounting["totals"]["params"] == 8800

        eval_dir = root / "eval"
        assert main(["eval", "--checkpoint", str(adapted_dir / "adapted.ckpt"), "--corpus", str(corpus),
                     "--out", str(eval_dir)] + tiny_args()) == EXIT_OK
        assert read_csv(eval_dir / "eval.csv")[-1]["language"] == "all"

        forget_dir = root / "forget"
        assert main(["forget", "--base", str(base), "--adapted", str(adapted_dir / "adapted.ckpt"),
                     "--corpus", str(corpus), "--out", str(forget_dir)] + tiny_args()) == EXIT_OK
        row = json.loads((forget_dir / "forgetting.json").read_text())["rows"][0]
        assert row["mode"] == "dama[ushape,svd,bpp=on]"
        assert row["seen_wer_detached"] == row["seen_wer_base"]

        probe_dir = root / "probe"
        assert main(["probe", "--checkpoint", str(base), "--corpus", str(corpus),
                     "--out", str(probe_dir)] + tiny_args()) == EXIT_OK
        assert len(read_csv(probe_dir / "probe.csv")) == 6

    def test_zero_epoch_adaptation_matches_base(self, pipeline):
        """Test adapting for zero epochs scores exactly like the base model."""
        root, corpus, base = pipeline
        zero_dir = root / "zero"
        assert main(["adapt", "--checkpoint", str(base), "--corpus", str(corpus),
                     "--out", str(zero_dir)] + tiny_args(TRAINING__EPOCHS="0")) == EXIT_OK

        results = {}
        for name, checkpoint in (("base", base), ("zero", zero_dir / "adapted.ckpt")):
            out = root / f"eval_{name}"
            assert main(["eval", "--checkpoint", str(checkpoint), "--corpus", str(corpus),
                         "--out", str(out)] + tiny_args()) == EXIT_OK
            results[name] = json.loads((out / "eval.json").read_text())["aggregate"]
        assert results["zero"] == results["base"]

    def test_ablation_and_low_resource(self, pipeline):
        """Test the ablation grid and the budget sweep write one row per cell."""
        root, corpus, base = pipeline
        ablate_dir = root / "ablate"
        assert main(["ablate", "--checkpoint", str(base), "--corpus", str(corpus),
                     "--out", str(ablate_dir)] + tiny_args()) == EXIT_OK
        rows = read_csv(ablate_dir / "ablation.csv")
        assert len(rows) == 8
        uniform = [row for row in rows if row["schedule_shape"] == "uniform"]
        assert {row["ranks"] for row in uniform} == {"8 8 8 8 8 8"}

        lowres_dir = root / "lowres"
        assert main(["lowres", "--checkpoint", str(base), "--corpus", str(corpus),
                     "--fractions", "1.0,0.5", "--modes", "dama",
                     "--out", str(lowres_dir)] + tiny_args()) == EXIT_OK
        rows = read_csv(lowres_dir / "lowres.csv")
        assert [float(row["fraction"]) for row in rows] == [1.0, 0.5]
        assert int(rows[1]["n_train"]) < int(rows[0]["n_train"])


@pytest.mark.slow
class TestDeterminism:
    """Test repeated runs with one seed write byte-identical artifacts."""

    def test_generate_and_pretrain_repeat(self, pipeline):
        """Test regenerating and retraining reproduce the corpus and the base checkpoint."""
        root, corpus, base = pipeline
        corpus_again = root / "corpus_again"
        base_again = root / "base_again"
        assert main(["generate", "--out", str(corpus_again)] + tiny_args()) == EXIT_OK
        for name in ("seen.ndjson", "unseen.ndjson", "languages.json"):
            assert (corpus_again / name).read_bytes() == (corpus / name).read_bytes(), name

        assert main(["pretrain", "--corpus", str(corpus), "--out", str(base_again)] + tiny_args()) == EXIT_OK
        assert (base_again / "base.ckpt").read_bytes() == base.read_bytes()
        report = "training_report.json"
        assert (base_again / report).read_bytes() == (base.parent / report).read_bytes()

    @pytest.mark.parametrize("mode", ["dama", "fft"])
    def test_adapt_and_eval_repeat(self, pipeline, mode):
        """Test two adaptations of one base give identical checkpoints, reports and scores."""
        root, corpus, base = pipeline
        runs = []
        for attempt in ("first", "second"):
            adapted = root / f"repeat_{mode}_{attempt}"
            assert main(["adapt", "--checkpoint", str(base), "--corpus", str(corpus), "--out", str(adapted)]
                        + tiny_args(ADAPTATION__MODE=mode)) == EXIT_OK
            scored = root / f"repeat_{mode}_{attempt}_eval"
            assert main(["eval", "--checkpoint", str(adapted / "adapted.ckpt"), "--corpus", str(corpus),
                         "--out", str(scored)] + tiny_args(ADAPTATION__MODE=mode)) == EXIT_OK
            runs.append((adapted, scored))

        (first, first_eval), (second, second_eval) = runs
        for name in ("adapted.ckpt", "training_report.json", "accounting.json"):
            assert (first / name).read_bytes() == (second / name).read_bytes(), name
        for name in ("eval.csv", "eval.json"):
            assert (first_eval / name).read_bytes() == (second_eval / name).read_bytes(), name
