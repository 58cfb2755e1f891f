import csv
import io
import json

import pytest

from src.cli.flags import build_parser, flags_for
from src.cli.main import main, synthetic_total
from src.cli.manifest import RunManifest, git_blob_sha1, hash_file
from src.cli.report import PUBLISHED_TAG, build_report
from src.cli.runconfig import read_run_config, resolve, write_run_config
from src.config import settings
from src.errors import ConfigError
from src.network.builder import ModelConfig, build_model
from src.network.serialize import save_model

TINY = ["--size", "16", "--split-fractions", "0.5,0.25,0.25", "--batch-size", "2"]


@pytest.mark.parametrize("command", ["train", "calibrate", "quantize", "eval", "bench", "report"])
def test_help_lists_every_flag(command, capsys):
    assert main([command, "--help"]) == 0
    text = capsys.readouterr().out
    for flag in flags_for(command):
        assert flag.name in text


def test_bad_flags_exit_with_two(capsys):
    assert main(["train", "--activation", "gelu"]) == 2
    assert main(["bench", "--batch-sizes", "2,x"]) == 2
    assert main(["fly"]) == 2


def test_flags_override_the_run_config(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[train]\nepochs = 7\nlr = 0.1\n\n[data]\nsplit-fractions = 0.8,0.1,0.1\n")
    args = build_parser().parse_args(["train", "--epochs", "5"])
    opts = resolve("train", args, read_run_config(path))
    assert opts.epochs == 5
    assert opts.lr == 0.1
    assert opts.split_fractions == (0.8, 0.1, 0.1)
    assert opts.batch_size == 2
    assert opts.seed == settings.EMBER_SEED


def test_run_config_rejects_unknown_and_command_line_only_keys(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[run]\nlearning_rate = 1\n")
    with pytest.raises(ConfigError):
        read_run_config(path)
    path.write_text("[run]\nseed = 3\n")
    with pytest.raises(ConfigError):
        read_run_config(path)
    path.write_text("[a]\nepochs = 1\n[b]\nepochs = 2\n")
    with pytest.raises(ConfigError):
        read_run_config(path)
    path.write_text("[train]\nepochs = many\n")
    with pytest.raises(ConfigError):
        resolve("train", build_parser().parse_args(["train"]), read_run_config(path))


def test_bad_run_config_exits_with_two(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[train]\nepochs = many\n")
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "out")]) == 2


def test_written_run_config_reproduces_the_options(tmp_path):
    args = build_parser().parse_args(["bench", "--batch-sizes", "1,3", "--warmup", "0", "--formats", "json"])
    opts = resolve("bench", args)
    again = resolve("bench", build_parser().parse_args(["bench"]), read_run_config(write_run_config(opts, tmp_path / "r.ini")))
    assert vars(again) == vars(opts)


def test_synthetic_count_sizes_the_training_split():
    assert synthetic_total(32, 0.7) == 46
    assert synthetic_total(7, 0.7) == 10
    assert synthetic_total(4, 1.0) == 4
    with pytest.raises(ConfigError):
        synthetic_total(4, 0.0)


def test_git_blob_hashes():
    assert git_blob_sha1(b"") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"
    assert git_blob_sha1(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_report_keeps_published_rows_apart(tmp_path):
    run = tmp_path / "relu-eval"
    run.mkdir()
    (run / "eval.json").write_text(json.dumps({"model": "relu", "split": "test", "loss": 0.01, "mpa": 0.9, "miou": 0.8}))
    combined = build_report([run])
    assert combined.measured[0].mpa == pytest.approx(90.0)
    assert combined.measured[0].fps is None
    md = combined.markdown()
    for value in ("92.46", "86.98", "59.0", PUBLISHED_TAG):
        assert value in md
    rows = list(csv.DictReader(io.StringIO(combined.csv())))
    assert list(rows[0]) == ["origin", "source", "variant", "split", "loss", "mpa", "miou", "fps"]
    assert rows[0]["origin"] == "measured"
    assert {r["origin"] for r in rows[1:]} == {PUBLISHED_TAG}
    with pytest.raises(ConfigError):
        build_report([tmp_path / "missing"])


def test_default_output_directory_follows_settings(tmp_path, monkeypatch):
    (tmp_path / "eval.json").write_text(json.dumps({"model": "m", "split": "val", "mpa": 0.5, "miou": 0.4}))
    monkeypatch.setattr(settings, "PROJECT_ROOT", str(tmp_path))
    monkeypatch.setattr(settings, "RUNS_DIR", "runs")
    assert main(["report", "--inputs", str(tmp_path / "eval.json")]) == 0
    out = tmp_path / "runs" / "report"
    assert (out / "report.md").exists()
    manifest = RunManifest.load(out)
    assert manifest.command == "report"
    assert {a.path for a in manifest.outputs} == {"report.md", "report.csv", "run.ini"}
    assert manifest.inputs == []


def test_missing_data_is_a_configuration_error(tmp_path):
    assert main(["train", "--out", str(tmp_path)]) == 2
    assert main(["train", "--synthetic", "4", "--manifest", "x.tsv", "--out", str(tmp_path)]) == 2


def test_int8_layer_without_statistics_fails_with_its_name(tmp_path, capsys):
    model = save_model(build_model(ModelConfig(input_size=(16, 16))), tmp_path / "model.emb")
    policy = tmp_path / "policy.ini"
    policy.write_text("[int8_forced]\nresidual = false\nsensitive = decoder.classifier\n")
    code = main(["quantize", "--model", str(model), "--policy", str(policy), "--out", str(tmp_path / "q")])
    assert code == 2
    assert "decoder.classifier" in capsys.readouterr().err


def test_unknown_policy_layer_exits_with_two(tmp_path):
    model = save_model(build_model(ModelConfig(input_size=(16, 16))), tmp_path / "model.emb")
    policy = tmp_path / "policy.ini"
    policy.write_text("[layers]\nno.such.layer = fp32\n")
    assert main(["quantize", "--model", str(model), "--policy", str(policy), "--out", str(tmp_path / "q")]) == 2


def test_train_eval_and_report(tmp_path):
    train_dir = tmp_path / "train"
    assert main(["train", "--synthetic", "4", "--epochs", "1", "--bottlenecks", "1", "--out", str(train_dir), *TINY]) == 0
    for name in ("model.emb", "history.csv", "manifest.json", "run.ini"):
        assert (train_dir / name).exists()
    assert (train_dir / "checkpoint" / "meta.json").exists()
    history = (train_dir / "history.csv").read_text().splitlines()
    assert [line.split(",")[2] for line in history[1:]] == ["train", "train", "val", "test"]

    manifest = RunManifest.load(train_dir)
    hashes = manifest.output_hashes()
    assert hashes["model.emb"] == hash_file(train_dir / "model.emb")

    eval_dir = tmp_path / "eval"
    args = ["eval", "--model", str(train_dir / "model.emb"), "--synthetic", "4", "--split", "all", "--out", str(eval_dir)]
    assert main([*args, *TINY]) == 0
    metrics = json.loads((eval_dir / "eval.json").read_text())
    assert metrics["images"] == 8
    assert sum(map(sum, metrics["confusion"])) == 8 * 16 * 16
    assert "timing.json" not in RunManifest.load(eval_dir).output_hashes()

    report_dir = tmp_path / "report"
    assert main(["report", "--inputs", f"{train_dir},{eval_dir}", "--out", str(report_dir)]) == 0
    md = (report_dir / "report.md").read_text()
    assert "| measured | train | relu | test |" in md
    assert "| measured | eval | model | all |" in md


@pytest.mark.slow
def test_full_pipeline(tmp_path):
    data = ["--synthetic", "8", *TINY]
    assert main(["train", "--epochs", "2", "--out", str(tmp_path / "t"), *data]) == 0
    model = str(tmp_path / "t" / "model.emb")
    assert main(["calibrate", "--model", model, "--out", str(tmp_path / "c"), *data]) == 0
    calibration = str(tmp_path / "c" / "calibration.json")
    assert main(["quantize", "--model", model, "--calibration", calibration, "--out", str(tmp_path / "q"), *data]) == 0
    report = json.loads((tmp_path / "q" / "precision_report.json").read_text())
    assert report["bytes_after"] < report["bytes_before"]
    assert report["forward_eps"] is not None
    quantized = str(tmp_path / "q" / "quantized.emb")
    bench = ["bench", "--model", model, "--quantized", quantized, "--batch-sizes", "1,2", "--warmup", "0", "--measured", "2"]
    assert main([*bench, "--workers", "2", "--out", str(tmp_path / "b")]) == 0
    result = json.loads((tmp_path / "b" / "bench.json").read_text())
    assert result["memory"]["inference"]["events"] <= result["memory"]["training"]["events"]
    assert result["parallel_workers"] == 2
    assert main(["report", "--inputs", ",".join(str(tmp_path / d) for d in "tqb"), "--out", str(tmp_path / "r")]) == 0
