import json

import pytest

from ofdmaseg import cli
from ofdmaseg.cli import main, resolve_config

from pipeline import run_and_rerun


def test_version(capsys):
    assert main(["--version"]) == 0
    text = capsys.readouterr().out
    assert text.startswith("ofdmaseg ") and "checkpoint format" in text


def test_no_command_and_bad_flags_are_usage_errors():
    assert main([]) == cli.EXIT_USAGE
    assert main(["dataset", "--bogus", "1"]) == cli.EXIT_USAGE
    assert main(["dataset", "--n-base", "x", "--out", "o"]) == cli.EXIT_USAGE
    assert main(["eval", "--out", "o"]) == cli.EXIT_USAGE


def test_precedence_flag_env_config_default(tmp_path):
    cfg_file = tmp_path / "c.toml"
    cfg_file.write_text("[dataset]\nn_base = 7\nseed = 3\njobs = 2\n")
    env = {"OFDMASEG_SEED": "9", "OFDMASEG_JOBS": "5"}
    cfg = resolve_config("dataset", {"config": str(cfg_file), "out": "x", "jobs": 1}, env)
    assert cfg["n_base"] == 7 and cfg["seed"] == 9 and cfg["jobs"] == 1 and cfg["fft_size"] == 64


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("n_bse = 3\n")
    assert main(["dataset", "--config", str(bad), "--out", str(tmp_path / "o")]) == cli.EXIT_INPUT
    assert main(["dataset", "--config", str(tmp_path / "none.toml"), "--out", "o"]) == cli.EXIT_INPUT
    other = tmp_path / "other.toml"
    other.write_text('command = "train"\n')
    assert main(["dataset", "--config", str(other), "--out", "o"]) == cli.EXIT_INPUT


def test_missing_inputs_exit_3(tmp_path):
    assert main(["eval", "--out", str(tmp_path / "e"), "--model", str(tmp_path / "m.ckpt"),
                 "--data", str(tmp_path)]) == cli.EXIT_INPUT


def test_unwritable_output_exit_4(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["synth", "--out", str(blocker / "sub")]) == cli.EXIT_OUTPUT


def test_coexist_summary(capsys):
    assert main(["coexist"]) == 0
    out = capsys.readouterr().out
    assert "RAN1 SINR 2.2 dB" in out and "RAN2 SINR 2.1 dB" in out


def test_bad_coexist_options(tmp_path):
    assert main(["coexist", "--scenario", "city"]) == cli.EXIT_USAGE
    assert main(["coexist", "--out", str(tmp_path), "--detector", "ml", "--n-symbols", "10000",
                 "--snr-grid", "0"]) == cli.EXIT_USAGE


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("pipe")
    return base, run_and_rerun(base)


def test_every_stage_succeeds_and_reruns_identically(pipeline_runs):
    _, results = pipeline_runs
    for stage, (codes, first, second) in results.items():
        assert codes == (0, 0), stage
        assert first == second, stage


def test_stage_outputs(pipeline_runs):
    base, _ = pipeline_runs
    d = base / "first"
    for rel in ("synth/image.png", "synth/mask.png", "synth/iq.bin", "synth/meta.json",
                "dataset/header.json", "dataset/manifest.jsonl", "train/model.ckpt", "train/train_log.csv",
                "eval/report.json", "sweep/sweep.csv", "sweep/summary.json", "infer/pred_mask.png",
                "infer/overlay.png", "coexist/ber.csv", "coexist/sinr.json"):
        assert (d / rel).is_file(), rel
        assert (d / rel.split("/")[0] / cli.LOCK_NAME).is_file()
    report = json.loads((d / "eval" / "report.json").read_text())
    assert report["n_pixels"] == sum(map(sum, report["confusion"]))
    lock = (d / "dataset" / cli.LOCK_NAME).read_text()
    assert 'command = "dataset"' in lock and "out =" not in lock


def test_infer_accepts_png_and_rejects_garbage(pipeline_runs, tmp_path):
    base, _ = pipeline_runs
    model = str(base / "first" / "train" / "model.ckpt")
    assert main(["infer", "--out", str(tmp_path / "a"), "--model", model,
                 "--input", str(base / "first" / "synth" / "image.png")]) == 0
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"\x00" * 7)
    assert main(["infer", "--out", str(tmp_path / "b"), "--model", model, "--input", str(junk)]) == cli.EXIT_INPUT
