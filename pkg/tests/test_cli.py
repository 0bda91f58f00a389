import json
import os
import subprocess
import sys

import pytest

from calib_probe import cli

SMALL = [
    "--set", "dataset.counts.train=12", "--set", "dataset.counts.test=6",
    "--set", "dataset.worlds.train=2", "--set", "dataset.worlds.test=1",
    "--set", "dataset.n_boxes=30", "--set", "dataset.forward_extent=40",
]


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error_of(err):
    line = err.strip().splitlines()[-1]
    assert line.startswith("error: ")
    return json.loads(line[len("error: "):])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    assert cli.main(["generate", "--out", str(out), "--seed", "1", *SMALL]) == 0
    return out / "manifest.jsonl"


def test_generate_empty_needs_no_seed(tmp_path, capsys):
    code, out, _ = run(["generate", "--out", tmp_path, "--count", "0"], capsys)
    assert code == 0
    assert json.loads(out)["counts"] == {"train": 0, "val": 0, "test": 0}
    assert (tmp_path / "manifest.jsonl").exists()


def test_generate_requires_seed(tmp_path, capsys):
    code, _, err = run(["generate", "--out", tmp_path, "--count", "3"], capsys)
    assert code == 2 and error_of(err)["type"] == "ConfigError"


def test_unknown_config_key(tmp_path, capsys):
    code, _, err = run(["generate", "--out", tmp_path, "--seed", "1", "--set", "dataset.bogus=1"], capsys)
    assert code == 2 and "bogus" in error_of(err)["message"]
    (tmp_path / "c.yaml").write_text("wat: 1\n")
    code, _, err = run(["experiment", "--id", "E1", "--seed", "1", "--config", tmp_path / "c.yaml"], capsys)
    assert code == 2


def test_bad_arguments_are_config_errors(capsys):
    code, _, err = run(["experiment", "--id", "E9", "--seed", "1"], capsys)
    assert code == 2
    code, _, err = run(["nosuchcommand"], capsys)
    assert code == 2 and error_of(err)["code"] == 2


def test_threads_resolution(monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "3")
    assert cli.resolve_threads(None) == 3
    assert cli.resolve_threads(2) == 2
    monkeypatch.setenv(cli.THREADS_ENV, "zero")
    with pytest.raises(cli.ConfigError):
        cli.resolve_threads(None)
    with pytest.raises(cli.ConfigError):
        cli.resolve_threads(0)
    monkeypatch.delenv(cli.THREADS_ENV)
    assert cli.resolve_threads(None) >= 1


def test_train_eval_inspect(dataset, tmp_path, capsys):
    code, out, _ = run(["train", "--manifest", dataset, "--kind", "linear", "--out", tmp_path / "m.bin"], capsys)
    assert code == 0 and json.loads(out)["n_train"] == 12
    code, out, _ = run(["eval", "--manifest", dataset, "--model", tmp_path / "m.bin", "--out", tmp_path / "ev"], capsys)
    assert code == 0
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert report["experiment"] == "eval" and report["conditions"][0]["n"] == 6
    assert (tmp_path / "ev" / "table.csv").read_text().startswith("condition,")
    code, out, _ = run(["inspect", "--manifest", dataset, "--split", "test", "--index", "2"], capsys)
    info = json.loads(out)
    assert code == 0 and info["camera_id"] == "left" and info["depth"]["n_valid"] > 0
    raster = dataset.parent / info["path"]
    code, out, _ = run(["inspect", "--raster", raster], capsys)
    assert code == 0 and json.loads(out)["stats"]["shape"] == [160, 512]


def test_train_mlp_needs_seed_and_classifier_works(dataset, tmp_path, capsys):
    code, _, err = run(["train", "--manifest", dataset, "--kind", "mlp", "--out", tmp_path / "m.bin"], capsys)
    assert code == 2
    code, _, _ = run(["train", "--manifest", dataset, "--kind", "classifier", "--out", tmp_path / "c.bin"], capsys)
    assert code == 0
    code, _, _ = run(["eval", "--manifest", dataset, "--model", tmp_path / "c.bin", "--out", tmp_path / "ev"], capsys)
    assert code == 0
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert report["accuracy"][0]["n"] == 6 and set(report["accuracy"][0]["accuracy"]) == {"x", "y", "z", "roll", "pitch", "yaw"}


def test_eval_descriptor_mismatch(dataset, tmp_path, capsys):
    run(["train", "--manifest", dataset, "--out", tmp_path / "m.bin"], capsys)
    code, _, err = run(["eval", "--manifest", dataset, "--model", tmp_path / "m.bin", "--out", tmp_path / "ev",
                        "--set", "model.grid_rows=4"], capsys)
    assert code == 2 and "mismatch" in error_of(err)["message"]


def test_data_errors_exit_3(tmp_path, capsys):
    code, _, err = run(["inspect", "--manifest", tmp_path / "missing.jsonl"], capsys)
    assert code == 3
    (tmp_path / "r.dpr").write_bytes(b"junk")
    code, _, err = run(["inspect", "--raster", tmp_path / "r.dpr"], capsys)
    assert code == 3 and error_of(err)["type"] == "DataError"
    code, _, _ = run(["eval", "--manifest", tmp_path / "missing.jsonl", "--model", tmp_path / "m.bin",
                      "--out", tmp_path / "ev"], capsys)
    assert code == 3


def test_experiment_requires_seed(capsys):
    code, _, err = run(["experiment", "--id", "E1"], capsys)
    assert code == 2


def test_experiment_reports_identical_across_processes_and_threads(tmp_path):
    env = dict(os.environ)
    env.pop(cli.THREADS_ENV, None)
    outs = []
    for i, threads in enumerate(["1", "2"]):
        out = tmp_path / f"run{i}"
        subprocess.run([sys.executable, "-m", "calib_probe.cli", "experiment", "--id", "E5", "--seed", "4",
                        "--out", str(out), "--threads", threads, *SMALL], check=True, env=env, capture_output=True)
        outs.append(out)
    for name in ("table.csv", "samples.csv", "report.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    assert json.loads((outs[0] / "timing.json").read_text())["runtime_s"] >= 0
