import json

import pytest

from gmcopt import __version__
from gmcopt.cli import EXIT_ACCEPT, EXIT_OK, EXIT_USAGE, main
from gmcopt.dataset import load_dataset


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    path = d / "data.csv"
    assert main(["gen-data", "--count", "16", "--seed", "3", "--resolution", "16", "--out", str(path)]) == EXIT_OK
    return path


def test_no_command_is_usage_error():
    assert main([]) == EXIT_USAGE


def test_bad_flags_exit_with_usage_code():
    with pytest.raises(SystemExit) as e:
        main(["gen-data", "--resolution", "-3"])
    assert e.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == EXIT_USAGE


def test_zero_count_is_usage_error(tmp_path):
    assert main(["gen-data", "--count", "0", "--out", str(tmp_path / "x.csv")]) == EXIT_USAGE
    assert main(["gen-data", "--count", "4", "--zeta", "thick", "--out", str(tmp_path / "x.csv")]) == EXIT_USAGE


def test_gen_data_is_byte_identical_on_rerun(tiny_data, tmp_path):
    again = tmp_path / "again.csv"
    assert main(["gen-data", "--count", "16", "--seed", "3", "--resolution", "16", "--out", str(again)]) == EXIT_OK
    assert again.read_bytes() == tiny_data.read_bytes()
    ds = load_dataset(tiny_data)
    assert ds.header["config"]["seed"] == 3
    assert ds.header["version"] == __version__


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text('[gen-data]\ncount = 5\nseed = 9\nresolution = 16\n\n[material]\nnu = 0.25\n')
    out = tmp_path / "c.csv"
    assert main(["gen-data", "--config", str(cfg), "--seed", "2", "--out", str(out)]) == EXIT_OK
    ds = load_dataset(out)
    assert len(ds) == 5
    assert ds.header["seed"] == 2 and ds.header["nu"] == 0.25
    (tmp_path / "broken.toml").write_text("count = = 3")
    assert main(["gen-data", "--config", str(tmp_path / "broken.toml")]) == EXIT_USAGE


def test_train_failure_writes_model_and_exits_3(tiny_data, tmp_path, capsys):
    out = tmp_path / "m.json"
    code = main(["train", "--data", str(tiny_data), "--max-iter", "1", "--accept", "1e-9", "--out", str(out)])
    assert code == EXIT_ACCEPT
    text = capsys.readouterr().out
    assert "L33" in text and "FAIL" in text
    doc = json.loads(out.read_text())
    assert doc["meta"]["config"]["max_iter"] == 1
    assert set(doc["networks"]) == {"L11", "L21", "L31", "L22", "L32", "L33"}


def test_train_missing_data(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope.csv")]) == EXIT_USAGE


def test_optimize_missing_model(tmp_path):
    assert main(["optimize", "--model", str(tmp_path / "nope.json"), "--out-dir", str(tmp_path / "r")]) == EXIT_USAGE


def test_report_empty_run_dir(tmp_path):
    assert main(["report", "--run", str(tmp_path)]) == EXIT_USAGE


def test_verify_needs_run(tmp_path):
    assert main(["verify", "--suite", "design", "--run", str(tmp_path / "missing")]) == EXIT_USAGE


def test_optimize_and_report_end_to_end(tiny_data, tmp_path):
    model = tmp_path / "m.json"
    main(["train", "--data", str(tiny_data), "--max-iter", "5", "--accept", "1", "--out", str(model)])
    run = tmp_path / "run"
    args = ["optimize", "--model", str(model), "--nx", "20", "--ny", "10", "--zones", "8", "--max-iter", "4", "--out-dir", str(run)]
    assert main(args) == EXIT_OK
    rep = json.loads((run / "report.json").read_text())
    assert rep["config"]["zones"] == 8 and rep["version"] == __version__
    assert (run / "macro_final.vtk").exists()
    first = (run / "report.json").read_text()
    assert main(args) == EXIT_OK
    a, b = json.loads(first), json.loads((run / "report.json").read_text())
    for doc in (a, b):
        doc.pop("wall_time_s")
        for row in doc["history"]:
            row.pop("time_s", None)
    assert a == b
    out = tmp_path / "timing.json"
    assert main(["report", "--run", str(run), "--zones", "2,8", "--repeats", "1", "--no-direct", "--out", str(out)]) == EXIT_OK
    assert [r["zones"] for r in json.loads(out.read_text())["rows"]] == [2, 8]
