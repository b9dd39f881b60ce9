import csv
import io
import json

import numpy as np
import pytest

from fbsde_co import verify
from fbsde_co.cli import main, table_csv
from fbsde_co.nets import MLPConfig, Network, init_params, save_checkpoint
from fbsde_co.trainer import aggregate, read_history_csv

FAST = ["--problem", "paper-market-linear", "--n", "2", "--T", "0.25", "--m-train", "8", "--m-test", "16",
        "--time-points", "3"]


@pytest.fixture(autouse=True)
def _serial(monkeypatch):
    monkeypatch.setenv("FBSDE_CO_THREADS", "1")


def _read_csv(path):
    return list(csv.reader(io.StringIO(path.read_text(encoding="utf-8"))))


def test_run_with_zero_steps(tmp_path, capsys):
    out = tmp_path / "r"
    assert main(["run", *FAST, "--maxstep", "0", "--seeds", "1,2", "--out", str(out)]) == 0
    histories = sorted((out / "histories").glob("*.csv"))
    assert [p.stem for p in histories] == ["co_n2_T0.25_k19_s1", "co_n2_T0.25_k19_s2"]
    for p in histories:
        assert len(read_history_csv(p.read_text())) == 1
    table = _read_csv(out / "table.csv")
    assert table[0] == ["n", "stat", "T=0.25"]
    assert [r[1] for r in table[1:]] == ["inte_mean", "inte_var", "para_mean", "para_var",
                                         "distance_mean", "distance_var"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["maxstep"] == 0 and manifest["failures"] == {}
    assert "inte_mean" in capsys.readouterr().out


def test_table_cells_recompute_from_histories(tmp_path):
    out = tmp_path / "r"
    assert main(["run", *FAST, "--maxstep", "4", "--kappa", "1", "--eval-interval", "2", "--seeds", "0,1,2",
                 "--baseline", "classical", "--out", str(out)]) == 0
    finals = {p.stem: read_history_csv(p.read_text())[-1] for p in (out / "histories").glob("*.csv")}
    co = [r for tag, r in finals.items() if tag.startswith("co_")]
    clas = [r for tag, r in finals.items() if tag.startswith("classical_")]
    rows = {r[1]: r[2] for r in _read_csv(out / "table.csv")[1:]}
    assert float(rows["inte_mean"]) == aggregate([r.inte_y0 for r in co])["mean"]
    assert float(rows["distance_var"]) == aggregate([r.distance for r in co])["var"]
    assert float(rows["clas_mean"]) == aggregate([r.inte_y0 for r in clas])["mean"]


def test_manifest_config_reproduces_histories(tmp_path):
    first = tmp_path / "a"
    assert main(["run", *FAST, "--maxstep", "4", "--kappa", "1", "--out", str(first)]) == 0
    config = json.loads((first / "manifest.json").read_text())["config"]
    config["out"] = str(tmp_path / "b")
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps(config))
    assert main(["run", "--config", str(cfg_file)]) == 0
    for path in (first / "histories").glob("*.csv"):
        a = read_history_csv(path.read_text())
        b = read_history_csv((tmp_path / "b" / "histories" / path.name).read_text())
        assert [r.inte_y0 for r in a] == [r.inte_y0 for r in b]
        assert [r.J_follower for r in a] == [r.J_follower for r in b]


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"maxstep": 999, "n": [2], "T": [0.25], "m_train": 8, "m_test": 8,
                               "time_points": 2, "out": str(tmp_path / "o")}))
    assert main(["run", "--config", str(cfg), "--maxstep", "0"]) == 0
    assert json.loads((tmp_path / "o" / "config.json").read_text())["maxstep"] == 0


@pytest.mark.parametrize("argv, flag", [
    (["--kappa", "0"], "--kappa"),
    (["--problem", "nope"], "--problem"),
    (["--maxstep", "7"], "maxstep"),
    (["--baseline", "classical", "--problem", "paper-market-nonlinear"], "--baseline"),
    (["--seeds", ""], "--seeds"),
])
def test_usage_errors_name_the_flag(argv, flag, capsys, tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["run", *FAST, "--maxstep", "20", *argv, "--out", str(tmp_path)])
    assert info.value.code == 2
    assert flag in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"kapa": 3}))
    with pytest.raises(SystemExit):
        main(["run", "--config", str(cfg)])
    assert "kapa" in capsys.readouterr().err


def test_sweep_dedupes_and_writes_table(tmp_path):
    out = tmp_path / "s"
    assert main(["sweep", *FAST, "--maxstep", "0", "--kappa", "1,1/1,1/3,2/6", "--seeds", "0,1",
                 "--out", str(out)]) == 0
    rows = _read_csv(out / "sweep_n2_T0.25.csv")
    assert rows[0] == ["kappa", "metric", "mean", "var", "runs"]
    assert [r[0] for r in rows[1:]] == ["1"] * 3 + ["1/3"] * 3
    assert all(r[4] == "2" for r in rows[1:])
    single = tmp_path / "one"
    assert main(["sweep", *FAST, "--maxstep", "0", "--kappa", "4", "--out", str(single)]) == 0
    assert len(_read_csv(single / "sweep_n2_T0.25.csv")) == 1 + 3


def test_dump_paths_and_checkpoints(tmp_path):
    out = tmp_path / "r"
    assert main(["run", *FAST, "--maxstep", "0", "--dump-paths", "2", "--checkpoints", "--out", str(out)]) == 0
    rows = _read_csv(next((out / "paths").glob("*.csv")))
    assert rows[0][:4] == ["sample", "step", "t", "x0"] and len(rows) == 1 + 2 * 4
    ckpt = next((out / "checkpoints").glob("*.ckpt"))
    assert verify.check_checkpoint("f64", ckpt)[0] == "PASS"


def test_divergence_exits_nonzero_with_seed(tmp_path, capsys, monkeypatch):
    from fbsde_co import cli
    from fbsde_co.optim import DivergenceError

    def boom(problem, config, nets=None, callback=None):
        raise DivergenceError(f"non-finite cost at iteration 3 (seed {config.seed})")

    monkeypatch.setattr(cli, "co_train", boom)
    assert main(["run", *FAST, "--maxstep", "0", "--seeds", "7", "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "_s7" in err and "iteration 3" in err


def test_table_layout_with_missing_cells():
    cells = {(10, 0.25): {"inte": aggregate([1.0, 2.0])}}
    rows = list(csv.reader(io.StringIO(table_csv(cells, [10, 20], [0.25, 0.5]))))
    assert rows[0] == ["n", "stat", "T=0.25", "T=0.5"]
    assert rows[1] == ["10", "inte_mean", "1.5", ""]
    assert rows[3] == ["20", "inte_mean", "", ""]


def test_verify_precision_rules():
    assert verify.check_gradients("f32")[0] == "SKIP"
    assert verify.check_determinism("f32")[0] == "SKIP"


def test_verify_names_corrupted_layer(tmp_path, capsys):
    cfg = MLPConfig(3, (5, 5), 2)
    path = tmp_path / "bad.ckpt"
    save_checkpoint(path, {"pi": Network(cfg, init_params(cfg, 0))})
    path.write_bytes(path.read_bytes()[:-30])
    status, detail = verify.check_checkpoint("f64", path)
    assert status == "FAIL" and "role 'pi' layer" in detail


def test_verify_reports_instead_of_raising(monkeypatch):
    def broken(precision):
        raise RuntimeError("kaboom")

    monkeypatch.setattr(verify, "CHECKS", (("broken", broken), ("fine", lambda p: ("PASS", "ok"))))
    lines = []
    assert verify.run_checks("f64", out=lines.append) == 1
    assert lines[0].startswith("FAIL broken: RuntimeError") and lines[1] == "PASS fine: ok"
    assert lines[2].startswith("PASS checkpoint")


@pytest.mark.slow
def test_verify_cli_all_pass(capsys):
    assert main(["verify"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 8 and all(line.startswith("PASS") for line in lines)


@pytest.mark.slow
def test_verify_cli_f32_skips(capsys):
    code = main(["verify", "--precision", "f32"])
    out = capsys.readouterr().out
    assert "SKIP gradient-check" in out and "FAIL" not in out and code == 0
