import csv
import io
import json

import numpy as np
import pytest

from fhtctrl import cli
from fhtctrl.config import load_config
from fhtctrl.workflow import SolvedStack

TINY = {"variant": "1d", "m": 4, "K": 2, "q": 3, "q_action": 3, "rank": 3, "operator_rank": 3, "n_samples": 400,
        "n_operator_samples": 2000, "als_rounds": 2, "n_substeps": 5}


def read_rows(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# command=")
    return list(csv.DictReader(io.StringIO("\n".join(lines[1:]))))


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    run = root / "run"
    assert cli.main(["solve", "--config", str(cfg), "--seed", "3", "--output", str(run)]) == 0
    return run


def test_solve_writes_stack_trace_and_timings(tiny_run):
    names = {p.name for p in tiny_run.iterdir()}
    assert {"meta.json", "qk_0.fht", "qk_1.fht", "vk_0.fht", "vk_1.fht", "loss_trace.csv", "timings.json"} <= names
    rows = read_rows(tiny_run / "loss_trace.csv")
    assert {r["target"] for r in rows} == {"q", "v"} and {r["k"] for r in rows} == {"0", "1"}
    assert all(float(r["data_term"]) >= 0 and float(r["regularizer_term"]) >= 0 for r in rows)
    assert "total" in json.loads((tiny_run / "timings.json").read_text())
    assert SolvedStack.load(tiny_run).meta["config"]["seed"] == 3


def test_config_errors_are_all_listed(tmp_path, capsys):
    out = tmp_path / "never"
    code = cli.main(["solve", "--set", "m=6", "--set", "rank=0", "--set", "regularizer=\"l1\"", "--output", str(out)])
    err = capsys.readouterr().err
    assert code == 2
    assert "m must be" in err and "rank must be" in err and "regularizer must be" in err
    assert not out.exists()


def test_unknown_key_and_missing_source(tmp_path, capsys):
    assert cli.main(["solve", "--set", "colour=1", "--output", str(tmp_path / "a")]) == 2
    assert "unknown key 'colour'" in capsys.readouterr().err
    assert cli.main(["solve"]) == 2
    assert cli.main(["solve", "--config", str(tmp_path / "missing.json")]) == 2


def test_overrides_are_json_valued():
    assert cli._parse_overrides(["K=3", "lam=0.5", "noise=false", "variant=2d", "reg_mu=null"]) == \
        {"K": 3, "lam": 0.5, "noise": False, "variant": "2d", "reg_mu": None}
    with pytest.raises(cli.ConfigError):
        cli._parse_overrides(["K"])


def test_eval_q_without_reference(tiny_run, tmp_path):
    out = tmp_path / "q.csv"
    assert cli.main(["eval-q", "--run", str(tiny_run), "--n-mc", "0", "--n-actions", "5", "--out", str(out)]) == 0
    rows = read_rows(out)
    assert len(rows) == 10 and [r["point"] for r in rows[::5]] == ["y+", "y-"]
    assert all(r["q_mc"] == "" and r["rel_err"] == "" for r in rows)
    stack = SolvedStack.load(tiny_run)
    np.testing.assert_allclose(float(rows[0]["q_fht"]), stack.action_value(1, np.ones((1, 4)), -1.0)[0], rtol=1e-13)


def test_eval_q_points_file_and_bad_step(tiny_run, tmp_path):
    pts = tmp_path / "pts.csv"
    np.savetxt(pts, np.zeros((2, 4)), delimiter=",")
    out = tmp_path / "q.csv"
    assert cli.main(["eval-q", "--run", str(tiny_run), "--points", str(pts), "--n-mc", "10", "--n-actions", "1",
                     "--k", "0", "--out", str(out)]) == 0
    rows = read_rows(out)
    assert [r["point"] for r in rows] == ["0", "1"] and all(r["q_mc"] for r in rows)
    assert cli.main(["eval-q", "--run", str(tiny_run), "--k", "5", "--n-mc", "0"]) == 2
    assert cli.main(["eval-q", "--run", str(tiny_run), "--points", "y0", "--n-mc", "0"]) == 2


def test_eval_v_single_point(tiny_run, tmp_path):
    out = tmp_path / "v.csv"
    assert cli.main(["eval-v", "--run", str(tiny_run), "--n-points", "1", "--n-rollouts", "4", "--out", str(out)]) == 0
    rows = read_rows(out)
    assert len(rows) == 1 and rows[0]["kind"] == "uniform" and rows[0]["within_3se"] in ("True", "False")


def test_hist_two_particles(tiny_run, tmp_path):
    out = tmp_path / "h.csv"
    assert cli.main(["hist", "--run", str(tiny_run), "--n-particles", "2", "--out", str(out)]) == 0
    rows = read_rows(out)
    assert [r["group"] for r in rows] == ["policy", "policy", "control", "control"]
    assert [r["start"] for r in rows[:2]] == ["uniform", "segment"]
    assert all(float(r["final_sq_norm"]) >= 0 for r in rows)


def test_header_line(tiny_run, tmp_path):
    out = tmp_path / "h.csv"
    cli.main(["hist", "--run", str(tiny_run), "--n-particles", "2", "--out", str(out)])
    cfg = load_config(overrides=dict(TINY, seed=3))
    assert out.read_text().splitlines()[0] == f"# command=hist config_hash={cfg.config_hash()} seed=3"


def test_missing_run_is_a_usage_error(tmp_path, capsys):
    assert cli.main(["eval-v", "--run", str(tmp_path / "nothing")]) == 2
    assert "no solved run" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exit_code(tmp_path, capsys):
    # a huge state box makes the first simulation overflow
    cfg = tmp_path / "huge.json"
    cfg.write_text(json.dumps(dict(TINY, box=1e200, K=1)))
    assert cli.main(["solve", "--config", str(cfg), "--output", str(tmp_path / "r")]) == 3
    assert "numerical failure" in capsys.readouterr().err


def test_thread_cap_sources(monkeypatch, tmp_path):
    args = cli.build_parser().parse_args(["hist", "--run", "x"])
    monkeypatch.delenv(cli.THREADS_ENV, raising=False)
    assert cli._thread_cap(args) is None
    monkeypatch.setenv(cli.THREADS_ENV, "2")
    assert cli._thread_cap(args) == 2
    args = cli.build_parser().parse_args(["--threads", "1", "hist", "--run", "x"])
    assert cli._thread_cap(args) == 1
    monkeypatch.setenv(cli.THREADS_ENV, "many")
    assert cli.main(["hist", "--run", str(tmp_path)]) == 2


def test_mc_reference_matches_deterministic_oracle(tmp_path):
    # frozen dynamics and no running cost: the reference is the terminal cost exactly
    cfg = tmp_path / "frozen.json"
    cfg.write_text(json.dumps(dict(TINY, potential="zero", noise=False, gain=0.0, state_weight=0.0,
                                   action_weight=0.0)))
    out = tmp_path / "mc.csv"
    assert cli.main(["mc-ref", "--config", str(cfg), "--points", "y+,zero", "--n-actions", "3", "--n-mc", "50",
                     "--out", str(out)]) == 0
    rows = read_rows(out)
    assert [float(r["q_mc"]) for r in rows] == [1.0] * 3 + [0.0] * 3
    assert all(float(r["q_mc_stderr"]) == 0.0 for r in rows)
    assert cli.main(["mc-ref", "--config", str(cfg), "--n-mc", "1"]) == 2


def test_module_entry_point():
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "fhtctrl", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "solve" in res.stdout
