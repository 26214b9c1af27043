import dataclasses
import json
import math
from pathlib import Path

import numpy as np
import pytest

from saddlemix import cli, harness, problems
from saddlemix.harness import RunConfig
from saddlemix.oracle import ContractError
from saddlemix.trace import COLUMNS, TraceRow, read_trace, render_trace, trace_body, write_trace

pytestmark = pytest.mark.usefixtures("quiet_descent")

# a small, fast synthetic mix run
SMALL = ["n=40", "d=8", "T=3", "gfo_iters=80", "M=1e-2", "eps=1e-4", "gamma=5e-4"]


def small_args(tmp_path, name="t.csv", extra=()):
    args = []
    for s in SMALL + [f"output={tmp_path / name}", *extra]:
        args += ["--set", s]
    return args


# ---------------------------------------------------------------------------
# trace files


def test_empty_trace_is_header_only(tmp_path):
    path = tmp_path / "e.csv"
    write_trace([], path)
    body = trace_body(path)
    assert body == ",".join(COLUMNS) + "\n"
    assert read_trace(path)[1] == []


def test_trace_round_trip_exact(tmp_path):
    rows = [TraceRow(0, 0, 5, 0, 0, 0.1, 1 / 3, None, "hfo"),
            TraceRow(1, 7, 9, 12, 3, -1e-300, math.pi, -2.5e-17, "check"),
            TraceRow(1, 2, 11, 12, 5, 123456.789, 0.0, 1e300, "gfo")]
    path = tmp_path / "r.csv"
    write_trace(rows, path, {"k": "v"}, timing="rows")
    header, back = read_trace(path)
    assert back == rows
    assert header["k"] == "v"


def test_timing_header_zeroes_body_column():
    rows = [TraceRow(0, 0, 123, 0, 0, 1.0, 1.0, None, "gfo")]
    text = render_trace(rows)
    assert "# total_wall_ns=123" in text
    assert text.splitlines()[-1].split(",")[2] == "0"
    with pytest.raises(ValueError):
        render_trace(rows, timing="never")


def test_write_error_names_path(tmp_path):
    bad = tmp_path / "missing" / "x.csv"
    with pytest.raises(OSError, match="missing"):
        write_trace([], bad)


def test_trace_rejects_foreign_columns(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_trace(path)


# ---------------------------------------------------------------------------
# config parsing


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("# comment\nmethod = sgd\nstep = 0.01  # inline\ncubic.M = 1e-2\nM=none\n")
    cfg = harness.load_config(path)
    assert cfg.method == "sgd" and cfg.step == 0.01 and cfg.M is None
    assert cfg.overrides == {"cubic": {"M": 1e-2}}
    assert cfg.for_method("cubic").M == 1e-2
    cfg = harness.apply_settings(cfg, [("step", "0.5"), ("gfo_iters", "1e3")])
    assert cfg.step == 0.5 and cfg.gfo_iters == 1000


@pytest.mark.parametrize("pairs", [[("bogus", "1")], [("n", "ten")], [("budget_fatal", "maybe")],
                                   [("nosuch.M", "1")]])
def test_bad_settings_raise(pairs):
    with pytest.raises(ContractError):
        harness.apply_settings(RunConfig(), pairs)


def test_validate_rejects_bad_values():
    for bad in (dict(method="newton"), dict(problem="mnist"), dict(problem="file"),
                dict(T=0), dict(timing="never"), dict(start="edge")):
        with pytest.raises(ContractError):
            dataclasses.replace(RunConfig(), **bad).validate()


@pytest.mark.parametrize("argv", [
    ["run", "--set", "nokey=1"],
    ["run", "--set", "novalue"],
    ["run", "--set", "method=newton"],
    ["run", "--config", "/nonexistent/config.txt"],
    ["compare", "--methods", "sgd,newton"],
])
def test_cli_usage_errors_exit_1(argv, capsys):
    assert cli.main(argv) == cli.EXIT_USAGE
    assert "error" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# runs


def test_run_writes_trace_and_summary(tmp_path, capsys):
    assert cli.main(["run", *small_args(tmp_path)]) == 0
    header, rows = read_trace(tmp_path / "t.csv")
    summary = json.loads((tmp_path / "t.csv.summary.json").read_text())
    assert summary == json.loads(capsys.readouterr().out)
    assert header["config.n"] == "40"
    assert "saddlemix_version" in header and "ranking_unit" in header
    assert sum(r.phase == "hfo" for r in rows) >= 3
    for col in ("ifo", "iso", "wall_ns"):
        vals = [getattr(r, col) for r in rows]
        assert vals == sorted(vals)
    assert summary["ifo"] == rows[-1].ifo and summary["iso"] == rows[-1].iso


def test_run_twice_identical_bodies(tmp_path):
    assert cli.main(["run", *small_args(tmp_path, "a.csv")]) == 0
    assert cli.main(["run", *small_args(tmp_path, "b.csv")]) == 0
    assert trace_body(tmp_path / "a.csv") == trace_body(tmp_path / "b.csv")


def test_replay_from_trace_header(tmp_path):
    assert cli.main(["run", *small_args(tmp_path, "a.csv", ["seed=3"])]) == 0
    replay = tmp_path / "replay.csv"
    assert cli.main(["run", "--config", str(tmp_path / "a.csv"),
                     "--set", f"output={replay}"]) == 0
    assert trace_body(tmp_path / "a.csv") == trace_body(replay)


@pytest.mark.parametrize("method", ["sgd", "gd", "adam", "svrg", "cubic", "approx-cubic"])
def test_pure_methods_run(method, tmp_path):
    cfg = RunConfig(n=20, d=5, T=2, gfo_iters=20, M=1e-2, solver_max_iters=200,
                    method=method, output=str(tmp_path / "x.csv"))
    outcome = harness.run_to_files(cfg)
    assert len(outcome.rows) == 3
    assert outcome.summary["method"] == method
    assert np.all(np.isfinite(outcome.final_x))


def test_budget_flag_and_fatal_exit(tmp_path):
    args = small_args(tmp_path, extra=["max_ifo=100", "T=50"])
    assert cli.main(["run", *args]) == 0
    summary = json.loads((tmp_path / "t.csv.summary.json").read_text())
    assert summary["budget_exhausted"]
    assert cli.main(["run", *args, "--set", "budget_fatal=true"]) == cli.EXIT_BUDGET


def test_numeric_failure_exits_2(tmp_path):
    args = small_args(tmp_path, extra=["method=gd", "step=50", "start_radius=1"])
    with np.errstate(over="ignore", invalid="ignore"):
        assert cli.main(["run", *args]) == cli.EXIT_NUMERIC


def test_generate_and_load(tmp_path):
    path = tmp_path / "p.npz"
    assert cli.main(["generate", "--out", str(path), "--set", "n=12", "--set", "d=4"]) == 0
    loaded = problems.load_problem(path)
    fresh = problems.generate_synthetic(12, 4, 0)
    np.testing.assert_array_equal(loaded.A, fresh.A)
    out = tmp_path / "f.csv"
    assert cli.main(["run", "--set", "problem=file", "--set", f"problem_path={path}",
                     "--set", "T=1", "--set", "gfo_iters=10", "--set", f"output={out}"]) == 0


def test_compare_table(tmp_path, capsys):
    out = tmp_path / "cmp.csv"
    args = small_args(tmp_path, extra=["solver_max_iters=200"])
    assert cli.main(["compare", *args, "--methods", "sgd,svrg,cubic,mix", "--out", str(out),
                     "--prefix", str(tmp_path / "c_")]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == ",".join(harness.SUMMARY_COLUMNS)
    assert [ln.split(",")[0] for ln in lines[1:]] == ["sgd", "svrg", "cubic", "mix"]
    assert (tmp_path / "c_mix.csv").exists()
    assert capsys.readouterr().out == out.read_text()


def test_validate_command_passes(capsys):
    assert cli.main(["validate", "--pairs", "5"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "origin_spectrum" in out


def test_validate_flags_a_broken_problem():
    class Broken(problems.SeparableQuadratic):
        def hvp(self, i, x, v):
            return 2 * super().hvp(i, x, v)

        def mean_hvp(self, x, v):
            return 2 * super().mean_hvp(x, v)

    rows = harness.validate_problems({"broken": Broken([1.0, 2.0])}, pairs=3)
    assert not all(passed for *_, passed in rows)


# ---------------------------------------------------------------------------
# grid search


def quad_template():
    return RunConfig(problem="quadratic", n=4, d=3, method="gd", T=30, gfo_iters=1, start="zero")


def test_grid_single_cell():
    prob = problems.SeparableQuadratic([1.0, 2.0], n=2)
    best, table = harness.grid_search(prob, quad_template(), {"step": [0.1]})
    assert best.step == 0.1 and len(table) == 1


def test_grid_gd_stable_step_wins():
    prob = problems.SeparableQuadratic([1.0, 2.0], n=2)
    L = prob.lipschitz_grad
    x0_cfg = dataclasses.replace(quad_template(), start="saddle", start_radius=1.0)
    best, table = harness.grid_search(prob, x0_cfg, {"step": [1 / L, 2.5 / L]})
    assert best.step == 1 / L
    unstable = next(r for r in table if r["cell"]["step"] == 2.5 / L)
    assert unstable["final_f"] > prob.mean_value(harness.start_point(x0_cfg, prob))


def test_grid_all_diverge():
    prob = problems.SeparableQuadratic([1.0, 2.0], n=2)
    cfg = dataclasses.replace(quad_template(), start="saddle", start_radius=1.0, T=2000)
    with pytest.raises(harness.GridError) as info, np.errstate(over="ignore", invalid="ignore"):
        harness.grid_search(prob, cfg, {"step": [5.0, 10.0]})
    assert len(info.value.table) == 2 and all(r["diverged"] for r in info.value.table)
    with pytest.raises(ContractError):
        harness.grid_search(prob, cfg, {})


def test_grid_adam_tied_desk_winner():
    cfg = RunConfig(method="adam", T=5, gfo_iters=1000)
    best, table = harness.grid_search(harness.build_problem(cfg), cfg,
                                      {"adam_alpha": [1e-1, 1e-2, 1e-3]}, tied=True)
    assert (best.adam_alpha, best.adam_eps) == (1e-3, 1e-3)
    assert all(r["cell"]["adam_eps"] == r["cell"]["adam_alpha"] for r in table)
    winner = min(r["final_f"] for r in table)
    assert winner == pytest.approx(1.7227089500784577e-05, rel=1e-9)


def test_grid_cli(tmp_path, capsys):
    args = ["--set", "problem=quadratic", "--set", "n=4", "--set", "d=3", "--set", "method=gd",
            "--set", "T=10", "--set", "gfo_iters=1", "--set", "start_radius=1",
            "--set", f"output={tmp_path / 'g.csv'}"]
    assert cli.main(["grid", *args, "--axis", "step=0.1,0.5"]) == 0
    assert capsys.readouterr().out.splitlines()[-1] == 'best {"step": 0.5}'


def test_desk_compare_example_config():
    cfg = harness.load_config(Path(__file__).parents[1] / "configs" / "desk_compare.txt")
    table = {r["method"]: r for r in harness.compare(harness.build_problem(cfg), cfg,
                                                     ["sgd", "adam", "svrg", "cubic", "mix"])}
    mix = table["mix"]
    for first_order in ("sgd", "adam", "svrg"):
        assert table[first_order]["ifo"] >= mix["ifo"]
        assert mix["final_f"] <= table[first_order]["final_f"]
    assert abs(mix["final_f"] - table["cubic"]["final_f"]) <= 1e-4
    assert mix["iso"] <= table["cubic"]["iso"] / 10
