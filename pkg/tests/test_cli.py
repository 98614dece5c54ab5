import logging

import pytest
from click.testing import CliRunner

from gridincentives.cli import EXIT_DIVERGED, EXIT_INFEASIBLE, EXIT_INPUT, main
from gridincentives.fileformat import read_table


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture(autouse=True)
def restore_logging():
    root = logging.getLogger()
    handlers, level = root.handlers[:], root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


def one_bus_files(directory, *scenario_metadata, beta="3.0"):
    """Network, prosumers and scenario files of the single-bus feeder."""
    network = directory / "network.csv"
    network.write_text(
        "#! gridincentives network 1\n"
        "#@ base_mva = 1.0\n"
        "#@ base_kv = 12.66\n"
        "parent,child,r_pu,x_pu\n"
        "0,1,0.1,0.05\n"
    )
    prosumers = directory / "prosumers.csv"
    prosumers.write_text(
        "#! gridincentives prosumers 1\n"
        "bus,alpha,beta,r_pu,q_pu,d_min_pu,d_max_pu\n"
        f"1,2.0,{beta},0,0,0,inf\n"
    )
    scenario = directory / "scenario.csv"
    scenario.write_text(
        "\n".join(
            [
                "#! gridincentives scenario 1",
                "#@ pi = 1.0",
                "#@ v_min = 0.8",
                "#@ v_max = 1.2",
                "#@ p0_min_pu = -10",
                *scenario_metadata,
                "iteration,event,bus,capacity_pu",
            ]
        )
        + "\n"
    )
    return [
        "--network",
        str(network),
        "--prosumers",
        str(prosumers),
        "--scenario",
        str(scenario),
    ]


def test_algorithms_lists_every_controller(runner):
    result = runner.invoke(main, ["algorithms"])
    assert result.exit_code == 0
    for name in ("dual_ascent", "first_order", "zero_order"):
        assert name in result.output


def test_solve_the_bundled_feeder(runner, tmp_path):
    result = runner.invoke(main, ["solve", "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    table = read_table(tmp_path / "solution.csv", "solution")
    assert len(table.rows) == 32
    assert float(table.metadata["min_voltage"]) >= 0.95 - 1e-6
    assert "p0_max" in table.metadata["active"].split()


def test_solve_one_bus(runner, tmp_path):
    files = one_bus_files(tmp_path, "#@ p0_max_pu = 1.1")
    result = runner.invoke(main, ["solve", *files, "--out", str(tmp_path / "out")])
    assert result.exit_code == 0, result.output
    table = read_table(tmp_path / "out" / "solution.csv", "solution")
    [(_, row)] = table.rows
    assert float(row["xi"]) == pytest.approx(0.2, abs=1e-8)
    assert float(table.metadata["mu_up"]) == pytest.approx(0.6, abs=1e-6)


def test_beta_below_the_retail_rate_is_an_input_error(runner, tmp_path):
    files = one_bus_files(tmp_path, "#@ p0_max_pu = 10", beta="0.5")
    result = runner.invoke(main, ["solve", *files, "--out", str(tmp_path / "out")])
    assert result.exit_code == EXIT_INPUT
    assert "bus 1" in result.output
    assert "below the retail rate" in result.output


def test_missing_input_file_is_an_input_error(runner, tmp_path):
    result = runner.invoke(
        main, ["solve", "--network", str(tmp_path / "absent.csv"), "--out", str(tmp_path)]
    )
    assert result.exit_code == EXIT_INPUT
    assert "cannot read file" in result.output


def test_contradictory_limits_exit_as_infeasible(runner, tmp_path):
    files = one_bus_files(tmp_path, "#@ p0_max_pu = -0.5")
    result = runner.invoke(main, ["solve", *files, "--out", str(tmp_path / "out")])
    assert result.exit_code == EXIT_INFEASIBLE
    assert "p0_max" in result.output


def test_run_writes_trace_and_summary(runner, tmp_path):
    result = runner.invoke(
        main, ["run", "--algo", "dual", "--epsilon", "0.5", "--out", str(tmp_path)]
    )
    assert result.exit_code == 0, result.output
    assert "Effective seed: 7" in result.output
    assert "Iterations to feasible:" in result.output
    trace = read_table(tmp_path / "trace_dual.csv", "trace")
    assert trace.metadata["algorithm"] == "dual_ascent"
    assert trace.metadata["epsilon"] == "0.5"
    summary = read_table(tmp_path / "summary_dual.csv", "summary")
    [(_, row)] = summary.rows
    assert row["diverged"] == "false"
    assert int(row["iterations"]) == len(trace.rows)


def test_run_overrides_seed_and_budget(runner, tmp_path):
    result = runner.invoke(
        main,
        ["run", "--algo", "zero", "--seed", "11", "--max-iters", "25", "--out", str(tmp_path)],
    )
    assert result.exit_code == 0, result.output
    assert "Effective seed: 11" in result.output
    assert len(read_table(tmp_path / "trace_zero.csv", "trace").rows) == 25


@pytest.mark.parametrize(
    "arguments",
    [
        ["--epsilon", "0"],
        ["--algo", "newton"],
        ["--sigma", "-1"],
        ["--max-iters", "0"],
        ["--sensitivities", "guessed"],
    ],
)
def test_invalid_run_options(runner, tmp_path, arguments):
    result = runner.invoke(main, ["run", *arguments, "--out", str(tmp_path)])
    assert result.exit_code == EXIT_INPUT


def test_run_with_estimated_sensitivities(runner, tmp_path):
    arguments = ["--algo", "first", "--sensitivities", "estimated", "--max-iters", "20"]
    result = runner.invoke(main, ["-v", "run", *arguments, "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    assert "estimated" in result.output
    assert len(read_table(tmp_path / "trace_first.csv", "trace").rows) == 20


def test_divergence_exits_with_its_own_code(runner, tmp_path):
    files = one_bus_files(tmp_path, "#@ p0_max_pu = 1.1", "#@ divergence_guard = 100")
    out = tmp_path / "out"
    result = runner.invoke(
        main, ["run", *files, "--algo", "dual", "--epsilon", "1000", "--out", str(out)]
    )
    assert result.exit_code == EXIT_DIVERGED
    assert "Diverged" in result.output
    summary = read_table(out / "summary_dual.csv", "summary")
    assert summary.rows[0][1]["diverged"] == "true"


def test_compare_runs_every_controller(runner, tmp_path):
    result = runner.invoke(
        main, ["compare", "--max-iters", "200", "--epsilon", "dual=0.1", "--out", str(tmp_path)]
    )
    assert result.exit_code == 0, result.output
    for short in ("dual", "first", "zero"):
        assert (tmp_path / f"trace_{short}.csv").exists()
        assert (tmp_path / f"summary_{short}.csv").exists()
    table = read_table(tmp_path / "compare.csv", "compare")
    assert "zero_p0" in table.header
    assert len(table.rows) == 200
    assert read_table(tmp_path / "trace_dual.csv", "trace").metadata["epsilon"] == "0.1"


@pytest.mark.parametrize("value", ["foo", "newton=0.1", "dual=fast"])
def test_compare_rejects_bad_step_sizes(runner, tmp_path, value):
    result = runner.invoke(main, ["compare", "--epsilon", value, "--out", str(tmp_path)])
    assert result.exit_code == 2
    assert "--epsilon" in result.output


def test_output_directory_from_the_environment(runner, tmp_path):
    out = tmp_path / "from_env"
    result = runner.invoke(main, ["solve"], env={"GRIDINCENTIVES_OUT": str(out)})
    assert result.exit_code == 0, result.output
    assert (out / "solution.csv").exists()


def test_verbose_logging(runner, tmp_path):
    result = runner.invoke(
        main, ["-vv", "run", "--algo", "first", "--max-iters", "5", "--out", str(tmp_path)]
    )
    assert result.exit_code == 0, result.output
    assert "running" in result.output
