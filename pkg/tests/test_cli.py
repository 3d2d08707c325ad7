import numpy as np
import pytest
from click.testing import CliRunner

from mmp import dumps
from mmp.executor import Trace
from mmp.scenario import format_scenario, load_scenario, with_overrides
from planner import cli
from tests.conftest import DATA

CORRIDOR = DATA / "corridor_scenario.yaml"


@pytest.fixture(autouse=True)
def no_ledger_env(monkeypatch):
    monkeypatch.setenv("MMP_LEDGER", "")


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def trace_file(tmp_path):
    """Agent 1 sits in the goal region from t = 1 on; agent 2 holds its start"""
    partition = load_scenario(CORRIDOR).partition()
    first = [(0.0, 0.0)] + [(1.5, 0.8660254037844386)] * 4
    second = [(0.0, -1.7320508075688772)] * 5
    positions = np.array([[a, b] for a, b in zip(first, second)])
    regions = np.array(
        [[partition.point_to_region(p) for p in sample] for sample in positions]
    )
    trace = Trace(
        agents=(1, 2),
        times=np.arange(5, dtype=float),
        positions=positions,
        controls=np.zeros_like(positions),
        regions=regions,
    )
    return dumps.write_trace_csv(trace, tmp_path / "trace.csv")


def quick_scenario(tmp_path, **keys):
    scenario = with_overrides(
        load_scenario(CORRIDOR), starts=2, iterations=10, resolve_iterations=3, **keys
    )
    path = tmp_path / "scenario.yaml"
    path.write_text(format_scenario(scenario))
    return path


class TestPartitionCommand:
    def test_writes_partition(self, runner, tmp_path):
        """The partition file lands in the output directory"""
        args = ["partition", "--scenario", str(CORRIDOR), "--out", str(tmp_path)]
        result = runner.invoke(cli, args)
        assert result.exit_code == 0
        assert (tmp_path / "partition.txt").exists()
        assert "regions" in result.output

    def test_invalid_scenario(self, runner, tmp_path):
        """Validation failures exit with status 4"""
        bad = tmp_path / "bad.yaml"
        bad.write_text(CORRIDOR.read_text().replace("sampling: 1/5", "sampling: 3/10"))
        args = ["partition", "--scenario", str(bad), "--out", str(tmp_path)]
        result = runner.invoke(cli, args)
        assert result.exit_code == 4
        assert "line 6" in result.output

    def test_missing_scenario(self, runner, tmp_path):
        """click rejects paths that do not exist"""
        missing = str(tmp_path / "none.yaml")
        result = runner.invoke(cli, ["partition", "--scenario", missing])
        assert result.exit_code == 2


class TestCheckCommand:
    def _check(self, runner, tmp_path, trace_file, *extra):
        args = [
            "check",
            "--scenario",
            str(CORRIDOR),
            "--out",
            str(tmp_path),
            "--trace",
            str(trace_file),
        ]
        return runner.invoke(cli, [*args, *extra])

    def test_satisfied_formula(self, runner, tmp_path, trace_file):
        options = ("--formula", "F[0,4] goal", "--agent", "1")
        result = self._check(runner, tmp_path, trace_file, *options)
        assert result.exit_code == 0
        assert "agent 1: true" in result.output

    def test_violated_formula(self, runner, tmp_path, trace_file):
        options = ("--formula", "G[0,4] goal", "--agent", "1")
        result = self._check(runner, tmp_path, trace_file, *options)
        assert result.exit_code == 1
        assert "agent 1: false" in result.output

    def test_own_formulas_inconclusive(self, runner, tmp_path, trace_file):
        """Agent 2's dock window is still open when the trace ends"""
        result = self._check(runner, tmp_path, trace_file)
        assert result.exit_code == 5
        assert "agent 2: inconclusive" in result.output

    def test_malformed_formula(self, runner, tmp_path, trace_file):
        result = self._check(runner, tmp_path, trace_file, "--formula", "F[0,4 goal")
        assert result.exit_code == 4

    def test_unknown_agent(self, runner, tmp_path, trace_file):
        options = ("--formula", "F[0,4] goal", "--agent", "7")
        result = self._check(runner, tmp_path, trace_file, *options)
        assert result.exit_code == 4

    def test_corrupt_trace(self, runner, tmp_path):
        broken = tmp_path / "broken.csv"
        broken.write_text("not,a,trace\n")
        result = self._check(runner, tmp_path, broken, "--formula", "F[0,4] goal")
        assert result.exit_code == 4


class TestPipelineCommands:
    def test_abstract(self, runner, tmp_path):
        """One layer of exploration per agent"""
        scenario = quick_scenario(tmp_path, max_depth=1)
        out = str(tmp_path / "out")
        args = ["abstract", "--scenario", str(scenario), "--out", out]
        result = runner.invoke(cli, args)
        assert result.exit_code == 0
        assert "agent 1:" in result.output and "centralized: 36" in result.output
        assert (tmp_path / "out" / "agent2_plans.txt").exists()

    def test_unsatisfiable(self, runner, tmp_path):
        """Runs cannot close without a second layer"""
        scenario = quick_scenario(tmp_path, max_depth=1)
        out = str(tmp_path / "out")
        args = ["synthesize", "--scenario", str(scenario), "--out", out]
        result = runner.invoke(cli, args)
        assert result.exit_code == 2
        assert "UnsatisfiableError" in result.output

    def test_infeasible_abstraction(self, runner, tmp_path):
        scenario = quick_scenario(tmp_path, max_depth=0)
        out = str(tmp_path / "out")
        args = ["synthesize", "--scenario", str(scenario), "--out", out]
        result = runner.invoke(cli, args)
        assert result.exit_code == 3

    @pytest.mark.slow
    def test_simulate(self, runner, tmp_path):
        """Synthesis, closed loop and check all pass on the corridor"""
        scenario = quick_scenario(tmp_path, max_depth=2)
        out = tmp_path / "out"
        args = ["simulate", "--scenario", str(scenario), "--out", str(out)]
        result = runner.invoke(cli, args)
        assert result.exit_code == 0, result.output
        assert "passed: yes" in result.output
        names = (
            "partition.txt",
            "trace.csv",
            "report.txt",
            "agent1_run.txt",
            "agent2_tba.txt",
        )
        for name in names:
            assert (out / name).exists()
