import asyncio
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

from mmp import dumps
from mmp.errors import (
    AlphabetMismatchError,
    ClosedLoopInfeasibleError,
    FormulaSyntaxError,
    InfeasibleAbstractionError,
    IntervalError,
    NotFlatError,
    PlannerError,
    ScenarioError,
    UnsatisfiableError,
)
from mmp.executor import (
    Trace,
    abstract_all,
    check_formula,
    check_trace,
    simulate_closed_loop,
    synthesize_all_async,
)
from mmp.ledger import RunLedger
from mmp.mitl import parse_mitl, propositions
from mmp.scenario import Scenario, load_scenario
from mmp.settings import configure_logging, ledger_path

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_UNSATISFIABLE = 2
EXIT_INFEASIBLE = 3
EXIT_INVALID = 4
EXIT_INCONCLUSIVE = 5

INVALID_INPUT = (
    ScenarioError,
    FormulaSyntaxError,
    IntervalError,
    NotFlatError,
    AlphabetMismatchError,
)


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, UnsatisfiableError):
        return EXIT_UNSATISFIABLE
    if isinstance(error, (InfeasibleAbstractionError, ClosedLoopInfeasibleError)):
        return EXIT_INFEASIBLE
    if isinstance(error, INVALID_INPUT):
        return EXIT_INVALID
    return EXIT_FAILED


def _failure(error: BaseException, exit_code: Optional[int] = None) -> Dict[str, Any]:
    return {
        "success": False,
        "error": str(error),
        "error_type": type(error).__name__,
        "exit_code": exit_code_for(error) if exit_code is None else exit_code,
    }


class MissionPlanner:
    """Main planner application: scenario in, artifacts and verdicts out"""

    def __init__(
        self,
        scenario: Scenario,
        out_dir: Optional[Union[str, Path]] = None,
        ledger: Optional[RunLedger] = None,
        **solver_overrides: Any,
    ):
        configure_logging()
        self.scenario = scenario
        self.out_dir = Path(out_dir) if out_dir else None
        self.ledger = ledger if ledger is not None else RunLedger(ledger_path())
        self.solver_overrides = solver_overrides
        self._partition = None

    @classmethod
    def from_file(cls, path: Union[str, Path], **kwargs: Any) -> "MissionPlanner":
        return cls(load_scenario(path), **kwargs)

    @property
    def partition(self):
        if self._partition is None:
            self._partition = self.scenario.partition()
        return self._partition

    def solver_config(self, **overrides: Any):
        return self.scenario.solver_config(**{**self.solver_overrides, **overrides})

    def write_partition(self) -> Dict[str, Any]:
        try:
            path = dumps.write_partition(self.out_dir or ".", self.partition)
        except PlannerError as e:
            logger.error(f"Partition failed: {e}")
            return _failure(e)
        return {
            "success": True,
            "regions": len(self.partition),
            "path": str(path),
            "exit_code": EXIT_OK,
        }

    async def abstract(self) -> Dict[str, Any]:
        """Abstraction only; agents without transitions still succeed"""
        try:
            config = self.solver_config()
            abstractions = await asyncio.to_thread(
                abstract_all, self.scenario, config, self.partition
            )
            if self.out_dir:
                dumps.write_partition(self.out_dir, self.partition)
                for agent, (matrix, wts) in abstractions.items():
                    dumps.write_text(self.out_dir, f"agent{agent}_wts.txt", wts.dump())
                    dumps.write_text(
                        self.out_dir, f"agent{agent}_plans.txt", matrix.dump_plans()
                    )
            statistics = {
                agent: {
                    "states": len(wts.states),
                    "transitions": len(wts.transitions()),
                    "calls": matrix.calls,
                    "solves": matrix.solves,
                    "successes": matrix.successes,
                }
                for agent, (matrix, wts) in abstractions.items()
            }
            statistics_total = {
                "calls": sum(s["calls"] for s in statistics.values()),
                "solves": sum(s["solves"] for s in statistics.values()),
                "centralized_per_step": 6 ** len(statistics),
            }
        except PlannerError as e:
            logger.error(f"Abstraction failed: {e}")
            self.ledger.log_stage(
                "abstract",
                input_data={"scenario": self.scenario.name},
                success=False,
                error_message=str(e),
            )
            return _failure(e)
        return {
            "success": True,
            "abstractions": abstractions,
            "statistics": statistics,
            "totals": statistics_total,
            "exit_code": EXIT_OK,
        }

    async def synthesize(self) -> Dict[str, Any]:
        """Runs and plans for every agent, written to the output directory if set"""
        try:
            config = self.solver_config()
            results = await synthesize_all_async(
                self.scenario, config, self.partition, self.ledger
            )
            if self.out_dir:
                dumps.write_partition(self.out_dir, self.partition)
                dumps.write_synthesis(self.out_dir, results)
        except PlannerError as e:
            logger.error(f"Synthesis failed: {e}")
            return _failure(e)
        logger.info(f"Synthesis succeeded for agents {sorted(results)}")
        return {"success": True, "results": results, "exit_code": EXIT_OK}

    async def simulate(
        self, horizon_cycles: Optional[int] = None, solver_starts: Optional[int] = None
    ) -> Dict[str, Any]:
        """
        Synthesize, then run the closed loop and check the resulting trace

        solver_starts overrides only the closed-loop re-solve budget.

        Returns:
            Dict with the trace, the report and an exit code that is 0 only when
            the report passes
        """
        synthesis = await self.synthesize()
        if not synthesis["success"]:
            return synthesis
        results = synthesis["results"]
        try:
            config = self.solver_config(starts=solver_starts)
            trace = await asyncio.to_thread(
                simulate_closed_loop,
                self.scenario,
                results,
                config,
                horizon_cycles,
                self.partition,
            )
            report = check_trace(trace, self.scenario, results, self.partition)
        except PlannerError as e:
            logger.error(f"Simulation failed: {e}")
            self.ledger.log_stage(
                "simulate",
                input_data={"horizon_cycles": horizon_cycles},
                success=False,
                error_message=str(e),
            )
            return _failure(e)
        self.ledger.log_stage(
            "simulate",
            input_data={"horizon_cycles": horizon_cycles},
            output_data={
                "samples": len(trace.times),
                "duration": trace.duration,
                "passed": report.passed,
                "verdicts": report.verdicts,
            },
            success=report.passed,
        )
        if self.out_dir:
            dumps.write_trace_csv(trace, self.out_dir / "trace.csv")
            dumps.write_text(self.out_dir, "report.txt", report.format())
        exit_code = EXIT_OK if report.passed else EXIT_FAILED
        undecided = all(v != "false" for v in report.verdicts.values())
        realized = report.connected and report.terminal_ok and not report.exits
        if not report.passed and realized and undecided:
            exit_code = EXIT_INCONCLUSIVE
        return {
            "success": report.passed,
            "results": results,
            "trace": trace,
            "report": report,
            "exit_code": exit_code,
        }

    def check(
        self,
        trace: Union[Trace, str, Path],
        formula: Optional[str] = None,
        agent: Optional[int] = None,
    ) -> Dict[str, Any]:
        """
        Verdict of one formula (or of every agent's own formula) on a recorded trace

        Letters come from the scenario's labels; a formula given without an
        agent is evaluated on the first agent of the trace.
        """
        request = {"formula": formula, "agent": agent}
        try:
            if not isinstance(trace, Trace):
                trace = dumps.read_trace_csv(trace)
            if formula is None:
                report = check_trace(trace, self.scenario, partition=self.partition)
                verdicts = dict(report.verdicts)
            else:
                parsed = parse_mitl(formula)
                subject = agent if agent is not None else trace.agents[0]
                if subject not in trace.agents:
                    raise ScenarioError(f"trace has no agent {subject}")
                verdict = check_formula(
                    trace,
                    self.partition,
                    self.scenario.period,
                    subject,
                    parsed,
                    propositions(parsed),
                )
                verdicts = {subject: verdict}
        except (PlannerError, ValueError, OSError) as e:
            logger.error(f"Check failed: {e}")
            self.ledger.log_stage(
                "check", input_data=request, success=False, error_message=str(e)
            )
            if isinstance(e, PlannerError):
                return _failure(e)
            return _failure(e, EXIT_INVALID)
        self.ledger.log_stage(
            "check",
            input_data=request,
            output_data=verdicts,
            success=all(v == "true" for v in verdicts.values()),
        )
        values = set(verdicts.values())
        if values == {"true"}:
            exit_code = EXIT_OK
        elif "false" in values:
            exit_code = EXIT_FAILED
        else:
            exit_code = EXIT_INCONCLUSIVE
        return {
            "success": exit_code == EXIT_OK,
            "verdicts": verdicts,
            "exit_code": exit_code,
        }
