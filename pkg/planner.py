#!/usr/bin/env python3
"""
Mission Planner CLI

Usage:
    python planner.py partition --scenario data/corridor_scenario.yaml --out out/
    python planner.py abstract --scenario data/three_agent_scenario.yaml --out out/
    python planner.py synthesize --scenario data/three_agent_scenario.yaml --out out/
    python planner.py simulate --scenario data/three_agent_scenario.yaml --out out/ \
        --horizon-cycles 2
    python planner.py check --scenario data/three_agent_scenario.yaml \
        --trace out/trace.csv --formula "F[7.5,22] green" --agent 2
"""

import asyncio
import sys
from pathlib import Path

import click

# Load environment variables from .env file
try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    print(
        "Warning: python-dotenv not installed. "
        "Make sure environment variables are set manually."
    )

sys.path.insert(0, str(Path(__file__).parent))

from mmp.errors import ScenarioError  # noqa: E402
from mmp.main import EXIT_INVALID, MissionPlanner  # noqa: E402


def _planner(scenario: str, out: str, **overrides) -> MissionPlanner:
    try:
        return MissionPlanner.from_file(scenario, out_dir=out, **overrides)
    except ScenarioError as e:
        click.echo(f"❌ Invalid scenario: {e}", err=True)
        sys.exit(EXIT_INVALID)


def _finish(result: dict) -> None:
    if not result["success"]:
        error_type = result.get("error_type", "Error")
        click.echo(f"❌ {error_type}: {result.get('error', 'check failed')}", err=True)
    sys.exit(result["exit_code"])


scenario_option = click.option(
    "--scenario",
    "scenario",
    required=True,
    type=click.Path(exists=True, dir_okay=False),
    help="Scenario file (mmp-scenario v1)",
)
out_option = click.option(
    "--out",
    "out",
    default="out",
    show_default=True,
    type=click.Path(file_okay=False),
    help="Directory for text artifacts",
)
seed_option = click.option(
    "--seed",
    type=int,
    default=None,
    help="Seed for the solver's start offsets and sweeps",
)
starts_option = click.option(
    "--solver-starts",
    "solver_starts",
    type=int,
    default=None,
    help="Override the number of solver starts",
)


@click.group()
def cli():
    """Decentralized MITL mission planner for coupled agents"""


@cli.command()
@scenario_option
@out_option
def partition(scenario, out):
    """Write the labelled hexagonal partition"""
    result = _planner(scenario, out).write_partition()
    if result["success"]:
        click.echo(f"✅ {result['regions']} regions -> {result['path']}")
    _finish(result)


@cli.command()
@scenario_option
@out_option
@seed_option
@starts_option
def abstract(scenario, out, seed, solver_starts):
    """Build every agent's weighted transition system"""
    planner = _planner(scenario, out, seed=seed, starts=solver_starts)
    result = asyncio.run(planner.abstract())
    if result["success"]:
        for agent, stats in sorted(result["statistics"].items()):
            click.echo(
                f"agent {agent}: {stats['states']} states, "
                f"{stats['transitions']} transitions, "
                f"{stats['calls']} controller calls, {stats['solves']} solves"
            )
        totals = result["totals"]
        click.echo(
            f"total: {totals['calls']} controller calls, {totals['solves']} solves "
            f"(centralized: {totals['centralized_per_step']} problems per region step)"
        )
    _finish(result)


@cli.command()
@scenario_option
@out_option
@seed_option
@starts_option
def synthesize(scenario, out, seed, solver_starts):
    """Find an accepting run for every agent"""
    planner = _planner(scenario, out, seed=seed, starts=solver_starts)
    result = asyncio.run(planner.synthesize())
    if result["success"]:
        for agent, synthesis in sorted(result["results"].items()):
            run = synthesis.region_run
            click.echo(
                f"agent {agent}: prefix {list(run.prefix)} cycle {list(run.cycle)}"
            )
    _finish(result)


@cli.command()
@scenario_option
@out_option
@seed_option
@starts_option
@click.option(
    "--horizon-cycles",
    "horizon_cycles",
    type=int,
    default=None,
    help="Cycle executions after the prefix (scenario value by default)",
)
def simulate(scenario, out, seed, solver_starts, horizon_cycles):
    """Synthesize, execute in closed loop and check the trace"""
    planner = _planner(scenario, out, seed=seed)
    result = asyncio.run(
        planner.simulate(horizon_cycles=horizon_cycles, solver_starts=solver_starts)
    )
    if "report" in result:
        click.echo(result["report"].format(), nl=False)
    _finish(result)


@cli.command()
@scenario_option
@out_option
@click.option(
    "--trace",
    "trace",
    required=True,
    type=click.Path(exists=True, dir_okay=False),
    help="Trace CSV written by simulate",
)
@click.option(
    "--formula",
    default=None,
    help="Formula to check; each agent's own formula when omitted",
)
@click.option(
    "--agent", type=int, default=None, help="Agent whose trajectory is checked"
)
def check(scenario, out, trace, formula, agent):
    """Evaluate formulas on a recorded trace"""
    result = _planner(scenario, out).check(trace, formula=formula, agent=agent)
    for subject, verdict in sorted(result.get("verdicts", {}).items()):
        click.echo(f"agent {subject}: {verdict}")
    _finish(result)


def main():
    """Main CLI entry point"""
    cli()


if __name__ == "__main__":
    main()
