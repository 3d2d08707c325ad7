"""
Synthesis orchestration and closed-loop realization

synthesize_all runs the per-agent pipeline (abstraction, automaton, product,
lasso search). simulate_closed_loop then drives every agent along its run on
the shared grid t_k = kT: inside each interval the agents re-solve at every
sampling instant with the true positions of their neighbors, and the coupled
system is integrated with the first input piece of each solution.
"""

import asyncio
import logging
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from mmp.abstraction import WTS, TransitMatrix, build_wts, create_transition_relation
from mmp.dynamics import AgentContext, CoupledSystem, rho
from mmp.errors import (
    ClosedLoopInfeasibleError,
    OutOfWorkspaceError,
    TerminalDesignError,
)
from mmp.geometry import Partition
from mmp.graph import neighbor_snapshot, run_synthesis
from mmp.ledger import RunLedger
from mmp.mitl import Formula, TimedWord, evaluate
from mmp.product import AcceptingRun, BuchiWTS, RegionRun, project_run
from mmp.rocp import (
    ControlSignal,
    CostWeights,
    ROCPInstance,
    SolverConfig,
    TerminalIngredients,
    TransitionPlan,
    cost_decrease_slack,
    design_terminal,
    solve_rocp,
)
from mmp.scenario import Scenario
from mmp.tba import TBA

logger = logging.getLogger(__name__)

OUTSIDE = -1


def abstract_agent(
    scenario: Scenario, partition: Partition, config: SolverConfig, agent: int
) -> Tuple[TransitMatrix, WTS]:
    ctx = scenario.context(agent)
    matrix = create_transition_relation(
        ctx,
        partition,
        scenario.agent(agent).initial,
        scenario.cost_weights(),
        config,
        neighbor_snapshot(scenario, partition, agent),
        scenario.steps,
        scenario.sampling,
    )
    wts = build_wts(matrix, partition, scenario.period, scenario.alphabet(agent))
    return matrix, wts


def abstract_all(
    scenario: Scenario, config: SolverConfig, partition: Optional[Partition] = None
) -> Dict[int, Tuple[TransitMatrix, WTS]]:
    """Per-agent abstractions; agents are independent"""
    partition = partition or scenario.partition()
    abstractions = {
        agent: abstract_agent(scenario, partition, config, agent)
        for agent in scenario.agent_ids
    }
    calls = sum(matrix.calls for matrix, _ in abstractions.values())
    solves = sum(matrix.solves for matrix, _ in abstractions.values())
    logger.info(
        f"abstraction_total agents={len(abstractions)} calls={calls} "
        f"solves={solves} centralized_per_step={6 ** len(abstractions)}"
    )
    return abstractions


@dataclass(eq=False)
class SynthesisResult:
    agent: int
    formula: Formula
    matrix: TransitMatrix
    wts: WTS
    tba: TBA
    product: BuchiWTS
    run: AcceptingRun
    region_run: RegionRun

    @property
    def plans(self) -> List[TransitionPlan]:
        """Plans along the stored lasso, including the transition closing the cycle"""
        regions = self.region_run.regions()
        pairs = list(zip(regions, regions[1:]))
        if self.region_run.cycle:
            pairs.append((regions[-1], self.region_run.cycle[0]))
        return [self.wts.plan(src, dst) for src, dst in pairs]

    @property
    def controls(self) -> ControlSignal:
        plans = self.plans
        if not plans:
            return ControlSignal(Fraction(0), np.zeros((0, 2)))
        values = np.concatenate([p.controls.values for p in plans])
        return ControlSignal(plans[0].controls.step, values)

    def summary(self) -> Dict[str, object]:
        return {
            "agent": self.agent,
            "wts_states": len(self.wts.states),
            "wts_transitions": len(self.wts.transitions()),
            "tba_locations": len(self.tba.locations),
            "product_states": len(self.product),
            "product_transitions": self.product.graph.number_of_edges(),
            "prefix": list(self.region_run.prefix),
            "cycle": list(self.region_run.cycle),
        }


async def synthesize_all_async(
    scenario: Scenario,
    config: Optional[SolverConfig] = None,
    partition: Optional[Partition] = None,
    ledger: Optional[RunLedger] = None,
) -> Dict[int, SynthesisResult]:
    """
    Abstraction, automaton, product and accepting run for every agent

    Raises:
        UnsatisfiableError: an agent's product has an empty language
        InfeasibleAbstractionError: an agent cannot leave its initial region
        PlannerError: any other stage failure, for the lowest failing agent id
    """
    config = config or scenario.solver_config()
    partition = partition or scenario.partition()
    states = await run_synthesis(scenario, partition, config, ledger or RunLedger(None))
    results = {}
    for agent in sorted(states):
        state = states[agent]
        if state.get("error") is not None:
            raise state["error"]
        results[agent] = SynthesisResult(
            agent=agent,
            formula=scenario.formula(agent),
            matrix=state["matrix"],
            wts=state["wts"],
            tba=state["tba"],
            product=state["product"],
            run=state["run"],
            region_run=project_run(state["product"], state["run"]),
        )
    return results


def synthesize_all(
    scenario: Scenario,
    config: Optional[SolverConfig] = None,
    partition: Optional[Partition] = None,
    ledger: Optional[RunLedger] = None,
) -> Dict[int, SynthesisResult]:
    return asyncio.run(synthesize_all_async(scenario, config, partition, ledger))


# ---------------------------------------------------------------- closed loop


@dataclass(frozen=True)
class TransitionRecord:
    agent: int
    k: int
    source: int
    target: int
    terminal_error: float
    r_term: float

    @property
    def reached(self) -> bool:
        return self.terminal_error <= self.r_term


@dataclass(eq=False)
class Trace:
    """Dense-grid samples; positions, controls and regions in agent order"""

    agents: Tuple[int, ...]
    times: np.ndarray
    positions: np.ndarray
    controls: np.ndarray
    regions: np.ndarray
    transitions: List[TransitionRecord] = field(default_factory=list)
    monitor: Dict[int, Counter] = field(default_factory=dict)
    exits: List[Tuple[int, float]] = field(default_factory=list)

    def column(self, agent: int) -> int:
        return self.agents.index(agent)

    @property
    def duration(self) -> float:
        return float(self.times[-1]) if len(self.times) else 0.0

    def sample_at(self, t) -> Optional[int]:
        """Index of the sample taken at time t, None when the grid has no such sample"""
        t = float(t)
        tolerance = 1e-9 * max(1.0, abs(t))
        index = int(np.searchsorted(self.times, t - tolerance))
        if index < len(self.times) and abs(self.times[index] - t) <= tolerance:
            return index
        return None

    def period_samples(self, period: Fraction) -> List[int]:
        indices = []
        mu = 0
        while period * mu <= self.duration + 1e-9:
            index = self.sample_at(period * mu)
            if index is None:
                break
            indices.append(index)
            mu += 1
        return indices

    def relaxed_word(
        self,
        agent: int,
        partition: Partition,
        period: Fraction,
        alphabet: Optional[Iterable[str]] = None,
    ) -> TimedWord:
        """Letters of the regions occupied at t = mu T, timestamps mu T"""
        sigma = frozenset(alphabet) if alphabet is not None else None
        column = self.column(agent)
        pairs = []
        for mu, index in enumerate(self.period_samples(period)):
            region = int(self.regions[index, column])
            letter = partition.labels(region) if region != OUTSIDE else frozenset()
            pairs.append((letter & sigma if sigma is not None else letter, period * mu))
        return TimedWord.finite(pairs)

    def crossings(self, agent: int) -> List[Tuple[float, int]]:
        """(time, region) at the start and at every region change"""
        column = self.column(agent)
        out = []
        for index, region in enumerate(self.regions[:, column]):
            if not out or out[-1][1] != int(region):
                out.append((float(self.times[index]), int(region)))
        return out


def _region_of(partition: Partition, point: np.ndarray) -> int:
    try:
        return partition.point_to_region(point)
    except OutOfWorkspaceError:
        return OUTSIDE


def _reference(partition: Partition, region: int) -> np.ndarray:
    return np.asarray(partition.region(region).reference, dtype=float)


def current_terminal(
    ctx: AgentContext,
    weights: CostWeights,
    partition: Partition,
    plan: TransitionPlan,
    estimates: np.ndarray,
    config: SolverConfig,
    k: int,
    counts: Counter,
) -> TerminalIngredients:
    """
    Terminal ingredients re-designed for the neighbor positions measured at t_k

    Falls back to the plan's ingredients, counted as a terminal monitor event,
    when no local controller passes for the current positions.
    """
    try:
        return design_terminal(ctx, weights, partition, plan.target, estimates, config)
    except TerminalDesignError as e:
        counts["terminal"] += 1
        logger.warning(
            f"terminal_monitor agent={ctx.agent} k={k} target={plan.target} "
            f"fallback=plan reason={e}"
        )
        return plan.terminal


def simulate_closed_loop(
    scenario: Scenario,
    results: Dict[int, SynthesisResult],
    config: Optional[SolverConfig] = None,
    horizon_cycles: Optional[int] = None,
    partition: Optional[Partition] = None,
) -> Trace:
    """
    Co-simulate all agents along their accepting runs

    The horizon covers each run's prefix plus horizon_cycles executions of its
    cycle; agents with shorter runs keep following their cycles until the
    longest one completes.

    Raises:
        ClosedLoopInfeasibleError: a re-solve found no admissible input
    """
    config = config or scenario.solver_config()
    partition = partition or scenario.partition()
    cycles = horizon_cycles or scenario.horizon_cycles
    system = CoupledSystem(scenario.dynamics_specs(), scenario.bounds)
    agents = system.agents
    contexts = {a: scenario.context(a) for a in agents}
    weights = scenario.cost_weights()
    steps, step, period = scenario.steps, scenario.sampling, scenario.period
    dt = step / config.dense_substeps
    count = max(
        len(results[a].region_run.prefix) + cycles * len(results[a].region_run.cycle)
        for a in agents
    )
    routes = {a: results[a].region_run.regions(count + 1) for a in agents}
    neighbor_rows = {
        a: [system.index(j) for j in contexts[a].neighbors] for a in agents
    }

    x = np.array([scenario.agent(a).initial for a in agents], dtype=float)
    positions = [x.copy()]
    controls: List[np.ndarray] = []
    times = [Fraction(0)]
    transitions: List[TransitionRecord] = []
    monitor = {a: Counter() for a in agents}
    exits: Dict[int, float] = {}

    for k in range(count):
        t_k = period * k
        plans = {
            a: results[a].wts.plan(routes[a][k], routes[a][k + 1]) for a in agents
        }
        terminals = {
            a: current_terminal(
                contexts[a],
                weights,
                partition,
                plans[a],
                x[neighbor_rows[a]].reshape(-1, 2),
                config,
                k,
                monitor[a],
            )
            for a in agents
        }
        warm = {a: plans[a].controls.values for a in agents}
        last_cost: Dict[int, float] = {}
        for z in range(steps):
            pieces = np.zeros_like(x)
            for n, a in enumerate(agents):
                plan, ctx = plans[a], contexts[a]
                error = x[n] - _reference(partition, plan.target)
                inst = ROCPInstance(
                    ctx=ctx,
                    partition=partition,
                    k=k,
                    z=z,
                    steps=steps,
                    step=step,
                    error=error,
                    neighbor_estimates=x[neighbor_rows[a]].reshape(-1, 2),
                    source=plan.source,
                    direction=plan.direction,
                    tightening=config.tightening,
                    t_k=t_k,
                )
                budget = config.iterations if z == 0 else config.resolve_iterations
                solution = solve_rocp(
                    inst,
                    weights,
                    terminals[a],
                    config,
                    warm_start=warm[a],
                    iterations=budget,
                )
                if solution is None:
                    logger.error(f"closed_loop agent={a} k={k} z={z} feasible=False")
                    raise ClosedLoopInfeasibleError(a, k, z)
                e0_norm = float(np.linalg.norm(error))
                deviation = rho(ctx, float(inst.horizon), e0_norm)
                if config.robust and deviation > terminals[a].rho_bar:
                    monitor[a]["rho"] += 1
                    logger.warning(
                        f"rho_monitor agent={a} k={k} z={z} closed_loop=True"
                    )
                if a in last_cost:
                    slack = cost_decrease_slack(
                        ctx, terminals[a], steps, step, e0_norm, config.robust
                    )
                    increase = solution.cost - last_cost[a]
                    if increase > slack + 1e-6:
                        monitor[a]["cost"] += 1
                        logger.warning(
                            f"cost_monitor agent={a} k={k} z={z} "
                            f"increase={increase:.6g} slack={slack:.6g}"
                        )
                last_cost[a] = solution.cost
                pieces[n] = solution.controls.values[0]
                warm[a] = solution.controls.tail()
            t0 = t_k + step * z
            trajectory = system.integrate(x, pieces, t0, t0 + step, dt)
            for agent, when in trajectory.exits:
                exits.setdefault(agent, when)
            for s in range(1, len(trajectory.states)):
                positions.append(trajectory.states[s])
                controls.append(pieces)
                times.append(t0 + dt * s)
            x = trajectory.states[-1].copy()
        for n, a in enumerate(agents):
            reference = _reference(partition, plans[a].target)
            record = TransitionRecord(
                agent=a,
                k=k,
                source=plans[a].source,
                target=plans[a].target,
                terminal_error=float(np.linalg.norm(x[n] - reference)),
                r_term=terminals[a].r_term,
            )
            transitions.append(record)
        logger.info(
            f"closed_loop k={k} t={float(t_k + period):.6g} "
            f"regions={[_region_of(partition, p) for p in x]}"
        )

    controls.append(controls[-1] if controls else np.zeros_like(x))
    stacked = np.array(positions)
    regions = np.array(
        [[_region_of(partition, p) for p in sample] for sample in stacked], dtype=int
    )
    return Trace(
        agents=agents,
        times=np.array([float(t) for t in times]),
        positions=stacked,
        controls=np.array(controls),
        regions=regions,
        transitions=transitions,
        monitor=monitor,
        exits=sorted(exits.items()),
    )


# ---------------------------------------------------------------- checking


@dataclass(eq=False)
class TraceReport:
    verdicts: Dict[int, str]
    run_compliance: Dict[int, Optional[bool]]
    max_distance: Dict[Tuple[int, int], float]
    distance_limit: Dict[Tuple[int, int], float]
    transitions: List[TransitionRecord]
    monitor: Dict[int, Dict[str, int]]
    exits: List[Tuple[int, float]]

    @property
    def connected(self) -> bool:
        return all(
            self.max_distance[pair] < self.distance_limit[pair]
            for pair in self.max_distance
        )

    @property
    def terminal_ok(self) -> bool:
        return all(record.reached for record in self.transitions)

    @property
    def passed(self) -> bool:
        return (
            all(v == "true" for v in self.verdicts.values())
            and self.connected
            and self.terminal_ok
            and not self.exits
        )

    def format(self) -> str:
        lines = [f"passed: {'yes' if self.passed else 'no'}"]
        for agent, verdict in sorted(self.verdicts.items()):
            compliance = self.run_compliance.get(agent)
            if compliance is None:
                shown = "unchecked"
            else:
                shown = "yes" if compliance else "no"
            counts = self.monitor.get(agent, {})
            lines.append(
                f"agent {agent}: formula {verdict}, run compliance {shown}, "
                f"monitor rho={counts.get('rho', 0)} cost={counts.get('cost', 0)} "
                f"terminal={counts.get('terminal', 0)}"
            )
        for (i, j), distance in sorted(self.max_distance.items()):
            limit = self.distance_limit[(i, j)]
            status = "ok" if distance < limit else "VIOLATED"
            lines.append(
                f"connectivity {i}-{j}: max {distance:.6g} limit {limit:.6g} {status}"
            )
        for record in self.transitions:
            status = "ok" if record.reached else "MISSED"
            lines.append(
                f"transition agent={record.agent} k={record.k} "
                f"{record.source}->{record.target} "
                f"terminal_error={record.terminal_error:.6g} "
                f"r_term={record.r_term:.6g} {status}"
            )
        for agent, when in self.exits:
            lines.append(f"workspace exit agent={agent} t={when:.6g}")
        return "\n".join(lines) + "\n"


def verdict_text(verdict: Optional[bool]) -> str:
    return "inconclusive" if verdict is None else ("true" if verdict else "false")


def run_compliance(
    trace: Trace, agent: int, route: Sequence[int], period: Fraction
) -> bool:
    """
    Region at every t = mu T matches the planned run and only planned pairs
    are visited in between
    """
    column = trace.column(agent)
    samples = trace.period_samples(period)
    for mu, index in enumerate(samples):
        if mu >= len(route) or int(trace.regions[index, column]) != route[mu]:
            return False
    for mu in range(len(samples) - 1):
        allowed = {route[mu], route[mu + 1]}
        segment = trace.regions[samples[mu] : samples[mu + 1] + 1, column]
        if not set(int(r) for r in segment) <= allowed:
            return False
    return True


def check_trace(
    trace: Trace,
    scenario: Scenario,
    results: Optional[Dict[int, SynthesisResult]] = None,
    partition: Optional[Partition] = None,
) -> TraceReport:
    """Formula verdicts, run compliance, connectivity, terminal errors and monitors"""
    partition = partition or scenario.partition()
    verdicts = {}
    compliance: Dict[int, Optional[bool]] = {}
    for agent in trace.agents:
        word = trace.relaxed_word(
            agent, partition, scenario.period, scenario.alphabet(agent)
        )
        verdicts[agent] = verdict_text(evaluate(scenario.formula(agent), word, 0))
        if results is not None and agent in results:
            route = results[agent].region_run.regions(len(word))
            compliance[agent] = run_compliance(trace, agent, route, scenario.period)
        else:
            compliance[agent] = None

    max_distance: Dict[Tuple[int, int], float] = {}
    limits: Dict[Tuple[int, int], float] = {}
    for i, j in combinations(sorted(trace.agents), 2):
        if j not in scenario.agent(i).neighbors:
            continue
        offsets = (
            trace.positions[:, trace.column(i)] - trace.positions[:, trace.column(j)]
        )
        max_distance[(i, j)] = float(np.max(np.linalg.norm(offsets, axis=1)))
        limits[(i, j)] = min(
            scenario.agent(i).sensing_radius, scenario.agent(j).sensing_radius
        )

    monitor = {a: dict(trace.monitor.get(a, Counter())) for a in trace.agents}
    if results is not None:
        for agent, result in results.items():
            counts = monitor.setdefault(agent, {})
            plans = result.plans
            rho_events = sum(len(p.rho_violations) for p in plans)
            cost_events = sum(len(p.cost_violations) for p in plans)
            counts["rho"] = counts.get("rho", 0) + rho_events
            counts["cost"] = counts.get("cost", 0) + cost_events
    report = TraceReport(
        verdicts=verdicts,
        run_compliance=compliance,
        max_distance=max_distance,
        distance_limit=limits,
        transitions=list(trace.transitions),
        monitor=monitor,
        exits=list(trace.exits),
    )
    logger.info(
        f"check passed={report.passed} verdicts={verdicts} "
        f"connected={report.connected}"
    )
    return report


def check_formula(
    trace: Trace,
    partition: Partition,
    period: Fraction,
    agent: int,
    formula: Formula,
    alphabet: Optional[FrozenSet[str]] = None,
) -> str:
    """Verdict of a single formula on one agent's realized word"""
    word = trace.relaxed_word(agent, partition, period, alphabet)
    return verdict_text(evaluate(formula, word, 0))
