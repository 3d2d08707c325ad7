"""
Transition relation and weighted transition system of one agent

Regions are explored breadth-first from the initial region. Every (region,
direction) pair with an in-bounds neighbor is handed to the transition
controller, with the neighbors frozen at the reference points of their initial
regions. Layers are processed in ascending (region id, direction) order and may
be spread over a process pool; results are assembled in that same order.
"""

import logging
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from mmp.dynamics import AgentContext
from mmp.errors import TerminalDesignError
from mmp.geometry import Partition
from mmp.rocp import (
    CostWeights,
    SolverConfig,
    TerminalIngredients,
    TransitionPlan,
    design_terminal,
    transition_controller,
)

logger = logging.getLogger(__name__)


@dataclass
class TransitMatrix:
    """(region, direction) -> plan, present only where the controller succeeded"""

    agent: int
    initial: int
    entries: Dict[Tuple[int, int], TransitionPlan] = field(default_factory=dict)
    calls: int = 0
    solves: int = 0
    explored: List[int] = field(default_factory=list)

    def get(self, region: int, direction: int) -> Optional[TransitionPlan]:
        return self.entries.get((region, direction))

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def successes(self) -> int:
        return len(self.entries)

    def dump_plans(self) -> str:
        """Control-grid tables: src_region, dir, piece, t, u_x, u_y"""
        lines = ["src_region, dir, piece, t, u_x, u_y"]
        for (region, direction), plan in sorted(self.entries.items()):
            for piece, (ux, uy) in enumerate(plan.controls.values):
                t = plan.controls.step * piece
                lines.append(f"{region}, {direction}, {piece}, {t}, {ux!r}, {uy!r}")
        return "\n".join(lines) + "\n"


def _explore_pair(job) -> Tuple[Optional[TransitionPlan], int]:
    *args, terminal = job
    counter: Counter = Counter()
    plan = transition_controller(*args, terminal=terminal, counter=counter)
    return plan, counter["solves"]


def create_transition_relation(
    ctx: AgentContext,
    partition: Partition,
    x0: Sequence[float],
    weights: CostWeights,
    config: SolverConfig,
    neighbor_estimates,
    steps: int,
    step: Fraction,
) -> TransitMatrix:
    """
    Explore all regions reachable from the region of x0

    Failed pairs stay absent from the matrix. config.max_depth, when set, stops
    expanding after that many layers.
    """
    initial = partition.point_to_region(x0)
    estimates = np.asarray(neighbor_estimates, dtype=float).reshape(-1, 2)
    matrix = TransitMatrix(agent=ctx.agent, initial=initial)
    terminals: Dict[int, Optional[TerminalIngredients]] = {}
    visited = {initial}
    frontier = [initial]
    depth = 0
    pool = None
    if config.workers > 1:
        pool = ProcessPoolExecutor(max_workers=config.workers)
    try:
        while frontier:
            if config.max_depth is not None and depth >= config.max_depth:
                break
            jobs = []
            for region in sorted(frontier):
                matrix.explored.append(region)
                for direction, target in sorted(partition.neighbors(region).items()):
                    if target not in terminals:
                        terminals[target] = _terminal_for(
                            ctx, weights, partition, target, estimates, config
                        )
                    matrix.calls += 1
                    if terminals[target] is None:
                        continue
                    jobs.append(
                        (
                            ctx,
                            partition,
                            weights,
                            config,
                            region,
                            direction,
                            estimates,
                            steps,
                            step,
                            terminals[target],
                        )
                    )
            runner = pool.map if pool else map
            results = runner(_explore_pair, jobs)
            next_frontier = []
            for plan, solves in results:
                matrix.solves += solves
                if plan is None:
                    continue
                matrix.entries[(plan.source, plan.direction)] = plan
                if plan.target not in visited:
                    visited.add(plan.target)
                    next_frontier.append(plan.target)
            frontier = next_frontier
            depth += 1
    finally:
        if pool:
            pool.shutdown()
    logger.info(
        f"abstraction agent={ctx.agent} initial={initial} regions={len(visited)} "
        f"calls={matrix.calls} solves={matrix.solves} successes={matrix.successes}"
    )
    return matrix


def _terminal_for(
    ctx: AgentContext,
    weights: CostWeights,
    partition: Partition,
    target: int,
    estimates: np.ndarray,
    config: SolverConfig,
) -> Optional[TerminalIngredients]:
    try:
        return design_terminal(ctx, weights, partition, target, estimates, config)
    except TerminalDesignError as e:
        logger.debug(
            f"terminal_design agent={ctx.agent} region={target} "
            f"feasible=False reason={e}"
        )
        return None


@dataclass(eq=False)
class WTS:
    """Regions as states, one transition of duration T per stored plan"""

    agent: int
    graph: nx.DiGraph
    initial: int
    weight: Fraction
    alphabet: FrozenSet[str]

    @property
    def states(self) -> List[int]:
        return sorted(self.graph.nodes)

    def labels(self, state: int) -> FrozenSet[str]:
        return self.graph.nodes[state]["labels"]

    def successors(self, state: int) -> List[int]:
        return sorted(self.graph.successors(state))

    def plan(self, src: int, dst: int) -> TransitionPlan:
        return self.graph.edges[src, dst]["plan"]

    def transitions(self) -> List[Tuple[int, int, int]]:
        """(src, dir, dst) sorted by source then direction"""
        return sorted((u, d["direction"], v) for u, v, d in self.graph.edges(data=True))

    def timed_run(self, regions: Iterable[int]) -> List[Tuple[int, Fraction]]:
        """Timestamps mu T along a sequence of states"""
        return [(region, self.weight * mu) for mu, region in enumerate(regions)]

    def dump(self) -> str:
        lines = ["src_region, dir, dst_region, weight"]
        for src, direction, dst in self.transitions():
            weight = self.graph.edges[src, dst]["weight"]
            lines.append(f"{src}, {direction}, {dst}, {weight}")
        return "\n".join(lines) + "\n"


def build_wts(
    matrix: TransitMatrix,
    partition: Partition,
    period: Fraction,
    alphabet: Optional[Iterable[str]] = None,
) -> WTS:
    """
    One transition per stored plan, labels restricted to the agent's alphabet

    Every region is a state, so an empty matrix gives states without transitions.
    """
    if alphabet is not None:
        sigma = frozenset(alphabet)
    else:
        sigma = frozenset(p for region in partition.regions for p in region.labels)
    graph = nx.DiGraph()
    for region in partition.regions:
        graph.add_node(region.id, labels=region.labels & sigma)
    for (src, direction), plan in sorted(matrix.entries.items()):
        graph.add_edge(
            src, plan.target, direction=direction, plan=plan, weight=Fraction(period)
        )
    logger.debug(
        f"wts agent={matrix.agent} states={graph.number_of_nodes()} "
        f"transitions={graph.number_of_edges()}"
    )
    return WTS(
        agent=matrix.agent,
        graph=graph,
        initial=matrix.initial,
        weight=Fraction(period),
        alphabet=sigma,
    )
