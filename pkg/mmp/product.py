"""
Büchi WTS: product of an agent's transition system with its automaton

States pair a region with an automaton location carrying the same letter,
plus one value per clock. All transition weights are equal, so clock values
stay in {0, T, 2T, ...} up to the largest automaton constant and saturate to
infinity above it; the reachable product is finite without a region
construction.
"""

import logging
import math
from collections import deque
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, FrozenSet, List, NamedTuple, Optional, Tuple, Union

import networkx as nx

from mmp.abstraction import WTS
from mmp.errors import AlphabetMismatchError
from mmp.mitl import TimedWord
from mmp.tba import TBA, eval_clock_constraint, tba_accepts

logger = logging.getLogger(__name__)

ClockValue = Union[Fraction, float]


def clock_update(value: ClockValue, duration, reset: bool, c_max) -> ClockValue:
    """0 on reset, value + duration while it stays within c_max, infinity otherwise"""
    if duration <= 0:
        raise ValueError(f"transition duration must be positive, got {duration}")
    if reset:
        return Fraction(0)
    if value == math.inf:
        return math.inf
    advanced = value + duration
    return advanced if advanced <= c_max else math.inf


class ProductState(NamedTuple):
    region: int
    location: int
    clocks: Tuple[ClockValue, ...]


@dataclass(eq=False)
class BuchiWTS:
    wts: WTS
    tba: TBA
    graph: nx.DiGraph
    initial: Tuple[ProductState, ...]
    c_max: Fraction

    @property
    def states(self) -> List[ProductState]:
        return sorted(self.graph.nodes)

    @property
    def accepting(self) -> FrozenSet[ProductState]:
        return frozenset(s for s in self.graph.nodes if self.is_accepting(s))

    def is_accepting(self, state: ProductState) -> bool:
        return state.location in self.tba.accepting

    def successors(self, state: ProductState) -> List[ProductState]:
        return sorted(self.graph.successors(state))

    def labels(self, state: ProductState) -> FrozenSet[str]:
        return self.wts.labels(state.region)

    def valuation(self, state: ProductState) -> Dict[str, ClockValue]:
        return dict(zip(self.tba.clocks, state.clocks))

    def __len__(self) -> int:
        return self.graph.number_of_nodes()


def build_product(wts: WTS, tba: TBA) -> BuchiWTS:
    """
    Reachable part of the product, built forward from the initial states

    A product edge needs a WTS transition, an automaton edge into a location
    labelled like the target region whose guard holds on the advanced clocks,
    and the target invariant on the updated clocks.

    Raises:
        AlphabetMismatchError: the WTS uses propositions unknown to the automaton
    """
    extra = wts.alphabet - tba.alphabet
    if extra:
        raise AlphabetMismatchError(
            f"agent {wts.agent}: WTS propositions {sorted(extra)} "
            "are not in the automaton alphabet"
        )
    c_max = tba.max_constant
    zero = tuple(Fraction(0) for _ in tba.clocks)
    initial = tuple(
        ProductState(wts.initial, q, zero)
        for q in sorted(tba.initial)
        if tba.labels(q) == wts.labels(wts.initial)
        and eval_clock_constraint(tba.invariant(q), tba.zero_valuation())
    )
    graph = nx.DiGraph()
    graph.add_nodes_from(initial)
    queue = deque(initial)
    while queue:
        state = queue.popleft()
        for region in wts.successors(state.region):
            duration = wts.graph.edges[state.region, region]["weight"]
            letter = wts.labels(region)
            advanced = {
                c: clock_update(v, duration, False, c_max)
                for c, v in zip(tba.clocks, state.clocks)
            }
            for edge in tba.out_edges(state.location):
                if tba.labels(edge.target) != letter:
                    continue
                if not eval_clock_constraint(edge.guard, advanced):
                    continue
                updated = {
                    c: clock_update(v, duration, c in edge.resets, c_max)
                    for c, v in zip(tba.clocks, state.clocks)
                }
                if not eval_clock_constraint(tba.invariant(edge.target), updated):
                    continue
                clocks = tuple(updated[c] for c in tba.clocks)
                successor = ProductState(region, edge.target, clocks)
                if successor not in graph:
                    queue.append(successor)
                graph.add_edge(state, successor, weight=duration)
    product = BuchiWTS(wts, tba, graph, initial, c_max)
    logger.info(
        f"product agent={wts.agent} states={graph.number_of_nodes()} "
        f"transitions={graph.number_of_edges()} "
        f"accepting={len(product.accepting)} c_max={c_max}"
    )
    return product


@dataclass(frozen=True)
class RegionRun:
    """Lasso run of a WTS: prefix then cycle forever, one transition per period"""

    prefix: Tuple[int, ...]
    cycle: Tuple[int, ...]
    period: Fraction

    def __len__(self) -> int:
        return len(self.prefix) + len(self.cycle)

    def regions(self, count: Optional[int] = None) -> List[int]:
        """First `count` regions of the unrolled run, the stored lasso by default"""
        stored = list(self.prefix) + list(self.cycle)
        if count is None or not self.cycle:
            return stored if count is None else stored[:count]
        unrolled = list(self.prefix)
        while len(unrolled) < count:
            unrolled.extend(self.cycle)
        return unrolled[:count]

    def timed(self) -> List[Tuple[int, Fraction]]:
        return [(region, self.period * mu) for mu, region in enumerate(self.regions())]

    def word(self, wts: WTS) -> TimedWord:
        return TimedWord.uniform(
            [wts.labels(r) for r in self.prefix],
            [wts.labels(r) for r in self.cycle],
            self.period,
        )


@dataclass(frozen=True)
class AcceptingRun:
    prefix: Tuple[ProductState, ...]
    cycle: Tuple[ProductState, ...]
    period: Fraction

    @property
    def states(self) -> List[ProductState]:
        return list(self.prefix) + list(self.cycle)

    def dump(self, product: BuchiWTS) -> str:
        """Run trace table: mu, region, tba_location, clock values, tau(mu)"""
        lines = ["μ, region, tba_location, clock values, τ(μ)"]
        for mu, state in enumerate(self.states):
            values = zip(product.tba.clocks, state.clocks)
            shown = [f"{c}={'inf' if v == math.inf else v}" for c, v in values]
            clocks = " ".join(shown) or "-"
            tau = self.period * mu
            lines.append(f"{mu}, {state.region}, {state.location}, {clocks}, {tau}")
        lines.append(f"loop -> {len(self.prefix)}")
        return "\n".join(lines) + "\n"


def _shortest_cycle(
    product: BuchiWTS, anchor: ProductState
) -> Optional[List[ProductState]]:
    parent: Dict[ProductState, ProductState] = {}
    queue = deque()
    for successor in product.successors(anchor):
        if successor == anchor:
            return [anchor]
        if successor not in parent:
            parent[successor] = anchor
            queue.append(successor)
    while queue:
        state = queue.popleft()
        for successor in product.successors(state):
            if successor == anchor:
                path = [state]
                while path[-1] != anchor:
                    path.append(parent[path[-1]])
                return list(reversed(path))
            if successor not in parent:
                parent[successor] = state
                queue.append(successor)
    return None


def find_accepting_run(product: BuchiWTS) -> Optional[AcceptingRun]:
    """
    Accepting lasso with the shortest prefix, or None when the language is empty

    A lasso exists iff some reachable accepting state lies on a cycle, i.e. in
    a nontrivial strongly connected component or on a self-loop. Breadth-first
    search from the initial states gives every reachable state its minimum
    depth, so the accepting cycle state of least depth is the loop entry with
    the shortest possible prefix; no other lasso can reach an accepting cycle
    state sooner. A second breadth-first search from that state back to itself
    gives the shortest cycle through it. Nested depth-first search decides the
    same emptiness question but returns whichever lasso it meets first, whose
    prefix need not be minimal. Successors are always visited in ascending
    (region, location, clocks) order, so ties are broken deterministically.
    """
    depth: Dict[ProductState, int] = {}
    parent: Dict[ProductState, Optional[ProductState]] = {}
    queue = deque()
    for state in sorted(product.initial):
        depth[state] = 0
        parent[state] = None
        queue.append(state)
    while queue:
        state = queue.popleft()
        for successor in product.successors(state):
            if successor not in depth:
                depth[successor] = depth[state] + 1
                parent[successor] = state
                queue.append(successor)

    on_cycle = set()
    for component in nx.strongly_connected_components(product.graph):
        member = next(iter(component))
        if len(component) > 1 or product.graph.has_edge(member, member):
            on_cycle.update(component)
    candidates = sorted(
        (depth[s], s) for s in on_cycle if s in depth and product.is_accepting(s)
    )
    for _, anchor in candidates:
        cycle = _shortest_cycle(product, anchor)
        if cycle is None:
            continue
        prefix = []
        state = parent[anchor]
        while state is not None:
            prefix.append(state)
            state = parent[state]
        run = AcceptingRun(tuple(reversed(prefix)), tuple(cycle), product.wts.weight)
        logger.info(
            f"lasso agent={product.wts.agent} "
            f"prefix={len(run.prefix)} cycle={len(run.cycle)}"
        )
        return run
    logger.info(f"lasso agent={product.wts.agent} found=False")
    return None


def project_run(product: BuchiWTS, run: Optional[AcceptingRun]) -> RegionRun:
    """Drop locations and clocks; timestamps stay mu * T"""
    period = product.wts.weight
    if run is None:
        return RegionRun((), (), period)
    return RegionRun(
        tuple(s.region for s in run.prefix),
        tuple(s.region for s in run.cycle),
        period,
    )


def _wts_lassos(wts: WTS, max_length: int) -> List[RegionRun]:
    lassos = []
    stack = [[wts.initial]]
    while stack:
        path = stack.pop()
        for loop, region in enumerate(path):
            if wts.graph.has_edge(path[-1], region):
                lasso = RegionRun(tuple(path[:loop]), tuple(path[loop:]), wts.weight)
                lassos.append(lasso)
        if len(path) < max_length:
            for successor in reversed(wts.successors(path[-1])):
                stack.append(path + [successor])
    return sorted(lassos, key=lambda r: (len(r), r.prefix, r.cycle))


def _lasso_wts(wts: WTS, run: RegionRun) -> WTS:
    """Transition system whose only infinite run is the lasso, one state per position"""
    regions = run.regions()
    graph = nx.DiGraph()
    for position, region in enumerate(regions):
        graph.add_node(position, labels=wts.labels(region))
    for position in range(len(regions)):
        following = position + 1 if position + 1 < len(regions) else len(run.prefix)
        graph.add_edge(position, following, direction=0, plan=None, weight=wts.weight)
    return WTS(
        agent=wts.agent,
        graph=graph,
        initial=0,
        weight=wts.weight,
        alphabet=wts.alphabet,
    )


def verify_projection(wts: WTS, tba: TBA, max_length: int = 5) -> List[str]:
    """
    Check that product runs and accepted WTS words correspond both ways

    Every WTS lasso with at most max_length stored states whose word the
    automaton accepts must be the projection of an accepting product run, and
    the lasso found in the full product must project to an accepted word.

    Returns:
        Descriptions of mismatches, empty when both directions hold
    """
    problems = []
    for run in _wts_lassos(wts, max_length):
        accepted = tba_accepts(tba, run.word(wts))
        lasso_product = build_product(_lasso_wts(wts, run), tba)
        realized = find_accepting_run(lasso_product) is not None
        if accepted != realized:
            problems.append(
                f"lasso {run.prefix}{run.cycle}: "
                f"accepted={accepted} product_run={realized}"
            )
    product = build_product(wts, tba)
    found = find_accepting_run(product)
    if found is not None:
        projected = project_run(product, found)
        if not tba_accepts(tba, projected.word(wts)):
            problems.append(
                "accepting product run projects to rejected lasso "
                f"{projected.prefix}{projected.cycle}"
            )
    return problems
