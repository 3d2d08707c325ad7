import asyncio
import logging
from typing import Dict, Iterable, Optional, TypedDict

import numpy as np
from langgraph.graph import END, StateGraph

from mmp.abstraction import WTS, TransitMatrix, build_wts, create_transition_relation
from mmp.errors import InfeasibleAbstractionError, PlannerError, UnsatisfiableError
from mmp.geometry import Partition
from mmp.ledger import RunLedger
from mmp.mitl import format_mitl
from mmp.product import AcceptingRun, BuchiWTS, build_product, find_accepting_run
from mmp.rocp import SolverConfig
from mmp.scenario import Scenario
from mmp.tba import TBA, mitl_to_tba

logger = logging.getLogger(__name__)


# State definition
class SynthesisState(TypedDict):
    agent: int
    scenario: Scenario
    partition: Partition
    config: SolverConfig
    ledger: RunLedger
    matrix: Optional[TransitMatrix]
    wts: Optional[WTS]
    tba: Optional[TBA]
    product: Optional[BuchiWTS]
    run: Optional[AcceptingRun]
    error: Optional[PlannerError]


def _fail(
    state: SynthesisState, stage: str, error: PlannerError, input_data=None
) -> SynthesisState:
    logger.error(f"{stage} failed for agent {state['agent']}: {error}")
    state["ledger"].log_stage(
        stage,
        agent=state["agent"],
        input_data=input_data,
        error_message=str(error),
        success=False,
    )
    return {**state, "error": error}


def neighbor_snapshot(
    scenario: Scenario, partition: Partition, agent: int
) -> np.ndarray:
    """Reference points of the neighbors' initial regions"""
    points = []
    for j in scenario.agent(agent).neighbors:
        region = partition.point_to_region(scenario.agent(j).initial)
        points.append(partition.region(region).reference)
    return np.asarray(points, dtype=float).reshape(-1, 2)


async def abstractor(state: SynthesisState) -> SynthesisState:
    """Transition relation and WTS of one agent, neighbors frozen at their start"""
    scenario, agent = state["scenario"], state["agent"]
    partition = state["partition"]
    spec = scenario.agent(agent)
    try:
        matrix = await asyncio.to_thread(
            create_transition_relation,
            scenario.context(agent),
            partition,
            spec.initial,
            scenario.cost_weights(),
            state["config"],
            neighbor_snapshot(scenario, partition, agent),
            scenario.steps,
            scenario.sampling,
        )
        wts = build_wts(matrix, partition, scenario.period, scenario.alphabet(agent))
        if not wts.successors(wts.initial):
            raise InfeasibleAbstractionError(
                agent, f"no transition leaves initial region {wts.initial}"
            )
    except PlannerError as e:
        return _fail(state, "abstract", e, {"initial": list(spec.initial)})
    state["ledger"].log_stage(
        "abstract",
        agent=agent,
        input_data={"initial": list(spec.initial)},
        output_data={
            "states": len(wts.states),
            "transitions": len(wts.transitions()),
            "calls": matrix.calls,
            "solves": matrix.solves,
        },
    )
    return {**state, "matrix": matrix, "wts": wts}


async def translator(state: SynthesisState) -> SynthesisState:
    """Timed Büchi automaton of the agent's formula"""
    scenario, agent = state["scenario"], state["agent"]
    try:
        formula = scenario.formula(agent)
        tba = mitl_to_tba(formula, scenario.alphabet(agent))
    except PlannerError as e:
        return _fail(state, "translate", e, {"formula": scenario.agent(agent).formula})
    state["ledger"].log_stage(
        "translate",
        agent=agent,
        input_data={"formula": format_mitl(formula)},
        output_data={
            "locations": len(tba.locations),
            "edges": len(tba.edges),
            "clocks": list(tba.clocks),
        },
    )
    return {**state, "tba": tba}


async def composer(state: SynthesisState) -> SynthesisState:
    try:
        product = await asyncio.to_thread(build_product, state["wts"], state["tba"])
    except PlannerError as e:
        return _fail(state, "compose", e)
    state["ledger"].log_stage(
        "compose",
        agent=state["agent"],
        output_data={
            "states": len(product),
            "transitions": product.graph.number_of_edges(),
            "accepting": len(product.accepting),
        },
    )
    return {**state, "product": product}


async def searcher(state: SynthesisState) -> SynthesisState:
    """Accepting lasso of the product"""
    run = await asyncio.to_thread(find_accepting_run, state["product"])
    agent = state["agent"]
    if run is None:
        error = UnsatisfiableError(agent, state["scenario"].agent(agent).formula)
        return _fail(state, "search", error)
    state["ledger"].log_stage(
        "search",
        agent=agent,
        output_data={
            "prefix": [s.region for s in run.prefix],
            "cycle": [s.region for s in run.cycle],
        },
    )
    return {**state, "run": run}


def recorder(state: SynthesisState) -> SynthesisState:
    """Log the agent's overall outcome"""
    error = state.get("error")
    state["ledger"].log_stage(
        "synthesize",
        agent=state["agent"],
        input_data={"formula": state["scenario"].agent(state["agent"]).formula},
        output_data={"run_found": state.get("run") is not None},
        success=error is None,
        error_message=str(error) if error is not None else None,
    )
    return state


# Routing logic
def stage_outcome(state: SynthesisState) -> str:
    return "failed" if state.get("error") is not None else "next"


def create_graph() -> StateGraph:
    """Create the per-agent synthesis workflow"""
    workflow = StateGraph(SynthesisState)

    workflow.add_node("abstract", abstractor)
    workflow.add_node("translate", translator)
    workflow.add_node("compose", composer)
    workflow.add_node("search", searcher)
    workflow.add_node("record", recorder)

    stages = (
        ("abstract", "translate"),
        ("translate", "compose"),
        ("compose", "search"),
    )
    for stage, following in stages:
        workflow.add_conditional_edges(
            stage, stage_outcome, {"next": following, "failed": "record"}
        )
    workflow.add_edge("search", "record")
    workflow.add_edge("record", END)

    workflow.set_entry_point("abstract")
    return workflow


def get_compiled_graph():
    return create_graph().compile()


def initial_state(
    scenario: Scenario,
    partition: Partition,
    config: SolverConfig,
    ledger: RunLedger,
    agent: int,
) -> SynthesisState:
    return SynthesisState(
        agent=agent,
        scenario=scenario,
        partition=partition,
        config=config,
        ledger=ledger,
        matrix=None,
        wts=None,
        tba=None,
        product=None,
        run=None,
        error=None,
    )


async def run_synthesis(
    scenario: Scenario,
    partition: Partition,
    config: SolverConfig,
    ledger: RunLedger,
    agents: Optional[Iterable[int]] = None,
) -> Dict[int, SynthesisState]:
    """Run every agent's pipeline concurrently; final states keyed by agent id"""
    graph = get_compiled_graph()
    selected = sorted(agents) if agents is not None else scenario.agent_ids
    states = await asyncio.gather(
        *(
            graph.ainvoke(initial_state(scenario, partition, config, ledger, agent))
            for agent in selected
        )
    )
    return {state["agent"]: state for state in states}
