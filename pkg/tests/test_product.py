import math
from fractions import Fraction

import networkx as nx
import pytest

from mmp.abstraction import WTS
from mmp.errors import AlphabetMismatchError
from mmp.mitl import eval_mitl, parse_mitl
from mmp.product import (
    RegionRun,
    build_product,
    clock_update,
    find_accepting_run,
    project_run,
    verify_projection,
)
from mmp.tba import mitl_to_tba

PERIOD = Fraction(1)


def corridor_wts(labels=None, alphabet=("goal", "hazard")):
    """Four regions in a row, 0 - 1 - 2 - 3, with goal at 2 and hazard at 3"""
    labels = labels if labels is not None else {2: {"goal"}, 3: {"hazard"}}
    graph = nx.DiGraph()
    for region in range(4):
        graph.add_node(region, labels=frozenset(labels.get(region, ())))
    for a, b, direction in [(0, 1, 6), (1, 2, 6), (2, 3, 6)]:
        graph.add_edge(a, b, direction=direction, plan=None, weight=PERIOD)
        graph.add_edge(b, a, direction=3, plan=None, weight=PERIOD)
    return WTS(
        agent=1, graph=graph, initial=0, weight=PERIOD, alphabet=frozenset(alphabet)
    )


def product_for(text, wts=None):
    wts = wts or corridor_wts()
    return build_product(wts, mitl_to_tba(parse_mitl(text), wts.alphabet))


class TestClockUpdate:
    """Clock values along product transitions"""

    def test_advance(self):
        """Clocks grow by the transition weight"""
        assert clock_update(Fraction(2), Fraction(3, 2), False, 5) == Fraction(7, 2)

    def test_saturation(self):
        """Values above c_max become infinite"""
        assert clock_update(Fraction(4), 2, False, 5) == math.inf
        assert clock_update(math.inf, 2, False, 5) == math.inf

    def test_reset(self):
        """Resets return to zero"""
        assert clock_update(math.inf, 1, True, 5) == 0

    def test_duration_positive(self):
        """Transitions take time"""
        with pytest.raises(ValueError):
            clock_update(Fraction(0), 0, False, 5)


class TestProduct:
    """Reachable product construction"""

    def test_initial_states_match_initial_label(self):
        """Initial product states sit on the WTS initial region with zero clocks"""
        product = product_for("F[0,4] goal")
        assert product.initial
        for state in product.initial:
            assert state.region == 0
            assert state.clocks == (0,)
            assert product.tba.labels(state.location) == frozenset()

    def test_clock_values_are_multiples_of_the_period(self):
        """Equal weights keep clocks on the period grid up to c_max"""
        product = product_for("F[0,4] goal")
        assert product.c_max == 4
        for state in product.states:
            (value,) = state.clocks
            assert value == math.inf or (value <= 4 and value.denominator == 1)

    def test_edges_follow_wts(self):
        """Every product edge projects onto a WTS transition"""
        product = product_for("F[0,inf] goal & G[0,inf] !hazard")
        for u, v in product.graph.edges:
            assert product.wts.graph.has_edge(u.region, v.region)
            assert product.labels(v) == product.tba.labels(v.location)

    def test_alphabet_mismatch(self):
        """The automaton must know every WTS proposition"""
        wts = corridor_wts()
        with pytest.raises(AlphabetMismatchError):
            build_product(wts, mitl_to_tba(parse_mitl("F[0,4] goal")))


class TestLassoSearch:
    """Accepting runs and their projections"""

    @pytest.mark.parametrize(
        "text",
        [
            "F[0,4] goal",
            "F[0,inf] goal & G[0,inf] !hazard",
            "F[3,5] hazard",
            "!goal U[2,3] goal",
        ],
    )
    def test_projected_run_satisfies_formula(self, text):
        """The region lasso's word satisfies the formula it was found for"""
        product = product_for(text)
        run = find_accepting_run(product)
        assert run is not None
        region_run = project_run(product, run)
        assert region_run.regions()[0] == 0
        assert eval_mitl(parse_mitl(text), region_run.word(product.wts))

    @pytest.mark.parametrize("text", ["F[0,1] goal", "G[0,inf] !goal & F[3,5] hazard"])
    def test_unsatisfiable(self, text):
        """No lasso exists when the goal is out of reach"""
        product = product_for(text)
        assert find_accepting_run(product) is None
        assert project_run(product, None) == RegionRun((), (), PERIOD)

    def test_shortest_prefix(self):
        """Breadth-first search reaches the goal as early as possible"""
        product = product_for("F[0,4] goal")
        region_run = project_run(product, find_accepting_run(product))
        assert region_run.regions()[:3] == [0, 1, 2]

    def test_prefix_is_minimal_over_accepting_cycles(self):
        """No accepting state on a cycle lies closer to the start than the loop entry"""
        product = product_for("F[0,inf] goal & G[0,inf] !hazard")
        run = find_accepting_run(product)
        graph = product.graph
        depth = nx.multi_source_dijkstra_path_length(
            graph, set(product.initial), weight=lambda u, v, d: 1
        )
        on_cycle = {
            s
            for component in nx.strongly_connected_components(graph)
            for s in component
            if len(component) > 1 or graph.has_edge(s, s)
        }
        best = min(
            depth[s] for s in on_cycle if s in depth and product.is_accepting(s)
        )
        assert run.cycle[0] in on_cycle
        assert len(run.prefix) == best == depth[run.cycle[0]]

    def test_search_is_deterministic(self):
        """Repeated searches return the same lasso"""
        first = find_accepting_run(product_for("F[3,5] hazard"))
        assert first == find_accepting_run(product_for("F[3,5] hazard"))

    def test_run_consecutive_states_are_edges(self):
        """Prefix and cycle follow product edges and the cycle closes"""
        product = product_for("F[0,inf] goal & G[0,inf] !hazard")
        run = find_accepting_run(product)
        states = run.states
        for a, b in zip(states, states[1:]):
            assert product.graph.has_edge(a, b)
        assert product.graph.has_edge(run.cycle[-1], run.cycle[0])
        assert any(product.is_accepting(s) for s in run.cycle)

    def test_dump(self):
        """One row per stored state and the loop index"""
        product = product_for("F[0,4] goal")
        run = find_accepting_run(product)
        lines = run.dump(product).splitlines()
        assert lines[0] == "μ, region, tba_location, clock values, τ(μ)"
        assert len(lines) == len(run.states) + 2
        assert lines[-1] == f"loop -> {len(run.prefix)}"

    @pytest.mark.parametrize(
        "text", ["F[0,4] goal", "F[3,5] hazard", "G[0,inf] !hazard"]
    )
    def test_projection_is_sound_and_complete(self, text):
        """Accepted WTS lassos and accepting product runs correspond"""
        wts = corridor_wts()
        tba = mitl_to_tba(parse_mitl(text), wts.alphabet)
        assert verify_projection(wts, tba, max_length=4) == []


class TestRegionRun:
    """Unrolling a region lasso"""

    def test_unrolled_regions(self):
        """The cycle repeats after the prefix"""
        run = RegionRun((0, 1), (2, 3), PERIOD)
        assert run.regions(7) == [0, 1, 2, 3, 2, 3, 2]
        assert run.regions() == [0, 1, 2, 3]

    def test_timed(self):
        """Stored positions are stamped mu T"""
        run = RegionRun((0,), (1,), Fraction(3))
        assert run.timed() == [(0, 0), (1, 3)]
