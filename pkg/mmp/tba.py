"""
Timed Büchi automata over location-labelled timed words

A run visits one location per word position. Position 0 starts in an
initial location whose label equals the first letter, with every clock at
zero. Between consecutive positions the clocks advance by the delay, the
edge guard is checked on the advanced clocks, resets are applied, and the
target location must carry the next letter and satisfy its invariant.

mitl_to_tba translates conjunctions of literals and single temporal operators
over boolean operands. Each temporal term gets one clock that is never reset,
so the clock always reads the time elapsed since position 0. Locations pair a
tuple of gadget modes with an exact letter.
"""

import logging
import math
import operator
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations, product
from typing import (
    Callable,
    Dict,
    FrozenSet,
    Iterable,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import networkx as nx

from mmp.errors import AlphabetMismatchError, ClockError, NotFlatError
from mmp.mitl import (
    Always,
    Eventually,
    Formula,
    Interval,
    Next,
    TimedWord,
    Until,
    conjuncts,
    eval_boolean,
    format_mitl,
    is_flat,
    propositions,
)

logger = logging.getLogger(__name__)

ClockValue = Union[Fraction, float]

COMPARATORS: Dict[str, Callable] = {
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
    "=": operator.eq,
}


class ClockConstraint:
    def __str__(self) -> str:
        return format_constraint(self)


@dataclass(frozen=True)
class Top(ClockConstraint):
    pass


@dataclass(frozen=True)
class ClockAtom(ClockConstraint):
    clock: str
    op: str
    value: Fraction

    def __post_init__(self):
        if self.op not in COMPARATORS:
            raise ValueError(f"unknown comparison {self.op!r}")
        if self.value == math.inf or isinstance(self.value, float):
            raise ValueError(
                f"clock constants must be finite rationals, got {self.value!r}"
            )
        value = Fraction(self.value)
        if value < 0:
            raise ValueError(f"clock constants must be nonnegative, got {value}")
        object.__setattr__(self, "value", value)


@dataclass(frozen=True)
class ClockNot(ClockConstraint):
    arg: ClockConstraint


@dataclass(frozen=True)
class ClockAnd(ClockConstraint):
    left: ClockConstraint
    right: ClockConstraint


TOP = Top()


def conjoin(*constraints: ClockConstraint) -> ClockConstraint:
    parts = [c for c in constraints if not isinstance(c, Top)]
    if not parts:
        return TOP
    result = parts[0]
    for part in parts[1:]:
        result = ClockAnd(result, part)
    return result


def constraint_clocks(constraint: ClockConstraint) -> FrozenSet[str]:
    if isinstance(constraint, ClockAtom):
        return frozenset([constraint.clock])
    if isinstance(constraint, ClockNot):
        return constraint_clocks(constraint.arg)
    if isinstance(constraint, ClockAnd):
        return constraint_clocks(constraint.left) | constraint_clocks(constraint.right)
    return frozenset()


def constraint_constants(constraint: ClockConstraint) -> List[Fraction]:
    if isinstance(constraint, ClockAtom):
        return [constraint.value]
    if isinstance(constraint, ClockNot):
        return constraint_constants(constraint.arg)
    if isinstance(constraint, ClockAnd):
        left = constraint_constants(constraint.left)
        return left + constraint_constants(constraint.right)
    return []


def map_constants(
    constraint: ClockConstraint, fn: Callable[[Fraction], Fraction]
) -> ClockConstraint:
    if isinstance(constraint, ClockAtom):
        return ClockAtom(constraint.clock, constraint.op, fn(constraint.value))
    if isinstance(constraint, ClockNot):
        return ClockNot(map_constants(constraint.arg, fn))
    if isinstance(constraint, ClockAnd):
        return ClockAnd(
            map_constants(constraint.left, fn), map_constants(constraint.right, fn)
        )
    return constraint


def format_constraint(constraint: ClockConstraint) -> str:
    if isinstance(constraint, ClockAtom):
        return f"{constraint.clock} {constraint.op} {constraint.value}"
    if isinstance(constraint, ClockNot):
        return f"!({format_constraint(constraint.arg)})"
    if isinstance(constraint, ClockAnd):
        left = format_constraint(constraint.left)
        return f"{left} & {format_constraint(constraint.right)}"
    return "true"


def eval_clock_constraint(
    constraint: ClockConstraint, valuation: Mapping[str, ClockValue]
) -> bool:
    """
    Evaluate a clock constraint; an infinite clock exceeds every constant

    Raises:
        ClockError: the constraint mentions a clock missing from the valuation
    """
    if isinstance(constraint, Top):
        return True
    if isinstance(constraint, ClockAtom):
        try:
            value = valuation[constraint.clock]
        except KeyError:
            raise ClockError(f"undeclared clock {constraint.clock!r}") from None
        return COMPARATORS[constraint.op](value, constraint.value)
    if isinstance(constraint, ClockNot):
        return not eval_clock_constraint(constraint.arg, valuation)
    if isinstance(constraint, ClockAnd):
        if not eval_clock_constraint(constraint.left, valuation):
            return False
        return eval_clock_constraint(constraint.right, valuation)
    raise TypeError(f"not a clock constraint: {constraint!r}")


@dataclass(frozen=True)
class Location:
    id: int
    modes: Tuple[str, ...]
    labels: FrozenSet[str]
    accepting: bool
    invariant: ClockConstraint = TOP


@dataclass(frozen=True)
class Edge:
    source: int
    guard: ClockConstraint
    resets: FrozenSet[str]
    target: int


def _format_labels(labels: Iterable[str]) -> str:
    return "{" + ",".join(sorted(labels)) + "}"


@dataclass(eq=False)
class TBA:
    """Location ids equal their index in `locations`"""

    locations: Tuple[Location, ...]
    initial: FrozenSet[int]
    clocks: Tuple[str, ...]
    edges: Tuple[Edge, ...]
    alphabet: FrozenSet[str]
    formula: Optional[Formula] = None
    _out: Dict[int, List[Edge]] = field(init=False, repr=False)

    def __post_init__(self):
        self.locations = tuple(self.locations)
        self.edges = tuple(self.edges)
        self.initial = frozenset(self.initial)
        self.alphabet = frozenset(self.alphabet)
        declared = set(self.clocks)
        for index, location in enumerate(self.locations):
            if location.id != index:
                raise ValueError(f"location at index {index} has id {location.id}")
            if not location.labels <= self.alphabet:
                raise AlphabetMismatchError(
                    f"location {location.id} label "
                    f"{_format_labels(location.labels)} outside the alphabet"
                )
            if not constraint_clocks(location.invariant) <= declared:
                raise ClockError(
                    f"invariant of location {location.id} uses undeclared clocks"
                )
        if not self.initial <= set(range(len(self.locations))):
            raise ValueError("initial locations must be declared locations")
        self._out = {location.id: [] for location in self.locations}
        for edge in self.edges:
            where = f"edge {edge.source} -> {edge.target}"
            if edge.source not in self._out or edge.target not in self._out:
                raise ValueError(f"{where} references an unknown location")
            if not (constraint_clocks(edge.guard) | edge.resets) <= declared:
                raise ClockError(f"{where} uses undeclared clocks")
            self._out[edge.source].append(edge)

    @property
    def accepting(self) -> FrozenSet[int]:
        return frozenset(loc.id for loc in self.locations if loc.accepting)

    def labels(self, location: int) -> FrozenSet[str]:
        return self.locations[location].labels

    def invariant(self, location: int) -> ClockConstraint:
        return self.locations[location].invariant

    def out_edges(self, location: int) -> List[Edge]:
        return self._out[location]

    def constants(self) -> List[Fraction]:
        values = set()
        for location in self.locations:
            values.update(constraint_constants(location.invariant))
        for edge in self.edges:
            values.update(constraint_constants(edge.guard))
        return sorted(values)

    @property
    def max_constant(self) -> Fraction:
        values = self.constants()
        return values[-1] if values else Fraction(0)

    def zero_valuation(self) -> Dict[str, ClockValue]:
        return {clock: Fraction(0) for clock in self.clocks}

    def dump(self) -> str:
        lines = ["location, modes, labels, invariant, initial, accepting"]
        for location in self.locations:
            lines.append(
                f"{location.id}, {'/'.join(location.modes)}, "
                f"{_format_labels(location.labels)}, "
                f"{format_constraint(location.invariant)}, "
                f"{'yes' if location.id in self.initial else 'no'}, "
                f"{'yes' if location.accepting else 'no'}"
            )
        lines.append("")
        lines.append("source, guard, resets, target")
        for edge in self.edges:
            lines.append(
                f"{edge.source}, {format_constraint(edge.guard)}, "
                f"{_format_labels(edge.resets)}, {edge.target}"
            )
        return "\n".join(lines) + "\n"


def scale_to_integers(tba: TBA) -> Tuple[TBA, int]:
    """
    Multiply every constant by the least common multiple of their denominators

    Accepting a word w before scaling is equivalent to accepting w with all
    timestamps multiplied by the returned factor.
    """
    factor = 1
    for value in tba.constants():
        factor = math.lcm(factor, value.denominator)
    if factor == 1:
        return tba, 1

    def scale(value: Fraction) -> Fraction:
        return value * factor

    locations = [
        Location(
            loc.id,
            loc.modes,
            loc.labels,
            loc.accepting,
            map_constants(loc.invariant, scale),
        )
        for loc in tba.locations
    ]
    edges = [
        Edge(e.source, map_constants(e.guard, scale), e.resets, e.target)
        for e in tba.edges
    ]
    scaled = TBA(locations, tba.initial, tba.clocks, edges, tba.alphabet, tba.formula)
    return scaled, factor


# ---------------------------------------------------------------- translation

Case = Tuple[ClockConstraint, str]


def _below(clock: str, interval: Interval) -> Optional[ClockConstraint]:
    return ClockAtom(clock, "<", interval.lo) if interval.lo > 0 else None


def _within(clock: str, interval: Interval) -> ClockConstraint:
    return conjoin(
        ClockAtom(clock, ">=", interval.lo) if interval.lo > 0 else TOP,
        ClockAtom(clock, "<=", interval.hi) if interval.bounded else TOP,
    )


def _above(clock: str, interval: Interval) -> Optional[ClockConstraint]:
    return ClockAtom(clock, ">", interval.hi) if interval.bounded else None


def _not_after(clock: str, interval: Interval) -> ClockConstraint:
    return ClockAtom(clock, "<=", interval.hi) if interval.bounded else TOP


def _cases(*pairs: Tuple[Optional[ClockConstraint], str]) -> List[Case]:
    return [(guard, mode) for guard, mode in pairs if guard is not None]


class _Gadget:
    """
    Mode automaton of one conjunct

    cases(mode, letter) lists (guard, next mode) pairs whose guards partition
    the clock axis; mode None stands for position 0.
    """

    accepting_modes: FrozenSet[str] = frozenset()
    absorbing: FrozenSet[str] = frozenset({"done", "dead", "ok", "sat"})

    def __init__(self, term: Formula, clock: Optional[str]):
        self.term = term
        self.clock = clock

    def step(self, mode: Optional[str], letter: FrozenSet[str]) -> List[Case]:
        if mode in self.absorbing:
            return [(TOP, mode)]
        return self.cases(mode, letter)

    def cases(self, mode: Optional[str], letter: FrozenSet[str]) -> List[Case]:
        raise NotImplementedError


class _Literal(_Gadget):
    accepting_modes = frozenset({"sat"})

    def cases(self, mode, letter):
        return [(TOP, "sat")] if eval_boolean(self.term, letter) else []


class _Eventually(_Gadget):
    accepting_modes = frozenset({"done"})

    def cases(self, mode, letter):
        c, interval = self.clock, self.term.interval
        if eval_boolean(self.term.arg, letter):
            return _cases(
                (_within(c, interval), "done"),
                (_below(c, interval), "wait"),
                (_above(c, interval), "dead"),
            )
        return _cases((_not_after(c, interval), "wait"), (_above(c, interval), "dead"))


class _Always(_Gadget):
    def __init__(self, term, clock):
        super().__init__(term, clock)
        # with an unbounded window the obligation never completes
        bounded = term.interval.bounded
        self.accepting_modes = frozenset({"ok"} if bounded else {"active"})

    def cases(self, mode, letter):
        c, interval = self.clock, self.term.interval
        if eval_boolean(self.term.arg, letter):
            return _cases(
                (_not_after(c, interval), "active"), (_above(c, interval), "ok")
            )
        return _cases(
            (_within(c, interval), "dead"),
            (_below(c, interval), "active"),
            (_above(c, interval), "ok"),
        )


class _Until(_Gadget):
    accepting_modes = frozenset({"done"})

    def cases(self, mode, letter):
        c, interval = self.clock, self.term.interval
        left = eval_boolean(self.term.left, letter)
        right = eval_boolean(self.term.right, letter)
        if right and left:
            return _cases(
                (_within(c, interval), "done"),
                (_below(c, interval), "wait"),
                (_above(c, interval), "dead"),
            )
        if right:
            return _cases(
                (_within(c, interval), "done"),
                (_below(c, interval), "dead"),
                (_above(c, interval), "dead"),
            )
        if left:
            return _cases(
                (_not_after(c, interval), "wait"), (_above(c, interval), "dead")
            )
        return [(TOP, "dead")]


class _Next(_Gadget):
    accepting_modes = frozenset({"done"})

    def cases(self, mode, letter):
        if mode is None:
            return [(TOP, "start")]
        c, interval = self.clock, self.term.interval
        if eval_boolean(self.term.arg, letter):
            return _cases(
                (_within(c, interval), "done"),
                (_below(c, interval), "dead"),
                (_above(c, interval), "dead"),
            )
        return [(TOP, "dead")]


_GADGETS = {Eventually: _Eventually, Always: _Always, Until: _Until, Next: _Next}


def _letters(alphabet: FrozenSet[str]) -> List[FrozenSet[str]]:
    names = sorted(alphabet)
    return [
        frozenset(subset)
        for size in range(len(names) + 1)
        for subset in combinations(names, size)
    ]


def _joint_cases(
    gadgets: Sequence[_Gadget],
    modes: Sequence[Optional[str]],
    letter: FrozenSet[str],
) -> List[Tuple[ClockConstraint, Tuple[str, ...]]]:
    per_gadget = [g.step(m, letter) for g, m in zip(gadgets, modes)]
    joint = []
    for combo in product(*per_gadget):
        guard = conjoin(*(guard for guard, _ in combo))
        joint.append((guard, tuple(mode for _, mode in combo)))
    return joint


def mitl_to_tba(formula: Formula, alphabet: Optional[Iterable[str]] = None) -> TBA:
    """
    Translate a flat formula into a timed Büchi automaton

    Args:
        formula: conjunction of boolean terms and temporal operators over
            boolean operands
        alphabet: proposition set of the automaton, defaults to the formula's
            propositions

    Raises:
        NotFlatError: nested temporal operators or temporal operators under !, |
        AlphabetMismatchError: the formula uses propositions outside the alphabet
    """
    if not is_flat(formula):
        raise NotFlatError(f"formula {format_mitl(formula)} is not flat")
    sigma = frozenset(alphabet) if alphabet is not None else propositions(formula)
    missing = propositions(formula) - sigma
    if missing:
        raise AlphabetMismatchError(
            f"propositions {sorted(missing)} are not in the alphabet {sorted(sigma)}"
        )

    gadgets: List[_Gadget] = []
    clocks: List[str] = []
    for term in conjuncts(formula):
        kind = _GADGETS.get(type(term))
        if kind is None:
            gadgets.append(_Literal(term, None))
            continue
        clock = f"c{len(clocks)}"
        clocks.append(clock)
        gadgets.append(kind(term, clock))

    letters = _letters(sigma)
    zero = {clock: Fraction(0) for clock in clocks}
    index: Dict[Tuple[Tuple[str, ...], FrozenSet[str]], int] = {}
    locations: List[Location] = []
    edges: List[Edge] = []
    queue: deque = deque()

    def locate(modes: Tuple[str, ...], letter: FrozenSet[str]) -> int:
        key = (modes, letter)
        if key not in index:
            index[key] = len(locations)
            accepting = all(m in g.accepting_modes for g, m in zip(gadgets, modes))
            locations.append(Location(len(locations), modes, letter, accepting))
            queue.append(key)
        return index[key]

    initial = set()
    for letter in letters:
        for guard, modes in _joint_cases(gadgets, [None] * len(gadgets), letter):
            if eval_clock_constraint(guard, zero):
                initial.add(locate(modes, letter))
    while queue:
        modes, letter = queue.popleft()
        source = index[(modes, letter)]
        for target_letter in letters:
            for guard, target_modes in _joint_cases(gadgets, modes, target_letter):
                target = locate(target_modes, target_letter)
                edges.append(Edge(source, guard, frozenset(), target))

    tba = TBA(locations, frozenset(initial), tuple(clocks), edges, sigma, formula)
    logger.debug(
        f"tba formula={format_mitl(formula)} locations={len(locations)} "
        f"edges={len(edges)} clocks={len(clocks)} accepting={len(tba.accepting)}"
    )
    return tba


# ---------------------------------------------------------------- acceptance


def _advance(value: ClockValue, delay: Fraction, ceiling: Fraction) -> ClockValue:
    if value == math.inf:
        return math.inf
    value = value + delay
    return value if value <= ceiling else math.inf


def tba_accepts(tba: TBA, word: TimedWord) -> bool:
    """
    Büchi acceptance of a lasso word

    Configurations are (stored position, location, clocks) with clocks above the
    largest constant saturated to infinity, which keeps the configuration graph
    finite. The word is accepted iff an accepting configuration lies on a cycle
    reachable from an initial configuration.
    """
    if not word.is_lasso:
        raise ValueError("acceptance is defined for lasso words only")
    ceiling = tba.max_constant
    stored = len(word)
    graph = nx.DiGraph()
    zero = tuple(Fraction(0) for _ in tba.clocks)
    starts = [
        (0, q, zero)
        for q in sorted(tba.initial)
        if tba.labels(q) == word.letters[0]
        and eval_clock_constraint(tba.invariant(q), dict(zip(tba.clocks, zero)))
    ]
    queue = deque(starts)
    graph.add_nodes_from(starts)
    while queue:
        config = queue.popleft()
        position, location, clocks = config
        following = position + 1 if position + 1 < stored else word.loop
        delay = word.time(position + 1) - word.time(position)
        letter = word.letters[following]
        advanced = {
            c: _advance(v, delay, ceiling) for c, v in zip(tba.clocks, clocks)
        }
        for edge in tba.out_edges(location):
            if tba.labels(edge.target) != letter:
                continue
            if not eval_clock_constraint(edge.guard, advanced):
                continue
            updated = {
                c: (Fraction(0) if c in edge.resets else v) for c, v in advanced.items()
            }
            if not eval_clock_constraint(tba.invariant(edge.target), updated):
                continue
            successor = (following, edge.target, tuple(updated[c] for c in tba.clocks))
            if successor not in graph:
                queue.append(successor)
            graph.add_edge(config, successor)
    accepting = tba.accepting
    for component in nx.strongly_connected_components(graph):
        if not any(config[1] in accepting for config in component):
            continue
        member = next(iter(component))
        if len(component) > 1 or graph.has_edge(member, member):
            return True
    return False
