"""
Metric interval temporal logic: syntax tree, parser, printer and evaluator

Concrete syntax (lowest to highest precedence):

    phi := phi | phi          disjunction, left associative
         | phi & phi          conjunction, left associative
         | phi U[a,b] phi     until, right associative
         | ! phi | X[a,b] phi | F[a,b] phi | G[a,b] phi
         | name | true | false | ( phi )

Bounds are integers, decimals or p/q rationals, converted exactly; the upper
bound may be ``inf``. X, F, G and U are operators only when an interval
follows them, so they remain usable as proposition names.

Evaluation follows the point-wise semantics: formulas hold at positions of a
timed word, and an interval constrains the time elapsed since the evaluation
position. Words are either finite or lasso shaped. Finite words give a
three-valued verdict: None means the word ends before the operator's window
has been fully observed.
"""

import logging
import math
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import (
    Dict,
    FrozenSet,
    Iterable,
    List,
    NamedTuple,
    Optional,
    Sequence,
    Set,
    Tuple,
    Union,
)

from mmp.errors import FormulaSyntaxError, InconclusiveError, IntervalError

logger = logging.getLogger(__name__)

Bound = Union[Fraction, float]


def _bound(value) -> Bound:
    if value == math.inf or value == "inf":
        return math.inf
    if isinstance(value, float):
        raise IntervalError(
            f"interval bounds must be exact rationals, got float {value!r}"
        )
    return Fraction(value)


def format_bound(value: Bound) -> str:
    return "inf" if value == math.inf else str(value)


@dataclass(frozen=True)
class Interval:
    """Closed timing interval [lo, hi], hi possibly infinite"""

    lo: Fraction
    hi: Bound

    def __post_init__(self):
        lo, hi = _bound(self.lo), _bound(self.hi)
        if lo == math.inf:
            raise IntervalError("lower bound of an interval must be finite")
        shown = f"[{lo},{format_bound(hi)}]"
        if lo < 0:
            raise IntervalError(f"interval bounds must be nonnegative, got {shown}")
        if lo >= hi:
            raise IntervalError(f"interval {shown} requires a < b")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def bounded(self) -> bool:
        return self.hi != math.inf

    def contains(self, delay) -> bool:
        return self.lo <= delay <= self.hi

    def __str__(self) -> str:
        return f"[{format_bound(self.lo)},{format_bound(self.hi)}]"


class Formula:
    """Base class of the syntax tree"""

    def __str__(self) -> str:
        return format_mitl(self)


@dataclass(frozen=True)
class Prop(Formula):
    name: str


@dataclass(frozen=True)
class Const(Formula):
    value: bool


@dataclass(frozen=True)
class Not(Formula):
    arg: Formula


@dataclass(frozen=True)
class And(Formula):
    left: Formula
    right: Formula


@dataclass(frozen=True)
class Or(Formula):
    left: Formula
    right: Formula


@dataclass(frozen=True)
class Next(Formula):
    interval: Interval
    arg: Formula


@dataclass(frozen=True)
class Eventually(Formula):
    interval: Interval
    arg: Formula


@dataclass(frozen=True)
class Always(Formula):
    interval: Interval
    arg: Formula


@dataclass(frozen=True)
class Until(Formula):
    interval: Interval
    left: Formula
    right: Formula


TEMPORAL = (Next, Eventually, Always, Until)
RESERVED = {"true", "false", "inf"}
TEMPORAL_KEYWORDS = {"X", "F", "G", "U"}


# ---------------------------------------------------------------- parsing


class Token(NamedTuple):
    kind: str  # number | ident | op | symbol | end
    text: str
    position: int


_TOKEN_RE = re.compile(
    r"(?P<number>\d+/\d+|\d+(?:\.\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<symbol>[()\[\],!&|])"
)


def tokenize(text: str) -> List[Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos].isspace():
            pos += 1
            continue
        match = _TOKEN_RE.match(text, pos)
        if not match:
            raise FormulaSyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = match.lastgroup
        word = match.group()
        if kind == "ident" and word in TEMPORAL_KEYWORDS:
            if text[match.end() :].lstrip().startswith("["):
                kind = "op"
        tokens.append(Token(kind, word, pos))
        pos = match.end()
    tokens.append(Token("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = tokenize(text)
        self.index = 0

    def peek(self) -> Token:
        return self.tokens[self.index]

    def advance(self) -> Token:
        token = self.tokens[self.index]
        self.index += 1
        return token

    def expect(self, text: str) -> Token:
        token = self.advance()
        if token.text != text or token.kind == "end":
            found = token.text or "end of input"
            raise FormulaSyntaxError(
                f"expected {text!r}, found {found!r}", token.position
            )
        return token

    def parse(self) -> Formula:
        formula = self.disjunction()
        token = self.peek()
        if token.kind != "end":
            raise FormulaSyntaxError(f"unexpected {token.text!r}", token.position)
        return formula

    def disjunction(self) -> Formula:
        left = self.conjunction()
        while self.peek().text == "|" and self.peek().kind == "symbol":
            self.advance()
            left = Or(left, self.conjunction())
        return left

    def conjunction(self) -> Formula:
        left = self.until()
        while self.peek().text == "&" and self.peek().kind == "symbol":
            self.advance()
            left = And(left, self.until())
        return left

    def until(self) -> Formula:
        left = self.unary()
        token = self.peek()
        if token.kind == "op" and token.text == "U":
            self.advance()
            interval = self.interval()
            return Until(interval, left, self.until())
        return left

    def unary(self) -> Formula:
        token = self.advance()
        if token.kind == "symbol" and token.text == "!":
            return Not(self.unary())
        if token.kind == "op":
            if token.text == "U":
                raise FormulaSyntaxError(
                    "until operator is missing its left operand", token.position
                )
            interval = self.interval()
            arg = self.unary()
            return {"X": Next, "F": Eventually, "G": Always}[token.text](interval, arg)
        if token.kind == "symbol" and token.text == "(":
            inner = self.disjunction()
            self.expect(")")
            return inner
        if token.kind == "ident":
            if token.text in ("true", "false"):
                return Const(token.text == "true")
            if token.text == "inf":
                raise FormulaSyntaxError(
                    "'inf' is only allowed as an interval bound", token.position
                )
            return Prop(token.text)
        found = token.text or "end of input"
        raise FormulaSyntaxError(f"expected a formula, found {found!r}", token.position)

    def interval(self) -> Interval:
        self.expect("[")
        lo = self.bound()
        self.expect(",")
        hi = self.bound()
        self.expect("]")
        return Interval(lo, hi)

    def bound(self) -> Bound:
        token = self.advance()
        if token.kind == "number":
            return Fraction(token.text)
        if token.kind == "ident" and token.text == "inf":
            return math.inf
        found = token.text or "end of input"
        raise FormulaSyntaxError(
            f"expected an interval bound, found {found!r}", token.position
        )


def parse_mitl(text: str) -> Formula:
    """
    Parse concrete syntax into a formula

    Raises:
        FormulaSyntaxError: malformed text, with the character position
        IntervalError: an interval with a >= b
    """
    return _Parser(text).parse()


def format_mitl(formula: Formula) -> str:
    """Canonical concrete syntax; binary operators are always parenthesized"""
    if isinstance(formula, Prop):
        return formula.name
    if isinstance(formula, Const):
        return "true" if formula.value else "false"
    if isinstance(formula, Not):
        return f"!{format_mitl(formula.arg)}"
    if isinstance(formula, And):
        return f"({format_mitl(formula.left)} & {format_mitl(formula.right)})"
    if isinstance(formula, Or):
        return f"({format_mitl(formula.left)} | {format_mitl(formula.right)})"
    if isinstance(formula, Until):
        left, right = format_mitl(formula.left), format_mitl(formula.right)
        return f"({left} U{formula.interval} {right})"
    if isinstance(formula, (Next, Eventually, Always)):
        symbol = {Next: "X", Eventually: "F", Always: "G"}[type(formula)]
        return f"{symbol}{formula.interval} {format_mitl(formula.arg)}"
    raise TypeError(f"not a formula: {formula!r}")


# ---------------------------------------------------------------- structure


def propositions(formula: Formula) -> FrozenSet[str]:
    found: Set[str] = set()
    stack = [formula]
    while stack:
        node = stack.pop()
        if isinstance(node, Prop):
            found.add(node.name)
        elif isinstance(node, (Not, Next, Eventually, Always)):
            stack.append(node.arg)
        elif isinstance(node, (And, Or, Until)):
            stack.extend((node.left, node.right))
    return frozenset(found)


def is_boolean(formula: Formula) -> bool:
    """True for formulas built from propositions, constants, !, & and | only"""
    if isinstance(formula, (Prop, Const)):
        return True
    if isinstance(formula, Not):
        return is_boolean(formula.arg)
    if isinstance(formula, (And, Or)):
        return is_boolean(formula.left) and is_boolean(formula.right)
    return False


def conjuncts(formula: Formula) -> List[Formula]:
    """Top-level conjunction flattened left to right"""
    if isinstance(formula, And):
        return conjuncts(formula.left) + conjuncts(formula.right)
    return [formula]


def is_flat(formula: Formula) -> bool:
    """A conjunction of boolean terms and temporal operators over boolean operands"""
    for term in conjuncts(formula):
        if is_boolean(term):
            continue
        if isinstance(term, (Next, Eventually, Always)) and is_boolean(term.arg):
            continue
        if isinstance(term, Until) and is_boolean(term.left) and is_boolean(term.right):
            continue
        return False
    return True


def time_horizon(formula: Formula) -> Bound:
    """Latest offset from the evaluation position that can affect the verdict"""
    if isinstance(formula, (Prop, Const)):
        return Fraction(0)
    if isinstance(formula, Not):
        return time_horizon(formula.arg)
    if isinstance(formula, (And, Or)):
        return max(time_horizon(formula.left), time_horizon(formula.right))
    if isinstance(formula, Until):
        operands = max(time_horizon(formula.left), time_horizon(formula.right))
        return formula.interval.hi + operands
    return formula.interval.hi + time_horizon(formula.arg)


def eval_boolean(formula: Formula, labels: Iterable[str]) -> bool:
    """Truth of a boolean formula on a single letter"""
    labels = labels if isinstance(labels, (set, frozenset)) else frozenset(labels)
    if isinstance(formula, Prop):
        return formula.name in labels
    if isinstance(formula, Const):
        return formula.value
    if isinstance(formula, Not):
        return not eval_boolean(formula.arg, labels)
    if isinstance(formula, And):
        if not eval_boolean(formula.left, labels):
            return False
        return eval_boolean(formula.right, labels)
    if isinstance(formula, Or):
        if eval_boolean(formula.left, labels):
            return True
        return eval_boolean(formula.right, labels)
    raise TypeError(
        f"temporal formula {format_mitl(formula)} has no single-letter value"
    )


# ---------------------------------------------------------------- timed words


@dataclass(frozen=True)
class TimedWord:
    """
    Finite or lasso-shaped timed word

    A lasso repeats letters[loop:] forever; each repetition is shifted in time
    by cycle_duration, which must exceed the time spanned by the stored cycle.
    """

    letters: Tuple[FrozenSet[str], ...]
    times: Tuple[Fraction, ...]
    loop: Optional[int] = None
    cycle_duration: Optional[Fraction] = None

    def __post_init__(self):
        letters = tuple(frozenset(letter) for letter in self.letters)
        times = tuple(Fraction(t) for t in self.times)
        object.__setattr__(self, "letters", letters)
        object.__setattr__(self, "times", times)
        if len(letters) != len(times):
            raise ValueError("letters and timestamps must have the same length")
        if not letters:
            raise ValueError("a timed word needs at least one letter")
        if times[0] < 0:
            raise ValueError("timestamps must be nonnegative")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("timestamps must be strictly increasing")
        if self.loop is None:
            if self.cycle_duration is not None:
                raise ValueError("a finite word has no cycle duration")
            return
        if not 0 <= self.loop < len(letters):
            raise ValueError(f"loop start {self.loop} outside the stored word")
        if self.cycle_duration is None:
            raise ValueError("a lasso word needs a cycle duration")
        duration = Fraction(self.cycle_duration)
        if duration <= times[-1] - times[self.loop]:
            raise ValueError("cycle duration must exceed the time spanned by the cycle")
        object.__setattr__(self, "cycle_duration", duration)

    @classmethod
    def finite(cls, pairs: Sequence[Tuple[Iterable[str], object]]) -> "TimedWord":
        letters = tuple(frozenset(p) for p, _ in pairs)
        return cls(letters, tuple(Fraction(t) for _, t in pairs))

    @classmethod
    def lasso(
        cls,
        prefix: Sequence[Tuple[Iterable[str], object]],
        cycle: Sequence[Tuple[Iterable[str], object]],
        cycle_duration,
    ) -> "TimedWord":
        if not cycle:
            raise ValueError("a lasso needs a nonempty cycle")
        pairs = list(prefix) + list(cycle)
        return cls(
            tuple(frozenset(p) for p, _ in pairs),
            tuple(Fraction(t) for _, t in pairs),
            loop=len(prefix),
            cycle_duration=Fraction(cycle_duration),
        )

    @classmethod
    def uniform(
        cls, prefix: Sequence[Iterable[str]], cycle: Sequence[Iterable[str]], period
    ) -> "TimedWord":
        """Timestamps mu * period; an empty cycle gives a finite word"""
        period = Fraction(period)
        letters = [frozenset(p) for p in list(prefix) + list(cycle)]
        times = [period * mu for mu in range(len(letters))]
        if not cycle:
            return cls(tuple(letters), tuple(times))
        return cls(
            tuple(letters),
            tuple(times),
            loop=len(prefix),
            cycle_duration=period * len(cycle),
        )

    @property
    def is_lasso(self) -> bool:
        return self.loop is not None

    @property
    def cycle_length(self) -> int:
        return len(self.letters) - self.loop if self.loop is not None else 0

    def __len__(self) -> int:
        return len(self.letters)

    def canonical(self, position: int) -> int:
        if position < len(self.letters) or self.loop is None:
            return position
        return self.loop + (position - self.loop) % self.cycle_length

    def letter(self, position: int) -> FrozenSet[str]:
        return self.letters[self.canonical(position)]

    def time(self, position: int) -> Fraction:
        if position < len(self.times) or self.loop is None:
            return self.times[position]
        laps, offset = divmod(position - self.loop, self.cycle_length)
        return self.times[self.loop + offset] + laps * self.cycle_duration

    def scaled(self, factor) -> "TimedWord":
        factor = Fraction(factor)
        duration = None
        if self.cycle_duration is not None:
            duration = self.cycle_duration * factor
        times = tuple(t * factor for t in self.times)
        return TimedWord(self.letters, times, self.loop, duration)


# ---------------------------------------------------------------- evaluation

Verdict = Optional[bool]


def _and3(a: Verdict, b: Verdict) -> Verdict:
    if a is False or b is False:
        return False
    if a is None or b is None:
        return None
    return True


def _or3(a: Verdict, b: Verdict) -> Verdict:
    if a is True or b is True:
        return True
    if a is None or b is None:
        return None
    return False


class _Evaluator:
    def __init__(self, word: TimedWord):
        self.word = word
        self.memo: Dict[Tuple[Formula, int], Verdict] = {}

    def value(self, formula: Formula, position: int) -> Verdict:
        key = (formula, self.word.canonical(position))
        if key not in self.memo:
            self.memo[key] = self._compute(formula, position)
        return self.memo[key]

    def _compute(self, formula: Formula, position: int) -> Verdict:
        if isinstance(formula, Prop):
            return formula.name in self.word.letter(position)
        if isinstance(formula, Const):
            return formula.value
        if isinstance(formula, Not):
            inner = self.value(formula.arg, position)
            return None if inner is None else not inner
        if isinstance(formula, And):
            left = self.value(formula.left, position)
            if left is False:
                return False
            return _and3(left, self.value(formula.right, position))
        if isinstance(formula, Or):
            left = self.value(formula.left, position)
            if left is True:
                return True
            return _or3(left, self.value(formula.right, position))
        if isinstance(formula, Next):
            return self._next(formula, position)
        if isinstance(formula, Eventually):
            return self._eventually(formula, position)
        if isinstance(formula, Always):
            return self._always(formula, position)
        if isinstance(formula, Until):
            return self._until(formula, position)
        raise TypeError(f"not a formula: {formula!r}")

    def _scan(
        self, position: int, interval: Interval
    ) -> Tuple[List[Tuple[int, Fraction]], bool]:
        """
        Positions from `position` whose offset does not exceed the upper bound

        With an unbounded interval on a lasso the scan stops one full cycle
        after the first cycle position inside the window: truth values repeat
        with the cycle from there on.
        """
        word = self.word
        start = word.time(position)
        scanned = []
        if word.is_lasso:
            stop = None
            mu = position
            while True:
                offset = word.time(mu) - start
                if offset > interval.hi:
                    break
                scanned.append((mu, offset))
                if not interval.bounded:
                    if stop is None and offset >= interval.lo and mu >= word.loop:
                        stop = mu + word.cycle_length - 1
                    if stop is not None and mu >= stop:
                        break
                mu += 1
            return scanned, True
        for mu in range(position, len(word)):
            offset = word.time(mu) - start
            if offset > interval.hi:
                return scanned, True
            scanned.append((mu, offset))
        complete = interval.bounded and word.times[-1] - start >= interval.hi
        return scanned, complete

    def _next(self, formula: Next, position: int) -> Verdict:
        if not self.word.is_lasso and position + 1 >= len(self.word):
            return None
        delay = self.word.time(position + 1) - self.word.time(position)
        if not formula.interval.contains(delay):
            return False
        return self.value(formula.arg, position + 1)

    def _eventually(self, formula: Eventually, position: int) -> Verdict:
        scanned, complete = self._scan(position, formula.interval)
        result: Verdict = False
        for mu, offset in scanned:
            if offset < formula.interval.lo:
                continue
            result = _or3(result, self.value(formula.arg, mu))
            if result is True:
                return True
        return result if complete else None

    def _always(self, formula: Always, position: int) -> Verdict:
        scanned, complete = self._scan(position, formula.interval)
        result: Verdict = True
        for mu, offset in scanned:
            if offset < formula.interval.lo:
                continue
            result = _and3(result, self.value(formula.arg, mu))
            if result is False:
                return False
        return result if complete else None

    def _until(self, formula: Until, position: int) -> Verdict:
        scanned, complete = self._scan(position, formula.interval)
        held: Verdict = True
        result: Verdict = False
        for mu, offset in scanned:
            if offset >= formula.interval.lo:
                result = _or3(result, _and3(held, self.value(formula.right, mu)))
                if result is True:
                    return True
            held = _and3(held, self.value(formula.left, mu))
            if held is False:
                return result
        return result if complete else None


def evaluate(formula: Formula, word: TimedWord, position: int = 0) -> Verdict:
    """
    Three-valued satisfaction at a position

    Returns None when a finite word is too short to decide; lasso words are
    always decided.
    """
    if position < 0 or (not word.is_lasso and position >= len(word)):
        raise IndexError(f"position {position} outside a word of length {len(word)}")
    return _Evaluator(word).value(formula, position)


def eval_mitl(formula: Formula, word: TimedWord, position: int = 0) -> bool:
    """
    Satisfaction of a formula at a position of a timed word

    Raises:
        InconclusiveError: the finite word ends inside a window that decides the verdict
        IndexError: position outside a finite word
    """
    verdict = evaluate(formula, word, position)
    if verdict is None:
        raise InconclusiveError(
            f"word ending at t={word.times[-1]} is too short to decide "
            f"{format_mitl(formula)} at position {position}"
        )
    return verdict
