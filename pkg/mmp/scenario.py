"""
Scenario files: YAML documents validated by pydantic models

A scenario starts with `format: mmp-scenario v1`. Rational quantities (period,
sampling period) are written as integers, decimals or "p/q" strings and are
converted exactly. Validation failures are reported with the line of the
offending YAML node.
"""

import logging
import math
from fractions import Fraction
from itertools import combinations
from pathlib import Path
from typing import (
    Annotated,
    Any,
    Dict,
    List,
    Literal,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import yaml
from pydantic import (
    BaseModel,
    BeforeValidator,
    ConfigDict,
    Field,
    PlainSerializer,
    ValidationError,
    model_validator,
)

from mmp.dynamics import AgentContext, DynamicsSpec, SineSquaredTerm
from mmp.errors import FormulaSyntaxError, IntervalError, ScenarioError
from mmp.geometry import Bounds, Partition, build_partition
from mmp.mitl import Formula, parse_mitl, propositions
from mmp.rocp import CostWeights, SolverConfig
from mmp.settings import load_solver_profiles

logger = logging.getLogger(__name__)

FORMAT_TAG = "mmp-scenario v1"


def to_fraction(value: Any) -> Fraction:
    """Exact conversion; floats go through their shortest decimal representation"""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise ValueError("expected a rational number, got a boolean")
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError(f"expected a finite rational, got {value}")
        return Fraction(repr(value))
    if isinstance(value, str):
        try:
            return Fraction(value.strip())
        except (ValueError, ZeroDivisionError):
            raise ValueError(
                f"expected an integer, decimal or p/q rational, got {value!r}"
            ) from None
    raise ValueError(f"expected a rational number, got {type(value).__name__}")


def fraction_text(value: Fraction) -> str:
    return str(value)


Rational = Annotated[
    Fraction,
    BeforeValidator(to_fraction),
    PlainSerializer(fraction_text, return_type=str),
]
Gain = Union[float, List[List[float]]]


class CouplingTerm(BaseModel):
    """gain * sin^2(x_i - x_j), component-wise"""

    model_config = ConfigDict(extra="forbid")

    neighbor: int
    gain: float = -1.0


class DynamicsModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    self_gain: Gain = 0.0
    neighbor_gains: Dict[int, Gain] = Field(default_factory=dict)
    sin2: List[CouplingTerm] = Field(default_factory=list)
    drift: Tuple[float, float] = (0.0, 0.0)


class AgentSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: int
    initial: Tuple[float, float]
    formula: str
    u_max: float = Field(ge=0)
    sensing_radius: float = Field(gt=0)
    neighbors: List[int] = Field(default_factory=list)
    alphabet: Optional[List[str]] = None
    dynamics: DynamicsModel = Field(default_factory=DynamicsModel)


class LabelModel(BaseModel):
    """Proposition placed on a region given by id or by a point inside it"""

    model_config = ConfigDict(extra="forbid")

    name: str = Field(pattern=r"^[A-Za-z_][A-Za-z0-9_]*$")
    region: Optional[int] = None
    at: Optional[Tuple[float, float]] = None

    @model_validator(mode="after")
    def _one_location(self) -> "LabelModel":
        if (self.region is None) == (self.at is None):
            raise ValueError("a label needs exactly one of 'region' or 'at'")
        return self


class WeightsModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    q: Tuple[float, float] = (1.0, 1.0)
    r: Tuple[float, float] = (1.0, 1.0)
    p: Tuple[float, float] = (1.0, 1.0)


class SolverModel(BaseModel):
    """Explicit solver keys; unset keys come from the profile, then the defaults"""

    model_config = ConfigDict(extra="forbid")

    profile: Optional[str] = None
    starts: Optional[int] = None
    iterations: Optional[int] = None
    resolve_iterations: Optional[int] = None
    tolerance: Optional[float] = None
    prediction_substeps: Optional[int] = None
    dense_substeps: Optional[int] = None
    tightening: Optional[Literal["robust", "nominal"]] = None
    terminal_samples: Optional[int] = None
    workers: Optional[int] = None
    max_depth: Optional[int] = None
    seed: Optional[int] = None

    def keys(self) -> Dict[str, Any]:
        dumped = self.model_dump(exclude={"profile"})
        return {k: v for k, v in dumped.items() if v is not None}


class Scenario(BaseModel):
    model_config = ConfigDict(extra="forbid", arbitrary_types_allowed=True)

    format: Literal["mmp-scenario v1"]
    name: str = "scenario"
    workspace: Tuple[float, float, float, float]
    side_length: float = Field(gt=0)
    period: Rational
    sampling: Rational
    horizon_cycles: int = Field(default=2, ge=1)
    labels: List[LabelModel] = Field(default_factory=list)
    agents: List[AgentSpec] = Field(min_length=1)
    weights: WeightsModel = Field(default_factory=WeightsModel)
    solver: SolverModel = Field(default_factory=SolverModel)

    @property
    def bounds(self) -> Bounds:
        return Bounds(*self.workspace)

    @property
    def steps(self) -> int:
        """m with T = m h"""
        return int(self.period / self.sampling)

    @property
    def agent_ids(self) -> List[int]:
        return sorted(a.id for a in self.agents)

    def agent(self, agent_id: int) -> AgentSpec:
        for spec in self.agents:
            if spec.id == agent_id:
                return spec
        raise KeyError(f"no agent with id {agent_id}")

    def formula(self, agent_id: int) -> Formula:
        return parse_mitl(self.agent(agent_id).formula)

    def alphabet(self, agent_id: int) -> frozenset:
        spec = self.agent(agent_id)
        if spec.alphabet is not None:
            return frozenset(spec.alphabet)
        return propositions(self.formula(agent_id))

    def partition(self) -> Partition:
        """Hexagonal partition with the scenario's labels applied"""
        plain = build_partition(self.bounds, self.side_length)
        label_map: Dict[int, set] = {}
        for label in self.labels:
            region = label.region
            if region is None:
                region = plain.point_to_region(label.at)
            label_map.setdefault(region, set()).add(label.name)
        return build_partition(self.bounds, self.side_length, label_map)

    def dynamics_spec(self, agent_id: int) -> DynamicsSpec:
        spec = self.agent(agent_id)
        model = spec.dynamics
        return DynamicsSpec.create(
            neighbors=spec.neighbors,
            self_gain=model.self_gain,
            neighbor_gains=model.neighbor_gains,
            sin2_terms=[SineSquaredTerm(t.neighbor, t.gain) for t in model.sin2],
            drift=model.drift,
            u_max=spec.u_max,
            sensing_radius=spec.sensing_radius,
        )

    def dynamics_specs(self) -> Dict[int, DynamicsSpec]:
        return {agent_id: self.dynamics_spec(agent_id) for agent_id in self.agent_ids}

    def context(self, agent_id: int) -> AgentContext:
        return AgentContext.create(
            agent_id, self.dynamics_spec(agent_id), self.bounds, self.side_length
        )

    def cost_weights(self) -> CostWeights:
        return CostWeights(q=self.weights.q, r=self.weights.r, p=self.weights.p)

    def solver_config(
        self,
        profiles: Optional[Mapping[str, Mapping[str, Any]]] = None,
        **overrides: Any,
    ) -> SolverConfig:
        """
        Merge built-in defaults, the named profile, scenario keys and overrides

        Raises:
            ScenarioError: unknown profile or invalid merged values
        """
        merged: Dict[str, Any] = {}
        if self.solver.profile:
            registry = load_solver_profiles() if profiles is None else profiles
            if self.solver.profile not in registry:
                raise ScenarioError(f"unknown solver profile {self.solver.profile!r}")
            merged.update(registry[self.solver.profile])
        merged.update(self.solver.keys())
        merged.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return SolverConfig(**merged)
        except (TypeError, ValueError) as e:
            raise ScenarioError(f"invalid solver configuration: {e}") from None

    def initial_positions(self) -> Dict[int, Tuple[float, float]]:
        return {spec.id: spec.initial for spec in self.agents}


# ---------------------------------------------------------------- validation

YamlPath = Tuple[Union[str, int], ...]


def consistency_problems(scenario: Scenario) -> List[Tuple[YamlPath, str]]:
    """
    Cross-field checks pydantic cannot express per field, with the YAML path
    of each problem
    """
    problems: List[Tuple[YamlPath, str]] = []
    if scenario.sampling <= 0 or scenario.period <= 0:
        problems.append((("period",), "period and sampling must be positive"))
    elif (scenario.period / scenario.sampling).denominator != 1:
        message = (
            f"period {scenario.period} is not an integer multiple of "
            f"sampling {scenario.sampling}"
        )
        problems.append((("sampling",), message))
    bounds = scenario.bounds
    if not (bounds.xmax > bounds.xmin and bounds.ymax > bounds.ymin):
        message = "workspace must be [xmin, ymin, xmax, ymax] with positive extent"
        problems.append((("workspace",), message))
        return problems

    ids: Dict[int, int] = {}
    for index, spec in enumerate(scenario.agents):
        if spec.id in ids:
            problems.append((("agents", index, "id"), f"duplicate agent id {spec.id}"))
        ids[spec.id] = index
    for index, spec in enumerate(scenario.agents):
        where = ("agents", index)
        listed = where + ("neighbors",)
        for j in spec.neighbors:
            if j == spec.id:
                problems.append((listed, f"agent {spec.id} lists itself as a neighbor"))
            elif j not in ids:
                problems.append((listed, f"agent {spec.id} lists unknown neighbor {j}"))
            elif spec.id not in scenario.agents[ids[j]].neighbors:
                message = f"neighbor sets not symmetric: {spec.id} -> {j}"
                problems.append((listed, message))
        coupled = set(spec.dynamics.neighbor_gains)
        coupled |= {t.neighbor for t in spec.dynamics.sin2}
        stray = sorted(coupled - set(spec.neighbors))
        if stray:
            message = f"couplings reference agents {stray} that are not neighbors"
            problems.append((where + ("dynamics",), message))
        if not bounds.contains(*spec.initial):
            message = f"initial position {spec.initial} outside the workspace"
            problems.append((where + ("initial",), message))
        try:
            formula = parse_mitl(spec.formula)
        except (FormulaSyntaxError, IntervalError) as e:
            problems.append((where + ("formula",), f"formula: {e}"))
            continue
        if spec.alphabet is not None:
            missing = propositions(formula) - set(spec.alphabet)
            if missing:
                message = f"formula propositions {sorted(missing)} not in alphabet"
                problems.append((where + ("alphabet",), message))

    by_id = {spec.id: spec for spec in scenario.agents}
    for a, b in combinations(sorted(by_id), 2):
        if b not in by_id[a].neighbors:
            continue
        distance = math.dist(by_id[a].initial, by_id[b].initial)
        limit = min(by_id[a].sensing_radius, by_id[b].sensing_radius)
        if not distance < limit:
            message = (
                f"agents {a} and {b} start {distance:.6g} apart, "
                f"not below sensing radius {limit}"
            )
            problems.append((("agents", ids[a], "initial"), message))

    for index, label in enumerate(scenario.labels):
        if label.at is not None and not bounds.contains(*label.at):
            message = f"label point {label.at} outside the workspace"
            problems.append((("labels", index, "at"), message))
    if not problems:
        count = len(build_partition(bounds, scenario.side_length))
        for index, label in enumerate(scenario.labels):
            if label.region is not None and not 0 <= label.region < count:
                message = f"region {label.region} does not exist"
                problems.append((("labels", index, "region"), message))
    return problems


def _node_line(
    root: Optional[yaml.Node], path: Sequence[Union[str, int]]
) -> Optional[int]:
    """1-based line of the deepest YAML node reachable along path"""
    if root is None:
        return None
    node = root
    for key in path:
        child = None
        if isinstance(node, yaml.MappingNode):
            for key_node, value_node in node.value:
                if str(key_node.value) == str(key):
                    child = value_node
                    break
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int):
            if 0 <= key < len(node.value):
                child = node.value[key]
        if child is None:
            break
        node = child
    return node.start_mark.line + 1


def parse_scenario(text: str) -> Scenario:
    """
    Parse and validate scenario text

    Raises:
        ScenarioError: YAML syntax, schema or consistency problem, with its line
            when known
    """
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ScenarioError(
            f"invalid YAML: {getattr(e, 'problem', e)}",
            line=mark.line + 1 if mark is not None else None,
        ) from None
    if not isinstance(data, dict):
        raise ScenarioError("scenario must be a YAML mapping", line=1)
    if data.get("format") != FORMAT_TAG:
        raise ScenarioError(
            f"first key must be 'format: {FORMAT_TAG}'",
            line=_node_line(root, ("format",)),
        )
    try:
        scenario = Scenario.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        raise ScenarioError(
            f"{location}: {first['msg']}", line=_node_line(root, first["loc"])
        ) from None
    problems = consistency_problems(scenario)
    if problems:
        path, message = problems[0]
        raise ScenarioError(message, line=_node_line(root, path))
    logger.debug(
        f"scenario name={scenario.name} agents={scenario.agent_ids} "
        f"steps={scenario.steps}"
    )
    return scenario


def load_scenario(path: Union[str, Path]) -> Scenario:
    path = Path(path)
    if not path.exists():
        raise ScenarioError(f"scenario file not found: {path}")
    return parse_scenario(path.read_text())


def format_scenario(scenario: Scenario) -> str:
    """Canonical YAML text; parse_scenario(format_scenario(s)) == s"""
    data = scenario.model_dump(mode="json", exclude_none=True)
    return yaml.safe_dump(data, sort_keys=False, default_flow_style=None)


def with_overrides(scenario: Scenario, **solver_keys: Any) -> Scenario:
    """Copy with solver keys replaced, ignoring None values"""
    keys = {k: v for k, v in solver_keys.items() if v is not None}
    if not keys:
        return scenario
    solver = scenario.solver.model_copy(update=keys)
    return scenario.model_copy(update={"solver": solver})
