"""
Coupled agent dynamics x_i' = f_i(x_i, x_bar_i) + u_i

The built-in family is affine in the states (self gain, one gain matrix per
neighbor, constant drift) plus squared-sine couplings g * sin^2(x_i - x_j)
taken component-wise. Constants M, L_i and L_bar_i are computed analytically.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from mmp.errors import DynamicsError
from mmp.geometry import Bounds

logger = logging.getLogger(__name__)

# positive floor for Lipschitz constants that vanish analytically
LIPSCHITZ_FLOOR = 1e-9

Number = Union[float, Fraction]


def _frozen(values, shape) -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SineSquaredTerm:
    """g * sin^2(x_i - x_j), component-wise"""

    neighbor: int
    gain: float


@dataclass(frozen=True, eq=False)
class DynamicsSpec:
    neighbors: Tuple[int, ...]
    self_gain: np.ndarray
    neighbor_gains: np.ndarray
    sin2_terms: Tuple[SineSquaredTerm, ...] = ()
    drift: np.ndarray = field(default_factory=lambda: _frozen([0.0, 0.0], (2,)))
    u_max: float = 1.0
    sensing_radius: float = math.inf

    @classmethod
    def create(
        cls,
        neighbors: Sequence[int],
        self_gain=None,
        neighbor_gains: Optional[Mapping[int, object]] = None,
        sin2_terms: Sequence[SineSquaredTerm] = (),
        drift=None,
        u_max: float = 1.0,
        sensing_radius: float = math.inf,
    ) -> "DynamicsSpec":
        """
        Build a spec from plain lists

        Gains may be scalars (multiples of the identity) or 2x2 nested lists.
        Neighbors without an entry in neighbor_gains get a zero gain.
        """
        neighbors = tuple(neighbors)
        if len(set(neighbors)) != len(neighbors):
            raise DynamicsError(f"duplicate neighbors {neighbors}")
        gains = neighbor_gains or {}
        unknown = [j for j in gains if j not in neighbors]
        unknown += [t.neighbor for t in sin2_terms if t.neighbor not in neighbors]
        if unknown:
            raise DynamicsError(
                f"couplings reference agents {sorted(set(unknown))} outside {neighbors}"
            )
        if u_max < 0:
            raise DynamicsError(f"u_max must be nonnegative, got {u_max}")
        stacked = [_as_matrix(gains.get(j, 0.0)) for j in neighbors]
        own = _as_matrix(0.0 if self_gain is None else self_gain)
        coupled = stacked if stacked else np.zeros((0, 2, 2))
        return cls(
            neighbors=neighbors,
            self_gain=_frozen(own, (2, 2)),
            neighbor_gains=_frozen(coupled, (len(neighbors), 2, 2)),
            sin2_terms=tuple(sin2_terms),
            drift=_frozen([0.0, 0.0] if drift is None else drift, (2,)),
            u_max=float(u_max),
            sensing_radius=float(sensing_radius),
        )

    @property
    def neighbor_count(self) -> int:
        return len(self.neighbors)


def _as_matrix(value) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return float(arr) * np.eye(2)
    if arr.shape != (2, 2):
        raise DynamicsError(
            f"gain must be a scalar or 2x2 matrix, got shape {arr.shape}"
        )
    return arr


def eval_coupling(spec: DynamicsSpec, x_i, neighbor_states) -> np.ndarray:
    """
    f_i(x_i, x_bar_i), broadcasting over leading batch dimensions

    Args:
        x_i: (..., 2)
        neighbor_states: (..., N_i, 2) ordered as spec.neighbors
    """
    x = np.asarray(x_i, dtype=float)
    xb = np.asarray(neighbor_states, dtype=float)
    if xb.ndim < 2 or xb.shape[-2] != spec.neighbor_count:
        raise DynamicsError(
            f"expected {spec.neighbor_count} neighbor states, "
            f"got array of shape {xb.shape}"
        )
    coupled = np.einsum("nkj,...nj->...k", spec.neighbor_gains, xb)
    out = x @ spec.self_gain.T + coupled + spec.drift
    for term in spec.sin2_terms:
        idx = spec.neighbors.index(term.neighbor)
        out = out + term.gain * np.sin(x - xb[..., idx, :]) ** 2
    return out


@dataclass(frozen=True)
class DerivedConstants:
    M: float
    L: float
    L_bar: float


def derive_constants(spec: DynamicsSpec, bounds: Bounds) -> DerivedConstants:
    """
    Analytic bounds over W x W^N: sup-norm M and Lipschitz constants L, L_bar

    The affine part attains its largest norm at a vertex of the box product;
    each sin^2 term adds |g| * sqrt(2). The sin^2 slope is at most 1 per
    coordinate.
    """
    corners = np.array(Bounds(*bounds).vertices())
    n = spec.neighbor_count
    affine_max = 0.0
    for combo in itertools.product(range(4), repeat=n + 1):
        x = corners[combo[0]]
        xb = corners[list(combo[1:])] if n else np.zeros((0, 2))
        coupled = np.einsum("nkj,nj->k", spec.neighbor_gains, xb)
        value = x @ spec.self_gain.T + coupled + spec.drift
        affine_max = max(affine_max, float(np.linalg.norm(value)))
    sin2_total = sum(abs(t.gain) for t in spec.sin2_terms)
    M = affine_max + math.sqrt(2.0) * sin2_total

    L = float(np.linalg.norm(spec.self_gain, 2)) + sin2_total
    if n:
        wide = np.hstack(list(spec.neighbor_gains))
        per_neighbor = [
            sum(abs(t.gain) for t in spec.sin2_terms if t.neighbor == j)
            for j in spec.neighbors
        ]
        sin2_slope = math.sqrt(sum(c * c for c in per_neighbor))
        L_bar = float(np.linalg.norm(wide, 2)) + sin2_slope
    else:
        L_bar = 0.0
    return DerivedConstants(
        M=M, L=max(L, LIPSCHITZ_FLOOR), L_bar=max(L_bar, LIPSCHITZ_FLOOR)
    )


@dataclass(frozen=True)
class AgentContext:
    agent: int
    spec: DynamicsSpec
    side_length: float
    constants: DerivedConstants

    @classmethod
    def create(
        cls, agent: int, spec: DynamicsSpec, bounds: Bounds, side_length: float
    ) -> "AgentContext":
        return cls(
            agent=agent,
            spec=spec,
            side_length=float(side_length),
            constants=derive_constants(spec, bounds),
        )

    @property
    def neighbors(self) -> Tuple[int, ...]:
        return self.spec.neighbors

    @property
    def neighbor_count(self) -> int:
        return self.spec.neighbor_count

    @property
    def u_max(self) -> float:
        return self.spec.u_max

    @property
    def M(self) -> float:
        return self.constants.M

    @property
    def rho_tilde(self) -> float:
        c = self.constants
        spread = 2.0 * math.sqrt(3.0) * self.side_length
        return spread * c.L_bar * self.neighbor_count / c.L


def error_bound(e0_norm: float, dt: Number, M: float, u_max: float) -> float:
    """||e(s)|| <= ||e(t_k)|| + (s - t_k)(M + u_max)"""
    if dt < 0:
        raise DynamicsError(f"elapsed time must be nonnegative, got {dt}")
    return float(e0_norm) + float(dt) * (M + u_max)


def rho(ctx: AgentContext, dt, e0_norm: float):
    """
    Bound on the gap between the true and the frozen-neighbor prediction after dt

    min{rho_tilde (e^(L dt) - 1), 2 ||e0|| + 2 dt (M + u_max)}; dt may be an array.
    """
    elapsed = np.asarray(dt, dtype=float)
    if np.any(elapsed < 0):
        raise DynamicsError(f"elapsed time must be nonnegative, got {dt}")
    exponential = ctx.rho_tilde * np.expm1(ctx.constants.L * elapsed)
    linear = 2.0 * e0_norm + 2.0 * elapsed * (ctx.M + ctx.u_max)
    bound = np.minimum(exponential, linear)
    return float(bound) if bound.ndim == 0 else bound


def rk4_step(
    fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float
) -> np.ndarray:
    """One classical Runge-Kutta step of an autonomous field, control held"""
    k1 = h * fn(x)
    k2 = h * fn(x + k1 / 2)
    k3 = h * fn(x + k2 / 2)
    k4 = h * fn(x + k3)
    return x + (k1 + 2 * k2 + 2 * k3 + k4) / 6


def _step_count(span: Number, dt: Number) -> int:
    if dt <= 0:
        raise DynamicsError(f"step must be positive, got {dt}")
    if isinstance(span, Fraction) and isinstance(dt, Fraction):
        ratio = span / dt
        if ratio.denominator != 1:
            raise DynamicsError(f"step {dt} does not divide interval {span}")
        return int(ratio)
    ratio = float(span) / float(dt)
    count = int(round(ratio))
    if abs(ratio - count) > 1e-9 * max(1.0, ratio):
        raise DynamicsError(f"step {dt} does not divide interval {span}")
    return count


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    # first (agent, time) leaving the workspace per agent
    exits: List[Tuple[int, float]] = field(default_factory=list)


class CoupledSystem:
    """All agents' dynamics, ordered by agent id"""

    def __init__(self, specs: Mapping[int, DynamicsSpec], bounds: Bounds):
        self.agents: Tuple[int, ...] = tuple(sorted(specs))
        self.specs: Dict[int, DynamicsSpec] = dict(specs)
        self.bounds = Bounds(*bounds)
        self._position = {agent: n for n, agent in enumerate(self.agents)}
        for agent, spec in self.specs.items():
            for j in spec.neighbors:
                if j not in self._position:
                    raise DynamicsError(f"agent {agent} lists unknown neighbor {j}")
                if agent not in self.specs[j].neighbors:
                    raise DynamicsError(f"neighbor sets not symmetric: {agent} -> {j}")
        self._neighbor_index = {
            a: [self._position[j] for j in self.specs[a].neighbors]
            for a in self.agents
        }

    def index(self, agent: int) -> int:
        return self._position[agent]

    def velocity(self, states: np.ndarray, controls: np.ndarray) -> np.ndarray:
        out = np.empty_like(states)
        for n, agent in enumerate(self.agents):
            rows = self._neighbor_index[agent]
            xb = states[rows] if rows else np.zeros((0, 2))
            out[n] = eval_coupling(self.specs[agent], states[n], xb)
        return out + controls

    def integrate(
        self, states, controls, t0: Number, t1: Number, dt: Number
    ) -> Trajectory:
        """
        Fixed-step RK4 of the coupled system

        Args:
            states: (N, 2) initial positions in agent order
            controls: (N, 2) held over [t0, t1), or (P, N, 2) pieces splitting it
                evenly
            dt: integration step, must divide t1 - t0 and each piece

        Leaving the workspace is recorded in Trajectory.exits, never clamped.
        """
        x = np.array(states, dtype=float)
        u = np.asarray(controls, dtype=float)
        if u.ndim == 2:
            u = u[np.newaxis]
        if x.shape != (len(self.agents), 2) or u.shape[1:] != x.shape:
            raise DynamicsError(
                f"state/control shapes {x.shape} and {u.shape} "
                f"do not match {len(self.agents)} agents"
            )
        steps = _step_count(t1 - t0, dt)
        pieces = u.shape[0]
        if steps % pieces:
            raise DynamicsError(
                f"{steps} integration steps cannot be split "
                f"into {pieces} control pieces"
            )
        per_piece = steps // pieces
        h = float(dt)
        times = float(t0) + h * np.arange(steps + 1)
        out = np.empty((steps + 1,) + x.shape)
        out[0] = x
        exited: Dict[int, float] = {}
        self._record_exits(x, times[0], exited)
        for step in range(steps):
            piece = u[step // per_piece]
            x = rk4_step(lambda s: self.velocity(s, piece), x, h)
            out[step + 1] = x
            self._record_exits(x, times[step + 1], exited)
        if exited:
            first = min(exited.values())
            logger.warning(
                f"workspace_exit agents={sorted(exited)} first_time={first:.6g}"
            )
        return Trajectory(times=times, states=out, exits=sorted(exited.items()))

    def _record_exits(self, x: np.ndarray, t: float, exited: Dict[int, float]) -> None:
        b = self.bounds
        outside_x = (x[:, 0] < b.xmin) | (x[:, 0] > b.xmax)
        outside = outside_x | (x[:, 1] < b.ymin) | (x[:, 1] > b.ymax)
        for n in np.flatnonzero(outside):
            exited.setdefault(self.agents[n], t)
