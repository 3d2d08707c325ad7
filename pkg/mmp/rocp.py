"""
Sampled-data robust optimal control for one region-to-region transition

The controller re-solves a decreasing-horizon problem at every sampling instant
t_k + z h, z = 0..m-1, so that the agent reaches the terminal set around the
target reference exactly at t_k + T. Predictions hold neighbors frozen at their
estimates; in robust mode the deviation bound rho tightens the state constraints.

Solver: direct shooting over piecewise-constant inputs, multi-start projected
descent on a quadratic exterior penalty, candidates verified on the dense grid.
"""

import itertools
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple

import numpy as np

from mmp.dynamics import AgentContext, eval_coupling, rho, rk4_step
from mmp.errors import (
    DynamicsError,
    GeometryError,
    OutOfWorkspaceError,
    TerminalDesignError,
    WeightsError,
)
from mmp.geometry import SQRT3, Partition, segment_signed_distance

logger = logging.getLogger(__name__)

TIGHTENING_MODES = ("robust", "nominal")
KAPPA_GRID = (0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
LEVEL_FRACTIONS = tuple(round(0.95 - 0.05 * k, 2) for k in range(19))
PENALTY_WEIGHT = 1e4
# neighbor sweeps larger than this keep their extremes plus a seeded sample
MAX_SWEEP = 729


@dataclass(frozen=True)
class SolverConfig:
    starts: int = 16
    iterations: int = 200
    resolve_iterations: int = 20
    tolerance: float = 1e-6
    prediction_substeps: int = 4
    dense_substeps: int = 20
    tightening: str = "robust"
    terminal_samples: int = 1000
    workers: int = 1
    max_depth: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.tightening not in TIGHTENING_MODES:
            raise ValueError(
                f"tightening must be one of {TIGHTENING_MODES}, "
                f"got {self.tightening!r}"
            )
        if self.starts < 0 or self.iterations < 0 or self.resolve_iterations < 0:
            raise ValueError("solver budgets must be nonnegative")
        counts = (self.prediction_substeps, self.dense_substeps, self.terminal_samples)
        if min(counts) < 1:
            raise ValueError("substep and sample counts must be positive")

    @property
    def robust(self) -> bool:
        return self.tightening == "robust"


@dataclass(frozen=True)
class CostWeights:
    """Diagonals of Q, R and P"""

    q: Tuple[float, float] = (1.0, 1.0)
    r: Tuple[float, float] = (1.0, 1.0)
    p: Tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if len(self.q) != 2 or len(self.r) != 2 or len(self.p) != 2:
            raise WeightsError("weights are diagonals of 2x2 matrices")
        if min(self.q) < 0:
            raise WeightsError(f"Q must be nonnegative, got {self.q}")
        if min(self.r) <= 0 or min(self.p) <= 0:
            raise WeightsError(f"R and P must be positive, got {self.r} and {self.p}")

    @property
    def m_lower(self) -> float:
        return min(*self.q, *self.r)

    @property
    def m_upper(self) -> float:
        return max(*self.q, *self.r)


def running_cost(e, u, w: CostWeights):
    """F(e, u) = e'Qe + u'Ru, over leading batch dimensions"""
    e = np.asarray(e, dtype=float)
    u = np.asarray(u, dtype=float)
    state = np.sum(np.asarray(w.q) * e * e, axis=-1)
    return state + np.sum(np.asarray(w.r) * u * u, axis=-1)


def terminal_cost(e, w: CostWeights):
    e = np.asarray(e, dtype=float)
    return np.sum(np.asarray(w.p) * e * e, axis=-1)


def lipschitz_F(w: CostWeights, eps_bar: float) -> float:
    return 2.0 * eps_bar * max(abs(v) for v in w.q)


def lipschitz_V(w: CostWeights, alpha1: float) -> float:
    return 2.0 * max(w.p) * math.sqrt(alpha1 / min(w.p))


@dataclass(frozen=True)
class TerminalIngredients:
    """
    Local controller kappa(e) = -kappa e + hold_input and its level sets

    hold_input = -f(x_des, x_hat) keeps the nominal model at the reference.
    """

    kappa: float
    alpha1: float
    alpha2: float
    r_term: float
    L_F: float
    L_V: float
    rho_bar: float
    hold_input: Tuple[float, float] = (0.0, 0.0)

    def control(self, e) -> np.ndarray:
        return -self.kappa * np.asarray(e, dtype=float) + np.asarray(self.hold_input)


def _sunflower(count: int) -> np.ndarray:
    """Evenly spread deterministic samples of the unit disk"""
    k = np.arange(count)
    radius = np.sqrt((k + 0.5) / count)
    angle = k * math.pi * (3.0 - math.sqrt(5.0))
    return np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)


def _union_extremes(
    partition: Partition, estimate: np.ndarray, reach: float
) -> np.ndarray:
    """
    Candidate true positions of one neighbor: its estimate plus the vertices of
    the region holding it and of that region's neighbors

    Estimates outside the workspace fall back to 8 points at distance reach.
    """
    try:
        home = partition.point_to_region(estimate)
    except OutOfWorkspaceError:
        angles = np.arange(8) * math.pi / 4
        ring = estimate + reach * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        return np.vstack([estimate[np.newaxis], ring])
    ids = [home, *partition.neighbors(home).values()]
    vertices = np.vstack(
        [np.asarray(partition.region(i).polygon.exterior.coords)[:-1] for i in ids]
    )
    vertices = np.unique(np.round(vertices, 9), axis=0)
    return np.vstack([estimate[np.newaxis], vertices])


def _support_extremes(points: np.ndarray) -> List[int]:
    """Indices of the points extreme along the 8 compass directions"""
    angles = np.arange(8) * math.pi / 4
    directions = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return sorted(set(np.argmax(points @ directions.T, axis=0).tolist()))


def _neighbor_sweep(options: Sequence[np.ndarray], seed: int = 0) -> np.ndarray:
    """
    Neighbor configurations (C, N, 2), one candidate position per neighbor

    The full product is used up to MAX_SWEEP configurations. Larger products
    keep every combination of the per-neighbor support extremes and add a
    seeded sample.
    """
    sizes = np.array([len(o) for o in options], dtype=np.int64)
    bases = np.concatenate([[1], np.cumprod(sizes[:-1])]).astype(np.int64)
    total = math.prod(int(s) for s in sizes)
    if total <= MAX_SWEEP:
        codes = np.arange(total, dtype=np.int64)
    else:
        extremes = [_support_extremes(o) for o in options]
        corners = np.array(
            [int(np.dot(combo, bases)) for combo in itertools.product(*extremes)],
            dtype=np.int64,
        )
        rng = np.random.default_rng(seed)
        sample = rng.choice(total, size=MAX_SWEEP, replace=False).astype(np.int64)
        codes = np.unique(np.concatenate([corners, sample]))
    digits = (codes[:, np.newaxis] // bases[np.newaxis, :]) % sizes[np.newaxis, :]
    return np.stack(
        [np.asarray(options[j])[digits[:, j]] for j in range(len(options))], axis=1
    )


def _error_radius(partition: Partition, target: int, reference: np.ndarray) -> float:
    """Largest distance from the reference to the target or one of its neighbors"""
    ids = [target, *partition.neighbors(target).values()]
    radius = 0.0
    for region_id in ids:
        coords = np.asarray(partition.region(region_id).polygon.exterior.coords)
        distances = np.linalg.norm(coords - reference, axis=1)
        radius = max(radius, float(np.max(distances)))
    return radius


def _estimates(ctx: AgentContext, neighbor_estimates) -> np.ndarray:
    xhat = np.asarray(neighbor_estimates, dtype=float).reshape(-1, 2)
    if len(xhat) != ctx.neighbor_count:
        raise DynamicsError(
            f"agent {ctx.agent} expects {ctx.neighbor_count} neighbor estimates, "
            f"got {len(xhat)}"
        )
    return xhat


def _kappa_candidates(ctx: AgentContext, cap: float) -> List[float]:
    """Grid gains, gains dominating the coupling Lipschitz term and the cap"""
    coupling = ctx.constants.L + ctx.neighbor_count * ctx.constants.L_bar
    candidates = set(KAPPA_GRID) | {coupling, 2.0 * coupling, cap}
    return sorted(k for k in candidates if KAPPA_GRID[0] <= k <= cap)


def _nonpositive(lhs: np.ndarray, scale: np.ndarray) -> bool:
    return bool(np.all(lhs <= 1e-9 * (1.0 + scale)))


def design_terminal(
    ctx: AgentContext,
    weights: CostWeights,
    partition: Partition,
    target: int,
    neighbor_estimates,
    config: Optional[SolverConfig] = None,
) -> TerminalIngredients:
    """
    Pick kappa and alpha1 so that V decreases along the local controller on Phi

    The local controller applies the hold input -f(x_des, x_hat) plus -kappa e.
    The running cost F(e, u) = e'Qe + u'Ru of the hold input itself is not
    dominated by V near e = 0, so the check

        dV/de . g(e, kappa(e)) + F(e, kappa(e)) - hold_excess(e) <= 0,
        hold_excess(e) = F(e, kappa(e)) - F(e, kappa(e) - hold_input)

    runs on deterministic samples of {V <= alpha1} with neighbors at their
    estimates. In robust mode the same inequality must also hold on the ring
    {alpha2 <= V <= alpha1} for every neighbor configuration drawn from the
    vertices of the region unions around the estimates, which keeps both
    level sets invariant under the neighbor deviation.
    Levels are tried from the largest down, kappa from the smallest up to the
    largest gain with kappa(e) inside the input bound on Phi.

    Raises:
        TerminalDesignError: no pair passes
    """
    config = config or SolverConfig()
    spec = ctx.spec
    reference = np.asarray(partition.region(target).reference, dtype=float)
    xhat = _estimates(ctx, neighbor_estimates)
    hold = -eval_coupling(spec, reference, xhat)
    ceiling = min(partition.inscribed_radius, partition.clearance(target))
    sweep = None
    if config.robust and ctx.neighbor_count:
        reach = 2.0 * SQRT3 * ctx.side_length
        options = [_union_extremes(partition, estimate, reach) for estimate in xhat]
        sweep = _neighbor_sweep(options, config.seed)
    unit = _sunflower(config.terminal_samples)
    p = np.asarray(weights.p)
    p_min = float(p.min())
    hold_norm = float(np.linalg.norm(hold))
    eps_bar = _error_radius(partition, target, reference)

    for fraction in LEVEL_FRACTIONS:
        r_term = fraction * ceiling
        alpha2 = p_min * r_term**2
        alpha1 = 2.0 * alpha2
        r1 = math.sqrt(alpha1 / p_min)
        cap = (ctx.u_max - hold_norm) / r1
        e = unit * np.sqrt(alpha1 / p)
        x = e + reference
        drift = eval_coupling(spec, x, xhat) + hold
        ring = np.sum(p * e * e, axis=-1) >= alpha2 * (1.0 - 1e-12)
        if sweep is not None:
            swept = eval_coupling(spec, x[ring][:, np.newaxis, :], sweep[np.newaxis])
            swept = swept + hold
        for kappa in _kappa_candidates(ctx, cap):
            u = hold - kappa * e
            F = running_cost(e, u, weights)
            excess = F - running_cost(e, u - hold, weights)
            dV = 2.0 * np.sum(p * e * (drift - kappa * e), axis=-1)
            if not _nonpositive(dV + F - excess, np.abs(dV) + F):
                continue
            if sweep is not None:
                er = e[ring][:, np.newaxis, :]
                dV_swept = 2.0 * np.sum(p * er * (swept - kappa * er), axis=-1)
                budget = (F - excess)[ring][:, np.newaxis]
                if not _nonpositive(dV_swept + budget, np.abs(dV_swept) + budget):
                    continue
            L_V = lipschitz_V(weights, alpha1)
            terminal = TerminalIngredients(
                kappa=kappa,
                alpha1=alpha1,
                alpha2=alpha2,
                r_term=r_term,
                L_F=lipschitz_F(weights, eps_bar),
                L_V=L_V,
                rho_bar=(alpha1 - alpha2) / L_V,
                hold_input=(float(hold[0]), float(hold[1])),
            )
            logger.debug(
                f"terminal_design agent={ctx.agent} region={target} "
                f"kappa={kappa:.6g} alpha1={alpha1:.6g} r_term={r_term:.6g} "
                f"hold_cost={float(np.max(excess)):.6g} "
                f"configurations={1 if sweep is None else len(sweep)}"
            )
            return terminal
    raise TerminalDesignError(
        f"agent {ctx.agent}: no local controller for region {target}"
    )


@dataclass(frozen=True)
class ControlSignal:
    """Piecewise-constant inputs, one row per sampling period"""

    step: Fraction
    values: np.ndarray

    @property
    def pieces(self) -> int:
        return len(self.values)

    @property
    def duration(self) -> Fraction:
        return self.step * self.pieces

    @property
    def max_norm(self) -> float:
        if not self.pieces:
            return 0.0
        return float(np.max(np.linalg.norm(self.values, axis=1)))

    def tail(self) -> np.ndarray:
        return self.values[1:]


@dataclass(frozen=True, eq=False)
class ROCPInstance:
    ctx: AgentContext
    partition: Partition
    k: int
    z: int
    steps: int
    step: Fraction
    error: np.ndarray
    neighbor_estimates: np.ndarray
    source: int
    direction: int
    tightening: str = "robust"
    t_k: Fraction = Fraction(0)

    def __post_init__(self):
        if not 0 <= self.z <= self.steps:
            raise ValueError(f"sample index {self.z} outside 0..{self.steps}")
        if self.target is None:
            raise GeometryError(
                f"region {self.source} has no neighbor in direction {self.direction}"
            )

    @property
    def target(self) -> Optional[int]:
        return self.partition.neighbor_in_direction(self.source, self.direction)

    @property
    def reference(self) -> np.ndarray:
        return np.asarray(self.partition.region(self.target).reference, dtype=float)

    @property
    def pieces(self) -> int:
        return self.steps - self.z

    @property
    def horizon(self) -> Fraction:
        """T_z = T - z h"""
        return Fraction(self.steps - self.z) * Fraction(self.step)

    @property
    def sample_time(self) -> Fraction:
        return Fraction(self.t_k) + self.z * Fraction(self.step)

    @property
    def robust(self) -> bool:
        return self.tightening == "robust"

    def margin(self, elapsed):
        """Tightening radius after elapsed time since the sample instant"""
        if not self.robust:
            return np.zeros_like(np.asarray(elapsed, dtype=float))
        return np.asarray(rho(self.ctx, elapsed, float(np.linalg.norm(self.error))))

    def connectivity_limit(self, elapsed):
        limit = self.ctx.spec.sensing_radius - self.margin(elapsed)
        if self.robust:
            limit = limit - 2.0 * SQRT3 * self.ctx.side_length
        return limit


def tightened_membership(inst: ROCPInstance, e_hat, elapsed) -> bool:
    """
    Whether a predicted error lies strictly inside the tightened constraint set

    Checks the pair-union margin, the connectivity margin against every
    neighbor estimate and the drift bound M at the point.
    """
    point = np.asarray(e_hat, dtype=float) + inst.reference
    margin = float(inst.margin(elapsed))
    sd = inst.partition.signed_distance_to_pair_union(inst.source, inst.target, point)
    if not sd + margin < 0:
        return False
    if inst.ctx.neighbor_count:
        distances = np.linalg.norm(inst.neighbor_estimates - point, axis=1)
        if not np.all(distances < float(inst.connectivity_limit(elapsed))):
            return False
    drift = eval_coupling(inst.ctx.spec, point, inst.neighbor_estimates)
    return bool(np.linalg.norm(drift) <= inst.ctx.M * (1.0 + 1e-9))


class ShootingProblem:
    """Rollout, penalized objective and exact verification for one instance"""

    def __init__(
        self,
        inst: ROCPInstance,
        weights: CostWeights,
        terminal: TerminalIngredients,
        config: SolverConfig,
    ):
        self.inst = inst
        self.weights = weights
        self.terminal = terminal
        self.config = config
        self.spec = inst.ctx.spec
        self.reference = inst.reference
        self.estimates = np.asarray(inst.neighbor_estimates, dtype=float).reshape(-1, 2)
        self.pieces = inst.pieces
        self.piece_length = float(inst.step)
        self.u_max = inst.ctx.u_max
        self.error = np.asarray(inst.error, dtype=float)
        self.segments = inst.partition.pair_union_segments(inst.source, inst.target)
        self.slack = 1e-6 * inst.ctx.side_length

    def project(self, controls: np.ndarray) -> np.ndarray:
        norms = np.linalg.norm(controls, axis=-1, keepdims=True)
        scale = np.ones_like(norms)
        np.divide(self.u_max, norms, out=scale, where=norms > self.u_max)
        return controls * scale

    def rollout(self, controls: np.ndarray, substeps: int) -> np.ndarray:
        """Nominal errors (..., P * substeps + 1, 2) from the instance error"""
        batch = controls.shape[:-2]
        e = np.broadcast_to(self.error, batch + (2,)).copy()
        out = [e]
        h = self.piece_length / substeps
        for piece in range(self.pieces):
            u = controls[..., piece, :]

            def field(state, u=u):
                x = state + self.reference
                return eval_coupling(self.spec, x, self.estimates) + u

            for _ in range(substeps):
                e = rk4_step(field, e, h)
                out.append(e)
        return np.stack(out, axis=-2)

    def elapsed(self, substeps: int) -> np.ndarray:
        return np.arange(self.pieces * substeps + 1) * (self.piece_length / substeps)

    def cost(
        self, controls: np.ndarray, errors: np.ndarray, substeps: int
    ) -> np.ndarray:
        """V(e(T_z)) plus the trapezoidal integral of F on the rollout grid"""
        total = terminal_cost(errors[..., -1, :], self.weights)
        if self.pieces:
            inputs = np.repeat(controls, substeps, axis=-2)
            left = running_cost(errors[..., :-1, :], inputs, self.weights)
            right = running_cost(errors[..., 1:, :], inputs, self.weights)
            width = self.piece_length / substeps
            total = total + 0.5 * width * np.sum(left + right, axis=-1)
        return total

    def excesses(self, errors: np.ndarray, substeps: int, exact: bool):
        """Constraint excesses, feasible iff all negative (terminal nonpositive)"""
        points = errors + self.reference
        elapsed = self.elapsed(substeps)
        margin = self.inst.margin(elapsed)
        if exact:
            flat = points.reshape(-1, 2)
            sd = self.inst.partition.signed_distance_to_pair_union(
                self.inst.source, self.inst.target, flat
            ).reshape(points.shape[:-1])
        else:
            sd = segment_signed_distance(self.segments, points)
        membership = sd + margin
        if self.estimates.size:
            offsets = points[..., np.newaxis, :] - self.estimates
            distances = np.linalg.norm(offsets, axis=-1)
            limit = np.asarray(self.inst.connectivity_limit(elapsed))[:, np.newaxis]
            connectivity = distances - limit
        else:
            connectivity = np.full(points.shape[:-1] + (0,), -1.0)
        terminal = np.linalg.norm(errors[..., -1, :], axis=-1) - self.terminal.r_term
        return membership, connectivity, terminal

    def objective(self, controls: np.ndarray) -> np.ndarray:
        substeps = self.config.prediction_substeps
        errors = self.rollout(controls, substeps)
        membership, connectivity, terminal = self.excesses(
            errors, substeps, exact=False
        )
        slack = self.slack
        penalty = np.sum(np.maximum(membership + slack, 0.0) ** 2, axis=-1)
        penalty = penalty + np.sum(
            np.maximum(connectivity + slack, 0.0) ** 2, axis=(-2, -1)
        )
        penalty = penalty + np.maximum(terminal + 1e-3 * self.terminal.r_term, 0.0) ** 2
        return self.cost(controls, errors, substeps) + PENALTY_WEIGHT * penalty

    def verify(self, controls: np.ndarray):
        """Feasibility mask, dense cost and dense errors for a batch of candidates"""
        substeps = self.config.dense_substeps
        errors = self.rollout(controls, substeps)
        membership, connectivity, terminal = self.excesses(errors, substeps, exact=True)
        drift = eval_coupling(self.spec, errors + self.reference, self.estimates)
        speeds = np.linalg.norm(drift, axis=-1)
        bounded = np.all(speeds <= self.inst.ctx.M * (1.0 + 1e-9), axis=-1)
        feasible = (
            np.all(membership < 0, axis=-1)
            & np.all(connectivity < 0, axis=(-2, -1))
            & (terminal <= 0)
            & bounded
        )
        return feasible, self.cost(controls, errors, substeps), errors

    def initial_guesses(
        self, warm_start: Optional[np.ndarray], count: int
    ) -> np.ndarray:
        """Warm start, drift-compensated line, zero, then rotated offsets of the line"""
        shape = (self.pieces, 2)
        guesses: List[np.ndarray] = []
        if warm_start is not None and np.shape(warm_start) == shape:
            guesses.append(np.asarray(warm_start, dtype=float))
        duration = self.pieces * self.piece_length
        if self.pieces:
            fractions = 1.0 - (np.arange(self.pieces) + 0.5) / self.pieces
            line = self.reference + fractions[:, np.newaxis] * self.error
            compensation = eval_coupling(self.spec, line, self.estimates)
            straight = -self.error / duration - compensation
        else:
            straight = np.zeros(shape)
        guesses.append(straight)
        guesses.append(np.zeros(shape))
        speed = float(np.linalg.norm(self.error)) / max(duration, 1e-9)
        bias = 0.5 * (speed + 0.1 * self.u_max)
        n = 0
        while len(guesses) < count:
            angle = (n + self.config.seed) * math.pi / 4
            offset = bias * (1 + n // 8) * np.array([math.cos(angle), math.sin(angle)])
            guesses.append(straight + offset)
            n += 1
        if count <= 0:
            return np.zeros((0,) + shape)
        return self.project(np.stack(guesses[:count]))


def _descend(
    problem: ShootingProblem, guesses: np.ndarray, iterations: int, tolerance: float
):
    """Normalized-gradient projected descent with per-start adaptive steps"""
    x = guesses.copy()
    if iterations == 0 or problem.pieces == 0 or len(x) == 0:
        return x, 0
    J = problem.objective(x)
    scale = max(problem.u_max, 1e-9)
    step = np.full(len(x), 0.25 * scale)
    floor = 1e-6 * scale
    n = problem.pieces * 2
    delta = 1e-6 * max(1.0, problem.u_max)
    basis = (np.eye(n) * delta).reshape(n, problem.pieces, 2)
    used = 0
    for used in range(1, iterations + 1):
        active = np.flatnonzero(step > floor)
        if active.size == 0:
            break
        xa = x[active]
        perturbed = problem.objective(xa[:, np.newaxis] + basis[np.newaxis])
        grad = ((perturbed - J[active][:, np.newaxis]) / delta).reshape(xa.shape)
        gnorm = np.linalg.norm(grad.reshape(len(active), -1), axis=1)
        direction = grad / np.maximum(gnorm, 1e-300)[:, np.newaxis, np.newaxis]
        moves = step[active][:, np.newaxis, np.newaxis] * direction
        candidate = problem.project(xa - moves)
        Jc = problem.objective(candidate)
        better = Jc < J[active]
        for slot, idx in enumerate(active):
            if better[slot]:
                gain = J[idx] - Jc[slot]
                x[idx] = candidate[slot]
                J[idx] = Jc[slot]
                stalled = gain < tolerance * (1.0 + abs(J[idx]))
                step[idx] = 0.0 if stalled else step[idx] * 1.2
            else:
                step[idx] *= 0.5
    return x, used


@dataclass(eq=False)
class ROCPSolution:
    controls: ControlSignal
    cost: float
    errors: np.ndarray
    reference: np.ndarray
    start: int
    iterations: int

    @property
    def positions(self) -> np.ndarray:
        return self.errors + self.reference

    @property
    def terminal_error(self) -> float:
        return float(np.linalg.norm(self.errors[-1]))


def solve_rocp(
    inst: ROCPInstance,
    weights: CostWeights,
    terminal: TerminalIngredients,
    config: Optional[SolverConfig] = None,
    warm_start: Optional[np.ndarray] = None,
    iterations: Optional[int] = None,
) -> Optional[ROCPSolution]:
    """
    Solve the decreasing-horizon problem at one sampling instant

    Returns:
        Lowest-cost candidate passing the dense verification, None when no
        candidate does (including a zero start budget)
    """
    config = config or SolverConfig()
    problem = ShootingProblem(inst, weights, terminal, config)
    guesses = problem.initial_guesses(warm_start, config.starts)
    budget = config.iterations if iterations is None else iterations
    region = (
        f"agent={inst.ctx.agent} region={inst.source} dir={inst.direction} "
        f"k={inst.k} z={inst.z}"
    )
    if len(guesses) == 0:
        logger.debug(f"rocp_solve {region} feasible=False starts=0 iterations=0")
        return None
    finals, used = _descend(problem, guesses, budget, config.tolerance)
    candidates = np.concatenate([finals, guesses])
    feasible, costs, errors = problem.verify(candidates)
    if not feasible.any():
        logger.debug(
            f"rocp_solve {region} feasible=False starts={len(guesses)} "
            f"iterations={used}"
        )
        return None
    best = int(np.argmin(np.where(feasible, costs, np.inf)))
    logger.debug(
        f"rocp_solve {region} feasible=True cost={costs[best]:.6g} "
        f"starts={len(guesses)} iterations={used}"
    )
    return ROCPSolution(
        controls=ControlSignal(Fraction(inst.step), candidates[best]),
        cost=float(costs[best]),
        errors=errors[best],
        reference=problem.reference,
        start=best % len(guesses),
        iterations=used,
    )


@dataclass(eq=False)
class TransitionPlan:
    agent: int
    source: int
    direction: int
    target: int
    controls: ControlSignal
    costs: List[float]
    nominal: np.ndarray
    terminal: TerminalIngredients
    terminal_error: float
    rho_violations: List[int] = field(default_factory=list)
    cost_violations: List[int] = field(default_factory=list)
    solves: int = 0


def cost_decrease_slack(
    ctx: AgentContext,
    terminal: TerminalIngredients,
    steps: int,
    step: Fraction,
    e0_norm: float,
    robust: bool,
) -> float:
    """Allowed growth of the optimal cost between consecutive re-solves"""
    if not robust:
        return 0.0
    h = float(step)
    r = rho(ctx, h, e0_norm)
    return (steps * h - 2.0 * h) * r * terminal.L_F + r * terminal.L_V


def transition_controller(
    ctx: AgentContext,
    partition: Partition,
    weights: CostWeights,
    config: SolverConfig,
    source: int,
    direction: int,
    neighbor_estimates,
    steps: int,
    step: Fraction,
    k: int = 0,
    terminal: Optional[TerminalIngredients] = None,
    start: Optional[Sequence[float]] = None,
    counter: Optional[Counter] = None,
) -> Optional[TransitionPlan]:
    """
    Drive the nominal model from a source region into a neighbor within T = m h

    Re-solves with horizons T, T - h, ..., h, applying the first piece of each
    solution. Returns None when the terminal design or any re-solve fails.
    """
    target = partition.neighbor_in_direction(source, direction)
    if target is None:
        return None
    xhat = _estimates(ctx, neighbor_estimates)
    where = f"agent={ctx.agent} region={source} dir={direction}"
    try:
        partition.pair_union_polygon(source, target)
        if terminal is None:
            terminal = design_terminal(ctx, weights, partition, target, xhat, config)
    except (GeometryError, TerminalDesignError) as e:
        logger.debug(f"transition {where} feasible=False reason={e}")
        return None

    reference = np.asarray(partition.region(target).reference, dtype=float)
    origin = partition.region(source).reference if start is None else start
    error = np.asarray(origin, dtype=float) - reference
    costs: List[float] = []
    pieces: List[np.ndarray] = []
    nominal = [error + reference]
    rho_violations: List[int] = []
    cost_violations: List[int] = []
    warm: Optional[np.ndarray] = None
    for z in range(steps):
        inst = ROCPInstance(
            ctx=ctx,
            partition=partition,
            k=k,
            z=z,
            steps=steps,
            step=step,
            error=error,
            neighbor_estimates=xhat,
            source=source,
            direction=direction,
            tightening=config.tightening,
        )
        budget = config.iterations if z == 0 else config.resolve_iterations
        solution = solve_rocp(
            inst, weights, terminal, config, warm_start=warm, iterations=budget
        )
        if counter is not None:
            counter["solves"] += 1
        if solution is None:
            logger.debug(f"transition {where} feasible=False z={z}")
            return None
        e0_norm = float(np.linalg.norm(error))
        deviation = rho(ctx, float(inst.horizon), e0_norm)
        if config.robust and deviation > terminal.rho_bar:
            rho_violations.append(z)
            logger.warning(
                f"rho_monitor {where} z={z} rho={deviation:.6g} "
                f"rho_bar={terminal.rho_bar:.6g}"
            )
        if costs:
            slack = cost_decrease_slack(
                ctx, terminal, steps, step, e0_norm, config.robust
            )
            if solution.cost - costs[-1] > slack + 1e-6:
                cost_violations.append(z)
                logger.warning(
                    f"cost_monitor {where} z={z} "
                    f"increase={solution.cost - costs[-1]:.6g} slack={slack:.6g}"
                )
        costs.append(solution.cost)
        pieces.append(solution.controls.values[0])
        dense = config.dense_substeps
        nominal.extend(solution.positions[1 : dense + 1])
        error = solution.errors[dense]
        warm = solution.controls.tail()

    terminal_error = float(np.linalg.norm(error))
    logger.debug(
        f"transition {where} target={target} feasible=True "
        f"cost={costs[0]:.6g} terminal_error={terminal_error:.6g}"
    )
    return TransitionPlan(
        agent=ctx.agent,
        source=source,
        direction=direction,
        target=target,
        controls=ControlSignal(Fraction(step), np.array(pieces).reshape(-1, 2)),
        costs=costs,
        nominal=np.array(nominal),
        terminal=terminal,
        terminal_error=terminal_error,
        rho_violations=rho_violations,
        cost_violations=cost_violations,
        solves=len(costs),
    )
