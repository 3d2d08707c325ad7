from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

from mmp import rocp
from mmp.dynamics import AgentContext, DynamicsSpec, eval_coupling
from mmp.errors import GeometryError, TerminalDesignError, WeightsError
from mmp.geometry import SQRT3
from mmp.rocp import (
    KAPPA_GRID,
    MAX_SWEEP,
    ControlSignal,
    CostWeights,
    ROCPInstance,
    ShootingProblem,
    SolverConfig,
    _neighbor_sweep,
    _support_extremes,
    _union_extremes,
    cost_decrease_slack,
    design_terminal,
    running_cost,
    solve_rocp,
    tightened_membership,
    transition_controller,
)
from mmp.scenario import load_scenario

STEPS = 5
STEP = Fraction(1, 5)
NORTH = 1


@pytest.fixture
def origin(small_partition):
    return small_partition.point_to_region((0.0, 0.0))


@pytest.fixture
def north(small_partition, origin):
    return small_partition.neighbor_in_direction(origin, NORTH)


@pytest.fixture
def terminal(free_agent, unit_weights, small_partition, north, fast_config):
    return design_terminal(
        free_agent, unit_weights, small_partition, north, [], fast_config
    )


def instance(ctx, partition, source, error, z=0, tightening="robust"):
    return ROCPInstance(
        ctx=ctx,
        partition=partition,
        k=0,
        z=z,
        steps=STEPS,
        step=STEP,
        error=np.asarray(error),
        neighbor_estimates=np.zeros((0, 2)),
        source=source,
        direction=NORTH,
        tightening=tightening,
    )


class TestConfiguration:
    """Solver settings and cost weights"""

    def test_unknown_tightening(self):
        """Only robust and nominal tightening exist"""
        with pytest.raises(ValueError):
            SolverConfig(tightening="loose")

    def test_negative_budget(self):
        """Start counts cannot be negative"""
        with pytest.raises(ValueError):
            SolverConfig(starts=-1)

    def test_weights_must_be_positive_definite(self):
        """R and P need strictly positive diagonals"""
        with pytest.raises(WeightsError):
            CostWeights(r=(0.0, 1.0))

    def test_running_cost(self):
        """F(e, u) = e'Qe + u'Ru"""
        weights = CostWeights(q=(2.0, 1.0), r=(1.0, 3.0))
        cost = running_cost([1.0, 2.0], [1.0, 1.0], weights)
        assert cost == pytest.approx(2 + 4 + 1 + 3)

    def test_control_signal(self):
        """Duration is pieces times the sampling period"""
        signal = ControlSignal(STEP, np.array([[3.0, 4.0], [0.0, 1.0]]))
        assert signal.duration == Fraction(2, 5)
        assert signal.max_norm == pytest.approx(5.0)
        assert signal.tail().shape == (1, 2)


class TestTerminalDesign:
    """Local controller and terminal level sets"""

    def test_single_integrator_gain(self, terminal):
        """Without drift only kappa = 1 makes V decrease with F added"""
        assert terminal.kappa == pytest.approx(1.0)
        assert terminal.hold_input == (0.0, 0.0)
        assert terminal.r_term == pytest.approx(0.95 * SQRT3 / 2)

    def test_level_sets_are_ordered(self, terminal):
        """alpha2 < alpha1 and the tolerated deviation is positive"""
        assert 0 < terminal.alpha2 < terminal.alpha1
        assert terminal.rho_bar > 0

    def test_local_control(self, terminal):
        """kappa(e) = -kappa e + hold_input"""
        assert terminal.control([0.2, -0.4]) == pytest.approx([-0.2, 0.4])


class TestInstance:
    """One decreasing-horizon problem"""

    def test_horizon_decreases(self, free_agent, small_partition, origin):
        """T_z = (m - z) h"""
        inst = instance(free_agent, small_partition, origin, [0.0, -SQRT3], z=2)
        assert inst.horizon == Fraction(3, 5)
        assert inst.pieces == 3

    def test_missing_neighbor(self, free_agent, small_partition):
        """A direction leaving the workspace has no instance"""
        top = small_partition.point_to_region((0.0, 2.9))
        with pytest.raises(GeometryError):
            instance(free_agent, small_partition, top, [0.0, 0.0])

    def test_membership(self, free_agent, small_partition, origin):
        """Points inside the pair union pass, points outside fail"""
        inst = instance(free_agent, small_partition, origin, [0.0, -SQRT3])
        assert tightened_membership(inst, [0.0, 0.0], 0.0)
        assert not tightened_membership(inst, [2.0, 0.0], 0.0)

    def test_free_agent_has_no_margin(self, free_agent, small_partition, origin):
        """Without neighbors the deviation bound is zero"""
        inst = instance(free_agent, small_partition, origin, [0.0, -SQRT3])
        assert float(inst.margin(0.6)) == pytest.approx(0.0)

    def test_initial_guesses(
        self, free_agent, small_partition, origin, terminal, unit_weights, fast_config
    ):
        """Guesses have one row per remaining piece and respect u_max"""
        inst = instance(free_agent, small_partition, origin, [0.0, -SQRT3])
        problem = ShootingProblem(inst, unit_weights, terminal, fast_config)
        guesses = problem.initial_guesses(None, 6)
        assert guesses.shape == (6, STEPS, 2)
        assert np.all(np.linalg.norm(guesses, axis=-1) <= free_agent.u_max + 1e-9)


class TestSolve:
    """Solving and chaining re-solves"""

    def test_solution_reaches_terminal_set(
        self, free_agent, small_partition, origin, terminal, unit_weights, fast_config
    ):
        """The returned candidate ends inside the terminal ball"""
        inst = instance(free_agent, small_partition, origin, [0.0, -SQRT3])
        solution = solve_rocp(inst, unit_weights, terminal, fast_config)
        assert solution is not None
        assert solution.terminal_error <= terminal.r_term
        assert solution.controls.pieces == STEPS

    def test_zero_starts_is_infeasible(
        self, free_agent, small_partition, origin, terminal, unit_weights
    ):
        """No candidate means no solution"""
        inst = instance(free_agent, small_partition, origin, [0.0, -SQRT3])
        assert solve_rocp(inst, unit_weights, terminal, SolverConfig(starts=0)) is None

    def test_transition_plan(
        self, free_agent, small_partition, origin, north, unit_weights, fast_config
    ):
        """The chained controller moves the agent into the northern neighbor"""
        plan = transition_controller(
            free_agent,
            small_partition,
            unit_weights,
            fast_config,
            origin,
            NORTH,
            [],
            STEPS,
            STEP,
        )
        assert plan is not None
        assert plan.target == north
        assert plan.terminal_error <= plan.terminal.r_term
        assert plan.controls.pieces == STEPS
        assert plan.solves == STEPS
        assert plan.controls.max_norm <= free_agent.u_max + 1e-9
        assert len(plan.nominal) == STEPS * fast_config.dense_substeps + 1
        assert plan.nominal[0] == pytest.approx([0.0, 0.0])

    def test_nominal_stays_in_pair_union(
        self, free_agent, small_partition, origin, north, unit_weights, fast_config
    ):
        """Every dense nominal point lies strictly inside source plus target"""
        plan = transition_controller(
            free_agent,
            small_partition,
            unit_weights,
            fast_config,
            origin,
            NORTH,
            [],
            STEPS,
            STEP,
        )
        distances = small_partition.signed_distance_to_pair_union(
            origin, north, plan.nominal
        )
        assert np.all(distances < 0)

    def test_nominal_tightening(
        self, free_agent, small_partition, origin, unit_weights
    ):
        """Nominal mode also finds the transition"""
        config = SolverConfig(
            starts=4,
            iterations=20,
            resolve_iterations=5,
            tightening="nominal",
            terminal_samples=200,
            dense_substeps=10,
        )
        plan = transition_controller(
            free_agent,
            small_partition,
            unit_weights,
            config,
            origin,
            NORTH,
            [],
            STEPS,
            STEP,
        )
        assert plan is not None
        assert not plan.rho_violations

    def test_no_neighbor_in_direction(
        self, free_agent, small_partition, unit_weights, fast_config
    ):
        """Leaving the workspace gives no plan"""
        top = small_partition.point_to_region((0.0, 2.9))
        plan = transition_controller(
            free_agent,
            small_partition,
            unit_weights,
            fast_config,
            top,
            NORTH,
            [],
            STEPS,
            STEP,
        )
        assert plan is None

    def test_nominal_slack_is_zero(self, free_agent, terminal):
        """Cost may not increase at all without robust tightening"""
        slack = cost_decrease_slack(
            free_agent, terminal, STEPS, STEP, 0.5, robust=False
        )
        assert slack == 0.0


# neighbor 2 sits at the center of the region south-east of the origin
ESTIMATE = (1.5, -SQRT3 / 2)


def coupled_agent(bounds, neighbor_gain, sensing_radius=20.0):
    """Decaying agent pulled toward one neighbor"""
    spec = DynamicsSpec.create(
        [2], -1.0, {2: neighbor_gain}, u_max=10.0, sensing_radius=sensing_radius
    )
    return AgentContext.create(1, spec, bounds, 1.0)


def coupled_instance(ctx, partition, source, error, tightening="robust"):
    return ROCPInstance(
        ctx=ctx,
        partition=partition,
        k=0,
        z=0,
        steps=STEPS,
        step=STEP,
        error=np.asarray(error, dtype=float),
        neighbor_estimates=np.array([ESTIMATE]),
        source=source,
        direction=NORTH,
        tightening=tightening,
    )


@pytest.fixture
def weak_agent(small_bounds):
    return coupled_agent(small_bounds, 0.05)


@pytest.fixture
def robust_config():
    return SolverConfig(
        starts=4,
        iterations=40,
        resolve_iterations=10,
        terminal_samples=200,
        dense_substeps=10,
        tightening="robust",
    )


class TestCoupledTerminalDesign:
    """Local controllers for agents with neighbors"""

    def test_hold_input_cancels_drift(
        self, weak_agent, unit_weights, small_partition, north, robust_config
    ):
        """The hold input is -f(x_des, x_hat); the sweep still admits the first level"""
        terminal = design_terminal(
            weak_agent, unit_weights, small_partition, north, [ESTIMATE], robust_config
        )
        reference = np.asarray(small_partition.region(north).reference)
        expected = -eval_coupling(weak_agent.spec, reference, np.array([ESTIMATE]))
        assert terminal.hold_input == pytest.approx(tuple(expected))
        assert terminal.kappa == pytest.approx(0.25)
        assert terminal.r_term == pytest.approx(0.95 * SQRT3 / 2)

    def test_strong_coupling_fails_only_when_robust(
        self, small_bounds, unit_weights, small_partition, north, robust_config
    ):
        """Neighbors anywhere in their region unions break the decrease"""
        ctx = coupled_agent(small_bounds, 1.0)
        nominal = SolverConfig(terminal_samples=200, tightening="nominal")
        terminal = design_terminal(
            ctx, unit_weights, small_partition, north, [ESTIMATE], nominal
        )
        assert terminal.kappa == pytest.approx(0.25)
        with pytest.raises(TerminalDesignError):
            design_terminal(
                ctx, unit_weights, small_partition, north, [ESTIMATE], robust_config
            )

    def test_gain_grows_to_the_input_bound(
        self, small_bounds, unit_weights, small_partition, north
    ):
        """A fast unstable drift needs a gain beyond the fixed grid"""
        spec = DynamicsSpec.create([], 9.0, u_max=40.0)
        ctx = AgentContext.create(1, spec, small_bounds, 1.0)
        weights = CostWeights(r=(0.01, 0.01))
        config = SolverConfig(terminal_samples=200)
        terminal = design_terminal(ctx, weights, small_partition, north, [], config)
        assert terminal.kappa > KAPPA_GRID[-1]
        r1 = np.sqrt(terminal.alpha1 / min(weights.p))
        peak = terminal.kappa * r1 + np.linalg.norm(terminal.hold_input)
        assert peak <= ctx.u_max + 1e-9

    def test_unreachable_input_bound(
        self, small_bounds, unit_weights, small_partition, north
    ):
        """No gain fits when holding the reference alone exceeds u_max"""
        spec = DynamicsSpec.create([], 0.0, drift=[20.0, 0.0], u_max=10.0)
        ctx = AgentContext.create(1, spec, small_bounds, 1.0)
        config = SolverConfig(terminal_samples=200)
        with pytest.raises(TerminalDesignError):
            design_terminal(ctx, unit_weights, small_partition, north, [], config)


class TestNeighborSweep:
    """Worst-case neighbor configurations"""

    def test_union_extremes(self, small_partition):
        """The estimate comes first, followed by the vertices of its region union"""
        points = _union_extremes(small_partition, np.array(ESTIMATE), 2 * SQRT3)
        assert points[0] == pytest.approx(ESTIMATE)
        distances = np.linalg.norm(points[1:] - np.array(ESTIMATE), axis=1)
        assert np.max(distances) == pytest.approx(np.sqrt(7.0))
        assert len(np.unique(np.round(points[1:], 6), axis=0)) == len(points) - 1

    def test_small_products_are_complete(self):
        """Every combination is kept up to the sweep limit"""
        options = [np.arange(18, dtype=float).reshape(9, 2)] * 3
        assert len(_neighbor_sweep(options)) == 9 ** 3

    @pytest.mark.parametrize("seed", [0, 1, 7])
    def test_large_products_keep_extremes(self, seed):
        """Subsampled sweeps still contain every combination of support extremes"""
        angles = np.linspace(0.0, 2 * np.pi, 12, endpoint=False)
        ring = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        options = [ring, 2.0 * ring, 3.0 * ring]
        sweep = _neighbor_sweep(options, seed)
        assert len(sweep) >= MAX_SWEEP
        seen = {tuple(np.round(config.ravel(), 9)) for config in sweep}
        corners = ring[_support_extremes(ring)]
        extremes = [corners, 2.0 * corners, 3.0 * corners]
        for a in extremes[0]:
            for b in extremes[1]:
                for c in extremes[2]:
                    assert tuple(np.round(np.concatenate([a, b, c]), 9)) in seen


class TestCoupledTightening:
    """Robust margins with a coupled neighbor"""

    def test_margin_follows_deviation_bound(self, weak_agent, small_partition, origin):
        """rho grows with the elapsed time and shrinks the connectivity limit"""
        inst = coupled_instance(weak_agent, small_partition, origin, [0.0, -SQRT3])
        expected = weak_agent.rho_tilde * np.expm1(weak_agent.constants.L * 0.2)
        assert float(inst.margin(0.2)) == pytest.approx(expected)
        assert float(inst.margin(0.2)) > 0
        limit = float(inst.connectivity_limit(0.2))
        assert limit == pytest.approx(20.0 - expected - 2 * SQRT3)

    def test_margin_rejects_boundary_strip(self, weak_agent, small_partition, origin):
        """A point 0.018 inside the union fails after 0.2 s of deviation"""
        error = [0.0, -SQRT3]
        robust = coupled_instance(weak_agent, small_partition, origin, error)
        nominal = coupled_instance(
            weak_agent, small_partition, origin, error, "nominal"
        )
        near_top = [0.0, 2.58 - SQRT3]
        assert tightened_membership(robust, near_top, 0.0)
        assert not tightened_membership(robust, near_top, 0.2)
        assert tightened_membership(nominal, near_top, 0.2)

    def test_connectivity_margin(self, small_bounds, small_partition, origin):
        """Neighbor estimates count 2 sqrt(3) R closer to the sensing radius"""
        ctx = coupled_agent(small_bounds, 0.05, sensing_radius=5.0)
        robust = coupled_instance(ctx, small_partition, origin, [0.0, -SQRT3])
        nominal = coupled_instance(
            ctx, small_partition, origin, [0.0, -SQRT3], "nominal"
        )
        # the target reference is 3 away from the estimate
        assert not tightened_membership(robust, [0.0, 0.0], 0.2)
        assert tightened_membership(nominal, [0.0, 0.0], 0.2)


class TestCoupledSolve:
    """Running cost and the cost-decrease monitor with a coupled neighbor"""

    def test_hold_input_is_charged(
        self, weak_agent, unit_weights, small_partition, origin, north, fast_config
    ):
        """Holding the reference costs h u'Ru, not zero"""
        terminal = design_terminal(
            weak_agent, unit_weights, small_partition, north, [ESTIMATE], fast_config
        )
        inst = ROCPInstance(
            ctx=weak_agent,
            partition=small_partition,
            k=0,
            z=STEPS - 1,
            steps=STEPS,
            step=STEP,
            error=np.zeros(2),
            neighbor_estimates=np.array([ESTIMATE]),
            source=origin,
            direction=NORTH,
        )
        problem = ShootingProblem(inst, unit_weights, terminal, fast_config)
        controls = np.array([[terminal.hold_input]])
        errors = problem.rollout(controls, 4)
        hold = np.asarray(terminal.hold_input)
        assert np.allclose(errors, 0.0)
        expected = float(STEP) * float(hold @ hold)
        assert problem.cost(controls, errors, 4)[0] == pytest.approx(expected)
        assert expected > 0

    def test_robust_slack(
        self, weak_agent, unit_weights, small_partition, north, robust_config
    ):
        """(T - 2h) rho(h) L_F + rho(h) L_V with the exponential branch of rho"""
        terminal = design_terminal(
            weak_agent, unit_weights, small_partition, north, [ESTIMATE], robust_config
        )
        slack = cost_decrease_slack(weak_agent, terminal, STEPS, STEP, 0.5, robust=True)
        r = weak_agent.rho_tilde * np.expm1(weak_agent.constants.L * float(STEP))
        expected = (1.0 - 2 * float(STEP)) * r * terminal.L_F + r * terminal.L_V
        assert slack == pytest.approx(expected)
        assert slack > 0

    def test_robust_transition_decreases_cost(
        self, weak_agent, unit_weights, small_partition, origin, robust_config
    ):
        """Re-solves never raise the optimal cost by more than the slack"""
        plan = transition_controller(
            weak_agent,
            small_partition,
            unit_weights,
            robust_config,
            origin,
            NORTH,
            [ESTIMATE],
            STEPS,
            STEP,
        )
        assert plan is not None
        assert plan.terminal_error <= plan.terminal.r_term
        assert not plan.cost_violations
        slack = cost_decrease_slack(
            weak_agent, plan.terminal, STEPS, STEP, 0.0, robust=True
        )
        assert np.all(np.diff(plan.costs) <= slack + 1e-6)

    @pytest.mark.parametrize("factor, flagged", [(0.5, []), (2.0, [1])])
    def test_monitor_uses_slack(
        self,
        monkeypatch,
        weak_agent,
        unit_weights,
        small_partition,
        origin,
        robust_config,
        factor,
        flagged,
    ):
        """An increase within the slack is tolerated, a larger one is flagged"""
        solve = rocp.solve_rocp
        target = small_partition.neighbor_in_direction(origin, NORTH)
        terminal = design_terminal(
            weak_agent, unit_weights, small_partition, target, [ESTIMATE], robust_config
        )
        slack = cost_decrease_slack(weak_agent, terminal, STEPS, STEP, 0.0, robust=True)
        first = {}

        def inflated(inst, *args, **kwargs):
            solution = solve(inst, *args, **kwargs)
            if inst.z == 0:
                first["cost"] = solution.cost
            if inst.z == 1:
                # lift the second cost to exactly first + factor * slack
                return replace(solution, cost=first["cost"] + factor * slack)
            return solution

        monkeypatch.setattr(rocp, "solve_rocp", inflated)
        plan = transition_controller(
            weak_agent,
            small_partition,
            unit_weights,
            robust_config,
            origin,
            NORTH,
            [ESTIMATE],
            STEPS,
            STEP,
            terminal=terminal,
        )
        assert plan is not None
        assert plan.cost_violations == flagged


class TestRobustMission:
    """Robust tightening on the coupled three-agent mission"""

    @pytest.mark.parametrize("agent", [1, 2, 3])
    def test_tightened_set_empties_within_a_sampling_period(
        self, three_agent_path, agent
    ):
        """rho exceeds the hexagon inradius after 0.09 s, well before h = 0.3 s"""
        scenario = load_scenario(three_agent_path)
        partition = scenario.partition()
        ctx = scenario.context(agent)
        initial = np.asarray(scenario.agent(agent).initial, dtype=float)
        source = partition.point_to_region(initial)
        direction = min(partition.neighbors(source))
        target = partition.neighbor_in_direction(source, direction)
        estimates = np.array(
            [scenario.agent(j).initial for j in ctx.neighbors], dtype=float
        )
        inst = ROCPInstance(
            ctx=ctx,
            partition=partition,
            k=0,
            z=0,
            steps=scenario.steps,
            step=scenario.sampling,
            error=initial - partition.region(target).reference,
            neighbor_estimates=estimates,
            source=source,
            direction=direction,
        )
        assert float(inst.margin(0.09)) > partition.inscribed_radius
        assert not tightened_membership(inst, np.zeros(2), 0.09)
