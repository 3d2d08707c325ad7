import math
from fractions import Fraction

import numpy as np
import pytest

from mmp.dynamics import (
    AgentContext,
    CoupledSystem,
    DynamicsSpec,
    SineSquaredTerm,
    derive_constants,
    error_bound,
    eval_coupling,
    rho,
    rk4_step,
)
from mmp.errors import DynamicsError
from mmp.geometry import Bounds

MISSION_BOUNDS = Bounds(-10.0, -10.0, 10.0, 10.0)


def mission_specs():
    """Three coupled agents: self gain -2, unit neighbor gains, sin^2 on agents 1, 2"""
    return {
        1: DynamicsSpec.create(
            [2, 3],
            -2.0,
            {2: 1.0, 3: 1.0},
            [SineSquaredTerm(2, -1.0)],
            u_max=50.0,
            sensing_radius=18.0,
        ),
        2: DynamicsSpec.create(
            [1, 3],
            -2.0,
            {1: 1.0, 3: 1.0},
            [SineSquaredTerm(1, -1.0)],
            u_max=50.0,
            sensing_radius=18.0,
        ),
        3: DynamicsSpec.create(
            [1, 2], -2.0, {1: 1.0, 2: 1.0}, u_max=50.0, sensing_radius=18.0
        ),
    }


class TestCoupling:
    """Evaluation of f_i"""

    def test_matches_closed_form(self):
        """Agent 1's field equals -2 x1 + x2 + x3 - sin^2(x1 - x2)"""
        spec = mission_specs()[1]
        x1 = np.array([0.3, -1.2])
        x2 = np.array([2.0, 0.5])
        x3 = np.array([-1.0, 4.0])
        expected = -2 * x1 + x2 + x3 - np.sin(x1 - x2) ** 2
        assert eval_coupling(spec, x1, np.stack([x2, x3])) == pytest.approx(expected)

    def test_broadcasts_over_batches(self):
        """Leading batch dimensions are preserved"""
        spec = mission_specs()[3]
        x = np.zeros((5, 7, 2))
        xb = np.ones((5, 7, 2, 2))
        out = eval_coupling(spec, x, xb)
        assert out.shape == (5, 7, 2)
        assert np.allclose(out, 2.0)

    def test_wrong_neighbor_count(self):
        """Neighbor states must match the declared neighbors"""
        with pytest.raises(DynamicsError):
            eval_coupling(mission_specs()[1], np.zeros(2), np.zeros((1, 2)))

    def test_coupling_to_non_neighbor_rejected(self):
        """Gains may only reference neighbors"""
        with pytest.raises(DynamicsError):
            DynamicsSpec.create([2], 0.0, {3: 1.0})

    def test_matrix_gains(self):
        """2x2 gains act as matrices"""
        spec = DynamicsSpec.create([], [[0.0, 1.0], [-1.0, 0.0]])
        out = eval_coupling(spec, np.array([1.0, 2.0]), np.zeros((0, 2)))
        assert out == pytest.approx([2.0, -1.0])


class TestConstants:
    """Analytic bounds M, L and L_bar"""

    def test_mission_agent_bound(self):
        """M of agent 1 is the vertex maximum plus sqrt(2) for its sin^2 term"""
        constants = derive_constants(mission_specs()[1], MISSION_BOUNDS)
        # -2 x1 + x2 + x3 reaches 40 per coordinate at opposite corners
        assert constants.M == pytest.approx(40 * math.sqrt(2) + math.sqrt(2))
        assert constants.L == pytest.approx(3.0)
        assert constants.L_bar == pytest.approx(math.sqrt(2) + 1.0)

    def test_bound_dominates_samples(self):
        """No sampled state exceeds M"""
        spec = mission_specs()[2]
        constants = derive_constants(spec, MISSION_BOUNDS)
        rng = np.random.default_rng(3)
        x = rng.uniform(-10, 10, size=(2000, 2))
        xb = rng.uniform(-10, 10, size=(2000, 2, 2))
        assert np.max(np.linalg.norm(eval_coupling(spec, x, xb), axis=1)) <= constants.M

    def test_free_agent_floors(self):
        """Vanishing Lipschitz constants are floored"""
        constants = derive_constants(DynamicsSpec.create([]), MISSION_BOUNDS)
        assert constants.M == 0.0
        assert constants.L > 0 and constants.L_bar > 0


class TestBounds:
    """Error and deviation bounds"""

    def test_error_bound_is_linear(self):
        """||e0|| + dt (M + u_max)"""
        assert error_bound(1.0, Fraction(1, 2), 4.0, 2.0) == pytest.approx(4.0)

    def test_rho_starts_at_zero(self):
        """No deviation before any time has passed"""
        ctx = AgentContext.create(1, mission_specs()[1], MISSION_BOUNDS, 1.0)
        assert rho(ctx, 0.0, 0.5) == pytest.approx(0.0)

    def test_rho_is_monotone(self):
        """The bound grows with elapsed time"""
        ctx = AgentContext.create(1, mission_specs()[1], MISSION_BOUNDS, 1.0)
        values = rho(ctx, np.linspace(0, 3, 31), 0.5)
        assert np.all(np.diff(values) >= 0)

    @pytest.mark.parametrize("e0_norm, longest", [(0.0, 3.0), (0.5, 0.5)])
    def test_rho_is_superadditive(self, e0_norm, longest):
        """rho(a + b) >= rho(a) + rho(b) while the exponential branch is active"""
        ctx = AgentContext.create(1, mission_specs()[1], MISSION_BOUNDS, 1.0)
        a, b = np.random.default_rng(0).uniform(0.0, longest, size=(2, 1000))
        joint = rho(ctx, a + b, e0_norm)
        split = rho(ctx, a, e0_norm) + rho(ctx, b, e0_norm)
        assert np.all(joint >= split - 1e-9 * (1.0 + np.abs(joint)))

    def test_rho_negative_time(self):
        """Negative elapsed time is rejected"""
        ctx = AgentContext.create(1, mission_specs()[1], MISSION_BOUNDS, 1.0)
        with pytest.raises(DynamicsError):
            rho(ctx, -0.1, 0.0)


class TestIntegration:
    """RK4 integration of the coupled system"""

    def test_rk4_exact_for_linear_decay(self):
        """x' = -x over 1 s matches exp(-1) closely"""
        x = np.array([1.0, 2.0])
        for _ in range(100):
            x = rk4_step(lambda s: -s, x, 0.01)
        assert x == pytest.approx(np.array([1.0, 2.0]) * math.exp(-1.0), rel=1e-8)

    def test_constant_input_moves_free_agents(self):
        """Without coupling a held input moves the agent in a straight line"""
        system = CoupledSystem({1: DynamicsSpec.create([], u_max=2.0)}, MISSION_BOUNDS)
        trajectory = system.integrate(
            np.zeros((1, 2)),
            np.array([[1.0, -0.5]]),
            Fraction(0),
            Fraction(2),
            Fraction(1, 10),
        )
        assert trajectory.states.shape == (21, 1, 2)
        assert trajectory.states[-1, 0] == pytest.approx([2.0, -1.0])
        assert trajectory.times[-1] == pytest.approx(2.0)

    def test_piecewise_inputs(self):
        """Stacked inputs split the interval evenly"""
        system = CoupledSystem({1: DynamicsSpec.create([], u_max=2.0)}, MISSION_BOUNDS)
        pieces = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
        trajectory = system.integrate(np.zeros((1, 2)), pieces, 0.0, 1.0, 0.1)
        assert trajectory.states[-1, 0] == pytest.approx([0.5, 0.5])

    def test_exit_is_flagged_not_clamped(self):
        """Leaving the workspace is recorded and the state keeps going"""
        system = CoupledSystem({1: DynamicsSpec.create([], u_max=5.0)}, MISSION_BOUNDS)
        start, push = np.array([[9.45, 0.0]]), np.array([[1.0, 0.0]])
        trajectory = system.integrate(start, push, 0.0, 1.0, 0.1)
        assert trajectory.states[-1, 0, 0] == pytest.approx(10.45)
        assert [agent for agent, _ in trajectory.exits] == [1]
        assert trajectory.exits[0][1] == pytest.approx(0.6)

    def test_step_must_divide_interval(self):
        """dt has to split t1 - t0 exactly"""
        system = CoupledSystem({1: DynamicsSpec.create([])}, MISSION_BOUNDS)
        with pytest.raises(DynamicsError):
            system.integrate(
                np.zeros((1, 2)),
                np.zeros((1, 2)),
                Fraction(0),
                Fraction(1),
                Fraction(3, 10),
            )

    def test_asymmetric_neighbors_rejected(self):
        """Neighbor sets must be symmetric"""
        specs = {1: DynamicsSpec.create([2]), 2: DynamicsSpec.create([])}
        with pytest.raises(DynamicsError):
            CoupledSystem(specs, MISSION_BOUNDS)

    def test_coupled_velocity(self):
        """The joint field evaluates every agent against the others"""
        system = CoupledSystem(mission_specs(), MISSION_BOUNDS)
        states = np.array([[0.0, 1.0], [1.0, 0.0], [2.0, 2.0]])
        velocity = system.velocity(states, np.zeros((3, 2)))
        expected_3 = -2 * states[2] + states[0] + states[1]
        assert velocity[2] == pytest.approx(expected_3)


class TestDeviationBound:
    """Frozen-neighbor predictions stay within rho of the true motion"""

    def test_randomized_neighbor_motion(self):
        """Neighbors wander in their region while the prediction holds them still"""
        spec = DynamicsSpec.create(
            [2], -1.0, {2: 1.0}, [SineSquaredTerm(2, -1.0)], u_max=2.0
        )
        ctx = AgentContext.create(1, spec, MISSION_BOUNDS, 1.0)
        rng = np.random.default_rng(7)
        h, steps = 0.01, 100
        for _ in range(100):
            x0 = rng.uniform(-2.0, 2.0, size=2)
            estimate = rng.uniform(-2.0, 2.0, size=2)
            u = rng.uniform(-1.0, 1.0, size=2)
            u *= min(1.0, spec.u_max / max(np.linalg.norm(u), 1e-12))
            radius = rng.uniform(0.0, 1.0)
            omega = rng.uniform(-6.0, 6.0)
            phase = rng.uniform(0.0, 2 * np.pi)
            predicted, actual = x0.copy(), x0.copy()
            for s in range(steps):
                angle = omega * (s + 0.5) * h + phase
                neighbor = estimate + radius * np.array([np.cos(angle), np.sin(angle)])
                frozen, moving = estimate[None, :], neighbor[None, :]
                predicted = rk4_step(
                    lambda x: eval_coupling(spec, x, frozen) + u, predicted, h
                )
                actual = rk4_step(
                    lambda x: eval_coupling(spec, x, moving) + u, actual, h
                )
                bound = rho(ctx, (s + 1) * h, 0.0)
                assert np.linalg.norm(actual - predicted) <= bound + 1e-9
