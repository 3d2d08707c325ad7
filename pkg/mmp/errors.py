"""Exception hierarchy shared by the planner modules"""

from typing import Optional


class PlannerError(Exception):
    """Base class for every error raised by the planner"""


class ScenarioError(PlannerError, ValueError):
    """Scenario file failed validation"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class GeometryError(PlannerError, ValueError):
    """Invalid partition argument (radius, region id, direction, adjacency)"""


class OutOfWorkspaceError(GeometryError):
    """A point lies outside the workspace bounds"""


class DynamicsError(PlannerError, ValueError):
    """Invalid dynamics evaluation or integration request"""


class FormulaSyntaxError(PlannerError, ValueError):
    """MITL text could not be parsed"""

    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} at position {position}")


class IntervalError(PlannerError, ValueError):
    """Timing interval with a >= b"""


class InconclusiveError(PlannerError):
    """A finite word is too short to decide a bounded operator"""


class NotFlatError(PlannerError, ValueError):
    """Formula is outside the fragment handled by the automaton translator"""


class AlphabetMismatchError(PlannerError, ValueError):
    """Transition system labels use propositions the automaton does not know"""


class WeightsError(PlannerError, ValueError):
    """Cost weights are not positive where required"""


class TerminalDesignError(PlannerError):
    """No local controller and terminal level pass the sampled checks"""


class UnsatisfiableError(PlannerError):
    """The product of an agent's WTS and automaton has an empty language"""

    def __init__(self, agent: int, formula: str):
        self.agent = agent
        self.formula = formula
        super().__init__(f"agent {agent}: no accepting run for formula {formula!r}")


class InfeasibleAbstractionError(PlannerError):
    """An agent's abstraction has no transition out of its initial region"""

    def __init__(self, agent: int, message: str):
        self.agent = agent
        super().__init__(f"agent {agent}: {message}")


class ClosedLoopInfeasibleError(PlannerError):
    """A re-solve failed while executing the synthesized plans"""

    def __init__(self, agent: int, k: int, z: int):
        self.agent = agent
        self.k = k
        self.z = z
        super().__init__(f"no admissible controller for agent {agent} at k={k}, z={z}")


class ClockError(PlannerError, ValueError):
    """A clock constraint or edge uses a clock the automaton does not declare"""
