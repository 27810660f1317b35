"""Shared exception types."""

__all__ = ["InfeasibleError", "SolverError", "TopologyViolation"]


class InfeasibleError(RuntimeError):
    """The optimization problem has no feasible point (at this state)."""

    def __init__(self, message, subsystem=None, time_step=None):
        super().__init__(message)
        self.subsystem = subsystem
        self.time_step = time_step


class SolverError(RuntimeError):
    """A solver failed to converge or returned an unusable status."""

    def __init__(self, message, time_step=None):
        super().__init__(message)
        self.time_step = time_step


class TopologyViolation(RuntimeError):
    """A message was sent outside the allowed communication neighborhood."""

    def __init__(self, sender, receiver, distance, radius, phase):
        super().__init__(
            f"illegal {phase} message {sender} -> {receiver}: "
            f"{distance} hops exceeds radius {radius}"
        )
        self.sender = sender
        self.receiver = receiver
        self.distance = distance
        self.radius = radius
        self.phase = phase
