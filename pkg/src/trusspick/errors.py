"""Exception hierarchy shared by all trusspick modules."""


class DomainError(ValueError):
    """An input violates the documented domain of an operation."""


class SeedResolutionError(DomainError):
    """No detection seed could be resolved to a 3D point."""


class EmptyTrussError(DomainError):
    """A truss has no fruits assigned to it."""


class PoseIncompleteError(DomainError):
    """A required peduncle keypoint is missing."""


class PlanInfeasible(RuntimeError):
    """Collision avoidance could not produce a clear trajectory."""


class ProtocolError(RuntimeError):
    """An event is not legal in the current harvest state."""
