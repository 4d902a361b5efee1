"""Exception hierarchy shared by every module.

The CLI maps these onto stable exit codes (see ``disaggsim.cli``).
"""


class DisaggSimError(Exception):
    """Base class for all simulator errors."""

    exit_code = 1


class ConfigError(DisaggSimError, ValueError):
    """Invalid or unresolvable configuration (unknown device, bad key, ...)."""

    exit_code = 2


class InfeasibleError(DisaggSimError):
    """A request that cannot be satisfied by the given resources."""

    exit_code = 3


class CapacityError(InfeasibleError):
    """Memory nodes cannot hold the model."""


class PlacementError(InfeasibleError):
    """A table cannot be placed on the requested number of distinct nodes."""


class RoutingError(DisaggSimError):
    """Routing asked for a table that the placement does not know."""

    exit_code = 4


class SimulationInvariantError(DisaggSimError):
    """Internal consistency violation detected while simulating."""

    exit_code = 4
