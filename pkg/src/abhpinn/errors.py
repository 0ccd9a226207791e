"""Exception hierarchy shared across the solver.

Every failure mode the package can signal maps to one of these classes so
callers (and the CLI exit-code mapping) can dispatch on type alone.
"""


class AbhError(Exception):
    """Base class for all package errors."""


class ConfigError(AbhError):
    """Invalid configuration: bad field values, unbound tape inputs, bad shapes.

    ``problems`` collects every individual violation so they can be reported
    together rather than one at a time.
    """

    def __init__(self, message, problems=None):
        super().__init__(message)
        self.problems = list(problems) if problems else [message]


class DomainError(AbhError):
    """An evaluation point lies outside the closed state-space box."""


class NumericError(AbhError):
    """A non-finite value appeared during computation.

    ``node_index`` identifies the offending tape node when known;
    ``point_index`` the offending collocation point within a batch.
    """

    def __init__(self, message, node_index=None, point_index=None):
        super().__init__(message)
        self.node_index = node_index
        self.point_index = point_index


class FormatError(AbhError):
    """A serialized artifact is malformed: bad magic, truncation, shape mismatch."""


class EquilibriumError(AbhError):
    """Price block failure: non-positive aggregate capital or degenerate density."""


class OracleError(AbhError):
    """Finite-difference oracle failure: linear solve breakdown or non-convergence."""

    def __init__(self, message, residual_history=None, time_index=None):
        super().__init__(message)
        self.residual_history = residual_history
        self.time_index = time_index
