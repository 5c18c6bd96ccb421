"""Exception hierarchy shared across the package.

Every error raised deliberately by cellflow derives from :class:`CellflowError`,
so callers (and the CLI exit-code mapping) can distinguish our failures from
genuine bugs.
"""


class CellflowError(Exception):
    """Base class for all errors raised by cellflow."""


class ConfigError(CellflowError):
    """A configuration file or option set is invalid or inconsistent."""


class DataError(CellflowError):
    """Input data is malformed, inconsistent, or unusable.

    Examples: wrong CSV column counts, duplicate counter rows, unknown
    road identifiers, empty timestamp intersections, degenerate targets.
    """


class NumericalError(CellflowError):
    """A numerical procedure failed: divergence, singular system, or
    an optimizer that could not reach its tolerance."""
