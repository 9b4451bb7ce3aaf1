"""Exception hierarchy shared across the library.

The CLI maps these onto exit codes: configuration problems exit 2,
numeric/verification failures exit 3.
"""


class BevkitError(Exception):
    """Base class for all library errors."""


class ShapeMismatchError(BevkitError, ValueError):
    """Array shapes are inconsistent with an operation's contract."""


class GeometryError(BevkitError, ValueError):
    """Invalid spatial geometry (zero-sized conv output, bad grid, ...)."""


class SingularTransformError(BevkitError, ValueError):
    """An augmentation matrix cannot be inverted."""


class NumericError(BevkitError, ValueError):
    """Non-finite values or other numeric failures."""


class StaleLutError(BevkitError, ValueError):
    """A lookup table does not match the rig/grid/shapes it is used with."""


class ConfigError(BevkitError, ValueError):
    """Bad configuration file, unknown keys, missing radii, unknown camera."""


class FormatError(BevkitError, ValueError):
    """Corrupt or wrong-version binary file."""


class BudgetExceededError(BevkitError, ValueError):
    """A block needs more branch merges than the merge budget allows."""


class VerificationError(BevkitError, ValueError):
    """An equivalence check failed beyond its tolerance."""
