"""Exception types shared across the package."""


class DscascadeError(Exception):
    """Base class for all package errors."""


class DemoFormatError(DscascadeError):
    """Demonstration file is malformed (bad JSON, missing keys, wrong types)."""


class ValidationError(DscascadeError):
    """Data violates a structural invariant (timestamps, dimensions, norms)."""


class DegenerateSegmentError(DscascadeError):
    """Segment has zero spatial extent and cannot be goal-normalized."""


class ShapeError(DscascadeError):
    """Tensor operation received incompatible shapes."""


class SecondDerivativeError(DscascadeError):
    """An op without a usable second derivative sits on a nested-gradient path."""


class DivergenceError(DscascadeError):
    """A rollout or training run produced a non-finite state."""


class ConfigError(DscascadeError):
    """Invalid or inconsistent run configuration."""
