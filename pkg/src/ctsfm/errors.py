"""Exception types shared across the library."""


class CtsfmError(Exception):
    """Base class for all library errors."""


class InvalidArgumentError(CtsfmError, ValueError):
    """An argument violates a documented precondition."""


class BranchAmbiguityError(CtsfmError):
    """Rotation angle too close to pi for a well-defined logarithm."""


class DegenerateIntervalError(CtsfmError):
    """Knot interval too short to support interpolation."""


class OutOfRangeError(CtsfmError):
    """Query time outside the supported span."""


class BehindCameraError(CtsfmError):
    """Point does not project: camera-frame depth at or below the minimum."""


class LowParallaxError(CtsfmError):
    """Triangulation rays are too close to parallel."""


class CheiralityError(CtsfmError):
    """Triangulated point lies behind one of the cameras."""


class RankDeficiencyError(CtsfmError):
    """Normal equations are not positive definite.

    Carries the variable whose pivot block failed, which usually points at
    missing gauge fixing or an unconstrained landmark.
    """

    def __init__(self, variable, message=None):
        self.variable = variable
        super().__init__(message or f"rank-deficient pivot at {variable}")


class DivergenceError(CtsfmError):
    """Gauss-Newton failed to decrease the cost repeatedly.

    ``best_values`` and ``report`` hold the best iterate seen before abort.
    """

    def __init__(self, best_values, report, message="optimization diverged"):
        self.best_values = best_values
        self.report = report
        super().__init__(message)


class MonotonicityError(CtsfmError):
    """Event stream violated the non-decreasing timestamp contract."""


class BootstrapDeferredError(CtsfmError):
    """Not enough parallax or tracks yet; keep accumulating events."""


class BootstrapFailedError(CtsfmError):
    """Bootstrap never succeeded within the available stream."""


class EmptyStreamError(CtsfmError):
    """Scenario produced no events (e.g. all landmarks behind the camera)."""


class ScenarioConfigError(CtsfmError):
    """Scenario configuration failed validation; message names the field."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class UnsupportedInputError(CtsfmError):
    """Input lacks information the pipeline requires (e.g. track ids)."""
