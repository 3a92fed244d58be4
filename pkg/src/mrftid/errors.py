"""Exception types shared across the library."""


class MrftIdError(Exception):
    """Base class for all library-specific errors."""


class DegenerateParameterError(MrftIdError, ValueError):
    """A spherical point maps to a zero time constant or delay."""


class NoCrossingError(MrftIdError):
    """The open-loop phase never reaches the requested oscillation phase."""


class NotSteadyError(MrftIdError):
    """No steady oscillation cycle was found in a trajectory.

    `oscillation` holds the best candidate cycle (with ``steady=False``)
    when at least one full cycle was present, else None.
    """

    def __init__(self, msg, oscillation=None):
        super().__init__(msg)
        self.oscillation = oscillation


class TooSlowError(MrftIdError):
    """Oscillation period exceeds the classifier input window."""


class ConstraintInfeasibleError(MrftIdError):
    """Phase-margin constraint cannot be met by the requested rule."""


class InfeasibleControllerError(MrftIdError):
    """No feasible stabilizing controller found for a process."""


class DiscretizationStepError(MrftIdError):
    """Adjacent-process search failed to reach the target joint cost."""


class RadialFillError(MrftIdError):
    """Radial scale-factor search failed for a surface process."""


class GenerationError(MrftIdError):
    """Data generation failed for a class (named in the message)."""


class TrainingError(MrftIdError):
    """Training diverged; message carries the epoch index."""


class InvalidStartError(MrftIdError):
    """Optimizer objective is not finite at the initial point."""


class ResourceLimitError(MrftIdError):
    """A simulation would exceed the configured sample cap."""
