"""Exception and warning classes."""


class MixExpertsError(Exception):
    """Base class for package errors."""


class InputError(MixExpertsError, ValueError):
    """Malformed input: bad shapes, out-of-range values, incompatible options."""


class NumericalError(MixExpertsError, ArithmeticError):
    """A computation produced non-finite or degenerate results."""


class DegenerateComponentError(NumericalError):
    def __init__(self, component, effective_size, message=None):
        self.component = component
        self.effective_size = effective_size
        super().__init__(
            message
            or f"component {component} is degenerate (effective size {effective_size:.3g})"
        )


class DegenerateObservationError(NumericalError):
    def __init__(self, index):
        self.index = index
        super().__init__(f"observation {index} has zero density under every component")


class NoAliasError(NumericalError):
    """No non-trivial alias parameter set was found."""


class SeparationWarning(UserWarning):
    """Gating coefficients hit the separation cap."""


class RegularizationWarning(UserWarning):
    """A degenerate estimate was regularized to stay in the parameter space."""


class ImportanceSamplingWarning(UserWarning):
    """The importance density may not cover all posterior modes."""
