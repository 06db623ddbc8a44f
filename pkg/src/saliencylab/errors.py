"""Exception hierarchy shared across the package."""


class SaliencyLabError(Exception):
    """Base class for all package errors."""


class GraphInputError(SaliencyLabError):
    """Bad shapes, unbound inputs, invalid targets or configs."""


class NumericError(SaliencyLabError):
    """A non-finite value appeared where the contract forbids it."""


class UnsupportedOpError(SaliencyLabError):
    """An op without the required derivative rule was encountered."""


class UnsupportedModelError(SaliencyLabError):
    """An explainer was applied to a model kind it does not support."""


class DegenerateDistributionError(SaliencyLabError):
    """An all-zero attribution cannot be normalized to a distribution."""


class EmptyPairsError(SaliencyLabError):
    """No valid cross-environment pairs could be formed."""


class BundleFormatError(SaliencyLabError):
    """Dataset bundle file is malformed or truncated."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (offset {offset})")
        self.offset = offset


class BundleVersionError(BundleFormatError):
    """Dataset bundle file carries an unsupported version."""


class DivergenceError(SaliencyLabError):
    """Training loss became non-finite."""

    def __init__(self, step, last_breakdown=None):
        super().__init__(f"training diverged at step {step}")
        self.step = step
        self.last_breakdown = last_breakdown
