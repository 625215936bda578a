"""Exception types shared across the package.

Each carries the CLI exit code it maps to so the command layer can stay thin.
"""


class ProCacheError(Exception):
    exit_code = 1


class ConfigError(ProCacheError, ValueError):
    exit_code = 2


class InfeasibleSearchError(ProCacheError):
    """No valid pattern was found; ``report`` holds the saturation report."""

    exit_code = 3

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class NumericError(ProCacheError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, step=None, layer=None):
        super().__init__(message)
        self.step = step
        self.layer = layer


class RunStateError(ProCacheError, RuntimeError):
    """A cached action hit an empty cache slot."""

    exit_code = 4

    def __init__(self, step, layer, submodule):
        super().__init__(f"cache for layer {layer} / {submodule} is empty at step {step}")
        self.step = step
        self.layer = layer
        self.submodule = submodule


class UndefinedMetricError(ProCacheError, ValueError):
    exit_code = 4
