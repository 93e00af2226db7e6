"""Exception types raised across the package."""


class MamsError(Exception):
    """Base class; ``module`` names the subsystem that raised it."""

    module = "mams"

    def __init__(self, *args, module=None):
        super().__init__(*args)
        if module is not None:
            self.module = module

    def __str__(self):
        return f"[{self.module}] {super().__str__()}"


class DimensionError(MamsError, ValueError):
    module = "tensor"


class ConfigError(MamsError, ValueError):
    module = "config"


class UsageError(MamsError, RuntimeError):
    module = "usage"


class InputError(MamsError, ValueError):
    module = "input"


class CorruptionError(MamsError, RuntimeError):
    module = "momentum"


class NumericalError(MamsError, FloatingPointError):
    module = "training"
