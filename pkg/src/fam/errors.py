"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or unknown configuration key."""


class InputError(ValueError):
    """Malformed input: wrong shape, out-of-range action, empty batch."""


class StateError(RuntimeError):
    """Operation not allowed in the current state (e.g. stepping a finished episode)."""


class NumericError(FloatingPointError):
    """A loss, gradient or output became non-finite."""


class LoadError(RuntimeError):
    """A checkpoint could not be loaded or does not match the requested setup."""


class RunError(RuntimeError):
    """Failure during a training run (environment fault, checkpoint write)."""
