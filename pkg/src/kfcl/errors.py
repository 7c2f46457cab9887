"""Exception hierarchy shared by every kfcl module."""


class KfclError(Exception):
    """Base class for all errors raised by kfcl."""


class ConfigurationError(KfclError):
    """Invalid model, task, strategy or run configuration."""


class UsageError(KfclError):
    """A function or command was called with unusable arguments."""


class DivergenceError(KfclError):
    """Training produced a non-finite loss or gradient."""


class OracleScaleError(KfclError):
    """A dense oracle object would exceed the configured size cap."""


class SnapshotIncompatibleError(KfclError):
    """A task snapshot does not match the model it is applied to."""


class ParseError(KfclError):
    """A task, snapshot or config file could not be parsed."""


class UndefinedBaselineError(KfclError):
    """Percentage change requested against a zero baseline."""
