"""Exception hierarchy shared by every AdaptCL module."""


class AdaptCLError(Exception):
    """Base class for all engine errors."""


class DimensionError(AdaptCLError, ValueError):
    pass


class ConfigurationError(AdaptCLError, ValueError):
    pass


class InputError(AdaptCLError, ValueError):
    pass


class StateError(AdaptCLError, RuntimeError):
    pass


class CapacityError(AdaptCLError, RuntimeError):
    pass


class FormatError(AdaptCLError, ValueError):
    """Malformed on-disk container; `field` names the offending header field."""

    def __init__(self, message: str, field: str = ""):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


class NumericError(AdaptCLError, ArithmeticError):
    """Non-finite value met during training, with position diagnostics."""

    def __init__(self, message: str, dataset_idx: int = None, epoch: int = None, step: int = None):
        where = ", ".join(
            f"{k}={v}" for k, v in (("dataset", dataset_idx), ("epoch", epoch), ("step", step)) if v is not None
        )
        super().__init__(f"{message} ({where})" if where else message)
        self.dataset_idx = dataset_idx
        self.epoch = epoch
        self.step = step
