"""Exception hierarchy for lmfusion."""


class FusionError(ValueError):
    """Base class for all lmfusion errors."""


class ShapeMismatch(FusionError):
    pass


class DimensionMismatch(ShapeMismatch):
    """An input vector's length disagrees with its modality factor."""


class MissingAppendedOne(FusionError):
    """Strict mode: a fusion input does not end with the constant 1."""


class OrderTooLarge(FusionError):
    """Explicit tensor would exceed the configured maximum order."""


class SizeTooLarge(FusionError):
    """Explicit tensor would exceed the configured maximum entry count."""


class NonFiniteLoss(FloatingPointError):
    pass


class ConfigError(FusionError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
