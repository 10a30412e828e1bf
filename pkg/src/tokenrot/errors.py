"""Exception hierarchy.

Every error raised by the package derives from :class:`TokenRotError`. The three
intermediate classes map onto CLI exit codes (config 2, data 3, numeric 4).
"""


class TokenRotError(Exception):
    exit_code = 1


class ConfigError(TokenRotError, ValueError):
    exit_code = 2


class DataError(TokenRotError):
    exit_code = 3


class NumericError(TokenRotError, ArithmeticError):
    exit_code = 4


# geometry / shapes
class ShapeNotInvariant(ConfigError):
    pass


class ShapeMismatch(ConfigError):
    pass


class OddShape(ShapeMismatch):
    pass


class WindowMismatch(ShapeMismatch):
    pass


# data
class InvalidSpec(ConfigError):
    pass


class InvalidFractions(ConfigError):
    pass


class InvalidFraction(ConfigError):
    pass


class FormatError(DataError):
    pass


class MissingRecord(DataError):
    pass


class EmptyLabeledSet(DataError):
    pass


# augmentation
class MaskRatioTooHigh(ConfigError):
    pass


# model state
class KeyMismatch(ConfigError):
    pass


class CheckpointMismatch(ConfigError):
    pass


# numerics
class DegenerateBatch(NumericError, ValueError):
    pass


class NonFiniteActivation(NumericError):
    def __init__(self, layer):
        super().__init__(f"non-finite activation after layer {layer!r}")
        self.layer = layer


class NonFiniteLoss(NumericError):
    def __init__(self, step, checkpoint=None):
        msg = f"non-finite loss at step {step}"
        if checkpoint is not None:
            msg += f"; last good state saved to {checkpoint}"
        super().__init__(msg)
        self.step = step
        self.checkpoint = checkpoint
