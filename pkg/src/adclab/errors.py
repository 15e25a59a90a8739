"""Exception hierarchy shared by every stage of the pipeline."""


class AdcLabError(Exception):
    pass


class ConfigError(AdcLabError, ValueError):
    pass


class ShapeError(AdcLabError, ValueError):
    """Input batch does not match the shape a network expects."""


class DimensionError(AdcLabError, ValueError):
    pass


class LabelError(AdcLabError, ValueError):
    pass


class UninitializedHeadError(AdcLabError, RuntimeError):
    pass


class NumericError(AdcLabError, ArithmeticError):
    pass


class DivergenceError(NumericError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class ParseError(AdcLabError, ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class FormatError(AdcLabError, ValueError):
    pass


class EmptyClassError(AdcLabError, ValueError):
    pass


class EmptyTaskError(AdcLabError, ValueError):
    pass


class TargetError(AdcLabError, ValueError):
    pass


class OracleUnavailableError(AdcLabError, RuntimeError):
    pass


class EvaluationError(AdcLabError, ValueError):
    pass
