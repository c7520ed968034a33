"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: validation-type errors exit 2,
I/O and format errors exit 3, numeric failures exit 4.
"""


class LayerLatError(Exception):
    pass


class DimensionError(LayerLatError, ValueError):
    pass


class ParameterError(LayerLatError, ValueError):
    pass


class ValidationError(LayerLatError, ValueError):
    pass


class ContractError(LayerLatError, RuntimeError):
    pass


class FormatError(LayerLatError, IOError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(LayerLatError, ArithmeticError):
    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class TrainingError(NumericError):
    pass
