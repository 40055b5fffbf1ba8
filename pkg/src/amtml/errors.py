"""Exception hierarchy shared by every module."""


class AmtmlError(Exception):
    pass


class ShapeError(AmtmlError, ValueError):
    pass


class ParameterError(AmtmlError, ValueError):
    pass


class DataError(AmtmlError, ValueError):
    pass


class StateError(AmtmlError, RuntimeError):
    pass


class DescriptorError(AmtmlError, ValueError):
    pass


class ConfigError(AmtmlError, ValueError):
    pass


class SpecError(AmtmlError, ValueError):
    pass


class GenerationError(AmtmlError, RuntimeError):
    pass


class NumericError(AmtmlError, ArithmeticError):
    """Non-finite value encountered during training or loss assembly."""

    def __init__(self, message, epoch=None, batch=None, component=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.component = component


class FormatError(AmtmlError, ValueError):
    """Malformed binary file; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
