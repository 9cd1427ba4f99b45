class AlignscopeError(Exception):
    pass


class InvalidParameterError(AlignscopeError, ValueError):
    pass


class ShapeError(AlignscopeError, ValueError):
    pass


class NumericError(AlignscopeError, ArithmeticError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class UndefinedMetricError(AlignscopeError, ValueError):
    pass


class FormatError(AlignscopeError, ValueError):
    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class ConfigError(AlignscopeError, ValueError):
    pass


class ConvergenceError(AlignscopeError, RuntimeError):
    def __init__(self, message, last_iterate=None, last_value=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.last_value = last_value
