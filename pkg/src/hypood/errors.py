"""Exception hierarchy.

Every error raised by the library derives from :class:`HypoodError`.  The
three intermediate classes map onto CLI exit codes (config 2, data 3,
numeric 4).
"""


class HypoodError(Exception):
    exit_code = 1


class ConfigError(HypoodError):
    exit_code = 2

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class InvalidParam(HypoodError):
    exit_code = 2


class DataError(HypoodError):
    exit_code = 3


class NumericError(HypoodError):
    exit_code = 4


class EmptyDataset(DataError):
    pass


class EmptyClass(DataError):
    pass


class LabelOutOfRange(DataError):
    pass


class DimMismatch(DataError):
    pass


class IoError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, path, line, message):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class SchemaError(DataError):
    pass


class VersionError(DataError):
    pass


class TooFewSamples(DataError):
    pass


class NoPositives(DataError):
    pass


class ZeroVector(NumericError):
    pass


class NotUnit(NumericError):
    pass


class NotSPD(NumericError):
    pass


class StaleCache(NumericError):
    pass


class NonFiniteLoss(NumericError):
    pass
