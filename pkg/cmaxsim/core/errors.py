from typing import Optional


class CmaxError(Exception):
    """Root of every error raised by cmaxsim."""


class ConfigError(CmaxError):
    pass


class DataError(CmaxError):
    pass


class EventParseError(DataError):
    def __init__(self, message: str, path: Optional[str] = None, line_no: Optional[int] = None):
        self.path = path
        self.line_no = line_no
        where = f"{path}:{line_no}: " if path is not None and line_no is not None else ""
        super().__init__(f"{where}{message}")


class EventOrderError(EventParseError):
    """Event timestamps decrease; windows need t_ref <= t for every event."""


class OutOfRangeError(DataError):
    pass


class ImuOrderError(DataError):
    pass


class AlignmentError(DataError):
    pass


class NumericalError(CmaxError):
    pass


class OptimizerError(NumericalError):
    pass


class KernelError(CmaxError):
    pass


class EngineError(CmaxError):
    pass


class TraceError(CmaxError):
    """A scheduler trace broke the stage-departure or stage-order rules."""
