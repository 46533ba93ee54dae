"""Exception hierarchy shared by every wawenet module."""


class WaweError(Exception):
    """Base class for all errors raised by wawenet."""


class InvalidLength(WaweError, ValueError):
    pass


class InvalidShape(WaweError, ValueError):
    pass


class InvalidConfig(WaweError, ValueError):
    pass


class StateError(WaweError, RuntimeError):
    """An operation was invoked in the wrong mode or without retained state."""


class NoSpeech(WaweError, ValueError):
    """The level meter found no active signal above its lowest threshold."""


class EmptyResult(WaweError, ValueError):
    pass


class RangeError(WaweError, ValueError):
    pass


class DegenerateInput(WaweError, ValueError):
    pass


class UnsupportedFormat(WaweError, ValueError):
    pass


class CorruptFile(WaweError, ValueError):
    pass


class UnsupportedVersion(CorruptFile):
    pass


class ParseError(WaweError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
