"""Exception hierarchy shared by all modules.

The CLI maps the families below to stable exit codes, so new errors should
subclass the closest family rather than ``GtfuseError`` directly.
"""


class GtfuseError(Exception):
    """Base class for every error raised by the package."""


# --- input / configuration (exit code 2) ---------------------------------

class InputError(GtfuseError):
    pass


class ParseError(InputError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class NonMonotonicTime(ParseError):
    pass


class BadQuaternion(ParseError):
    pass


class BadConfig(InputError):
    pass


class EmptyStream(InputError):
    pass


# --- degenerate geometry / excitation (exit code 4) ----------------------

class DegenerateMotion(GtfuseError):
    """Not enough motion excitation to observe the requested quantity."""


class RankDeficient(DegenerateMotion):
    pass


class FlatSignal(DegenerateMotion):
    pass


class DegenerateScrew(GtfuseError):
    """Rotation angle too small for the screw pitch to be well defined."""


# --- numerical / domain ---------------------------------------------------

class OutOfDomain(GtfuseError):
    def __init__(self, t, lo=None, hi=None):
        self.t = t
        msg = f"time {t!r} outside spline domain"
        if lo is not None:
            msg += f" [{lo!r}, {hi!r}]"
        super().__init__(msg)


class UnsupportedOrder(GtfuseError):
    pass


class InsufficientCoverage(GtfuseError):
    pass


class TooFewSamples(InputError):
    pass


class NoOverlap(InputError):
    pass


class EmptyProblem(GtfuseError):
    pass


class DomainMismatch(GtfuseError):
    pass


class NumericalFailure(GtfuseError):
    def __init__(self, message, block=None):
        self.block = block
        if block is not None:
            message = f"{message} (block {block})"
        super().__init__(message)


class NoMatches(GtfuseError):
    pass


class Degenerate(GtfuseError):
    """Point configuration does not determine a rigid alignment."""


class IoError(GtfuseError):
    """Filesystem failure while reading or writing an artifact."""
