class StreamError(Exception):
    """Base class for every error raised by edgestream."""


class ConfigError(StreamError):
    pass


class ScenarioError(StreamError):
    pass


# media
class MalformedBitstream(StreamError):
    pass


class OutOfOrderFrame(StreamError):
    pass


class EmptyBuffer(StreamError):
    pass


# rtp
class TruncatedPacket(StreamError):
    pass


class BadVersion(StreamError):
    pass


# control
class MalformedMessage(StreamError):
    pass


class IllegalTransition(StreamError):
    pass


# network
class UnknownAddress(StreamError):
    pass


class NoSamples(StreamError):
    pass


class RecoveryTimeout(StreamError):
    pass


# metrics
class DuplicateStage(StreamError):
    pass


class IncompleteTrace(StreamError):
    pass


class EmptySeries(StreamError):
    pass


class SchemaMismatch(StreamError):
    pass


class InvariantViolation(StreamError):
    pass
