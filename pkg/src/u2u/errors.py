"""Exception hierarchy. Everything raised on purpose derives from ``U2UError``."""


class U2UError(Exception):
    pass


class IoError(U2UError, OSError):
    pass


# audio
class NotWav(U2UError):
    pass


class UnsupportedFormat(U2UError):
    pass


class WrongSampleRate(U2UError):
    def __init__(self, found, expected=16000):
        super().__init__(f"sample rate {found} Hz, expected {expected} Hz")
        self.found = found
        self.expected = expected


class InvalidAudio(U2UError, ValueError):
    pass


# features / quantizer
class DegenerateFilter(U2UError):
    pass


class TooFewFrames(U2UError):
    pass


class DimMismatch(U2UError, ValueError):
    pass


class UnitOutOfRange(U2UError, ValueError):
    pass


# binary formats
class BadMagic(U2UError):
    pass


class VersionUnsupported(U2UError):
    pass


class TruncatedFile(U2UError):
    pass


class CorruptCheckpoint(U2UError):
    pass


# sequences / model
class MissingUnits(U2UError):
    pass


class ShapeMismatch(U2UError, ValueError):
    pass


class OddDim(U2UError, ValueError):
    pass


class MissingCache(U2UError):
    pass


class Interrupted(U2UError):
    pass


# metrics
class EmptyCorpus(U2UError, ValueError):
    pass


class LengthMismatch(U2UError, ValueError):
    pass


class EmptyReference(U2UError, ValueError):
    pass


class LineCountMismatch(U2UError):
    pass


# data / config
class BadFractions(U2UError, ValueError):
    pass


class ConfigError(U2UError, ValueError):
    pass
