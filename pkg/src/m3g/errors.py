"""Exception hierarchy. Every error carries a stable machine-readable name."""


class M3GError(Exception):
    @property
    def name(self) -> str:
        return type(self).__name__


class MissingStream(M3GError):
    pass


class ShapeMismatch(M3GError, ValueError):
    pass


class LengthMismatch(ShapeMismatch):
    pass


class InvalidDuration(M3GError, ValueError):
    pass


class DegenerateInput(M3GError, ValueError):
    pass


class LengthNotDivisible(M3GError, ValueError):
    pass


class ConfigError(M3GError, ValueError):
    pass


class EmptyAudio(M3GError, ValueError):
    pass


class UnknownSpeaker(M3GError, KeyError):
    pass


class ModelMismatch(M3GError):
    pass


class TooFewSamples(M3GError, ValueError):
    pass
