class PsfNavError(Exception):
    """Base class for errors raised by psfnav."""


class ConfigurationError(PsfNavError):
    pass


class IntegrationError(PsfNavError):
    pass


class ObserverError(PsfNavError):
    pass


class SynthesisError(PsfNavError):
    pass


class VerificationError(SynthesisError):
    def __init__(self, message: str, samples=None):
        super().__init__(message)
        self.samples = samples


class ProtocolError(PsfNavError):
    """Malformed message, timeout or exit of an external agent process."""
