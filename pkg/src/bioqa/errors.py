"""Exception hierarchy shared by every pipeline stage."""

from __future__ import annotations


class BioQAError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(BioQAError):
    pass


class SchemaError(BioQAError):
    """Input file does not match the expected BioASQ/MedProcNER layout."""


class IoError(BioQAError, OSError):
    pass


class UnknownQuestionId(BioQAError, KeyError):
    pass


class PreconditionError(BioQAError, ValueError):
    """Caller violated an operation's documented precondition."""


# -- transport ---------------------------------------------------------------


class TransportError(BioQAError):
    """A remote call failed."""


class TransientError(TransportError):
    """Retryable failure: 5xx, 429, overload, timeout, connection reset."""


class TransportExhausted(TransportError):
    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts


class AuthError(TransportError):
    """401/403 from the remote side. Never retried."""


class RequestRejected(TransportError):
    """Non-retryable client error other than auth (e.g. 400, 404)."""


class ScriptMiss(BioQAError, LookupError):
    def __init__(self, fingerprint: str, preview: str = ""):
        super().__init__(f"no scripted response for fingerprint {fingerprint[:16]}… {preview!r}")
        self.fingerprint = fingerprint


class QuerySyntaxRejected(TransportError):
    pass


class ParseError(BioQAError):
    pass


# -- model output --------------------------------------------------------------


class EmptyCompletion(BioQAError):
    pass


class MalformedReply(BioQAError):
    pass


class MalformedAnswer(BioQAError):
    pass


class Unnormalizable(BioQAError):
    pass


# -- medproc / metrics ---------------------------------------------------------


class MissingColumn(BioQAError, KeyError):
    pass


class DuplicateDocument(BioQAError, ValueError):
    pass


class EmptyInput(BioQAError, ValueError):
    pass


class KeyMismatch(BioQAError, ValueError):
    pass
