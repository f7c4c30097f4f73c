from typing import List, Optional


class SyndyError(Exception):
    """Base class for every error raised by the pipeline."""


class ValidationError(SyndyError):
    def __init__(self, message: str, violations: Optional[List[str]] = None):
        self.violations = list(violations or [message])
        super().__init__(message)


class StageError(SyndyError):
    def __init__(self, stage: str, message: str, raw: Optional[str] = None):
        self.stage = stage
        self.raw = raw
        super().__init__(f"[{stage}] {message}")


class ProviderError(SyndyError):
    """A provider (LLM, embedding, source) could not serve a request."""


class TransportError(ProviderError):
    """Retryable failure: network error, 429, 5xx."""

    def __init__(self, message: str, retry_after: Optional[float] = None):
        self.retry_after = retry_after
        super().__init__(message)


class AuthenticationError(ProviderError):
    """Credentials rejected. Never retried."""


class ParseError(SyndyError):
    STAGES = ("json", "repair", "schema")

    def __init__(self, stage: str, message: str, raw: str):
        self.stage = stage
        self.raw = raw
        super().__init__(f"{stage}: {message}")
