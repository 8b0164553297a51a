"""Exception hierarchy shared across threadloom modules."""


class ThreadloomError(Exception):
    """Base class for domain errors (the CLI maps these to exit code 1)."""


class CorpusError(ThreadloomError, ValueError):
    """Malformed corpus record, duplicate id or missing label."""


class PreconditionError(ThreadloomError, ValueError):
    """An operation was called with inputs violating its contract."""


class EmptyQueueError(ThreadloomError, LookupError):
    pass


class RemoteError(ThreadloomError):
    """Failure talking to a remote inference endpoint."""


class NetworkError(RemoteError):
    pass


class EndpointStatusError(RemoteError):
    def __init__(self, status: int, body: str = ""):
        super().__init__(f"endpoint returned HTTP {status}: {body[:200]}")
        self.status = status
        self.body = body


class LogprobsUnsupportedError(RemoteError):
    """The endpoint answered but did not return echoed prompt log-probabilities."""
