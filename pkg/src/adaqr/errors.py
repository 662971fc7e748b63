"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ``DataError`` -> 2, ``ServiceError`` -> 3.
"""


class AdaqrError(Exception):
    """Base class for every error raised by this package."""


class DataError(AdaqrError, ValueError):
    """Invalid or inconsistent input data."""


class MalformedRecordError(DataError):
    def __init__(self, path, line_no, reason):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{self.path}:{line_no}: {reason}")


class DimensionMismatchError(DataError):
    pass


class DuplicateIdError(DataError):
    pass


class NonFiniteError(DataError):
    pass


class MissingRewriteError(DataError):
    """An LLM-routed query has no reasoned embedding and no online source."""

    def __init__(self, query_id, detail="no reasoned embedding available"):
        self.query_id = query_id
        super().__init__(f"query {query_id!r}: {detail}")


class EmptyOracleSetError(DataError):
    pass


class ZeroShiftError(DataError):
    def __init__(self, index):
        self.index = index
        super().__init__(f"pair {index} has identical original and reasoned embeddings")


class TrainingDivergedError(AdaqrError):
    pass


class ServiceError(AdaqrError):
    """Failure talking to an external LLM or embedding endpoint."""


class AuthError(ServiceError):
    pass


class RateLimitError(ServiceError):
    pass


class ServerError(ServiceError):
    pass


class EmptyCompletionError(ServiceError):
    pass


class CacheMissError(ServiceError):
    """Offline embedding lookup found no stored vector for a text."""

    def __init__(self, content_hash):
        self.content_hash = content_hash
        super().__init__(f"no stored embedding for content hash {content_hash}")


class NegativeGradeError(MalformedRecordError):
    pass
