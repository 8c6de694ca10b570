"""Exception hierarchy shared by every ecfkg module."""


class EcfkgError(Exception):
    """Base class for all library errors."""


class SchemaViolation(EcfkgError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ParseError(EcfkgError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnknownEntity(EcfkgError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class GraphFrozen(EcfkgError):
    pass


class InsufficientPurchases(EcfkgError):
    def __init__(self, user_key, count):
        self.user_key = user_key
        self.count = count
        super().__init__(f"user {user_key!r} has {count} purchase(s); at least 2 are required to split")


class MissingPurchase(EcfkgError):
    pass


class EmptyVocabulary(EcfkgError):
    pass


class EmptyCandidates(EcfkgError):
    pass


class ConfigError(EcfkgError, ValueError):
    pass


class FormatError(EcfkgError):
    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"byte offset {offset}: {message}"
        super().__init__(message)


class EmptyRelevantSet(EcfkgError, ValueError):
    pass


class LengthMismatch(EcfkgError, ValueError):
    pass


class VocabularyMismatch(EcfkgError):
    pass
