from __future__ import annotations


class HetNasError(Exception):
    """Base class for all errors raised by hetnas."""


class DatasetError(HetNasError):
    pass


class ParseError(DatasetError):
    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class SchemaError(DatasetError):
    pass


class SplitError(DatasetError):
    def __init__(self, message: str, ids=()):
        self.ids = list(ids)
        super().__init__(message)


class SpaceError(HetNasError):
    pass


class EnumerationCapError(SpaceError):
    def __init__(self, size: int, cap: int):
        self.size = size
        self.cap = cap
        super().__init__(f"space has {size} architectures, enumeration cap is {cap}")


class ArchDecodeError(SpaceError, ValueError):
    """Raised when architecture text cannot be decoded against a space.

    ``kind`` is a short machine-readable tag used in reject notes.
    """

    kind = "format"

    def __init__(self, message: str, text: str = ""):
        self.text = text
        super().__init__(message)


class LengthError(ArchDecodeError):
    kind = "length"

    def __init__(self, expected: int, got: int, text: str = ""):
        self.expected = expected
        self.got = got
        super().__init__(f"expected {expected} tokens, got {got}", text)


class TokenError(ArchDecodeError):
    kind = "token"

    def __init__(self, position: int, token: str, text: str = "", allowed=()):
        self.position = position
        self.token = token
        self.allowed = tuple(allowed)
        msg = f"unknown token {token!r} at position {position}"
        if self.allowed:
            msg += f" (allowed: {', '.join(self.allowed)})"
        super().__init__(msg, text)


class DuplicateError(ArchDecodeError):
    kind = "duplicate"

    def __init__(self, text: str = "", first: int = 0):
        self.first = first
        super().__init__(f"duplicate of candidate {first + 1} in the same response", text)


class ExcessError(ArchDecodeError):
    kind = "excess"

    def __init__(self, batch: int, text: str = ""):
        self.batch = batch
        super().__init__(f"more than the requested {batch} candidates", text)


class EmptyProposal(HetNasError):
    def __init__(self, rejects=()):
        self.rejects = list(rejects)
        super().__init__(f"no valid architecture in response ({len(self.rejects)} rejected fragments)")


class ControllerAbort(HetNasError):
    pass


class ConfigError(HetNasError):
    pass


class GatewayError(HetNasError):
    pass


class TransportError(GatewayError):
    pass


class ContextOverflow(GatewayError):
    pass


class IntegrityError(HetNasError):
    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{self.path}: corrupt at byte {offset}: {message}")
