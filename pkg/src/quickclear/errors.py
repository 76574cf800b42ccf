"""Exception hierarchy shared across the testbed."""

from __future__ import annotations


class QuickClearError(Exception):
    """Base class for every error raised by this package."""


class OutOfRange(QuickClearError, ValueError):
    def __init__(self, field: str, value: object = None, detail: str = "") -> None:
        self.field = field
        self.value = value
        msg = f"{field} out of range: {value!r}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class InvalidMessage(QuickClearError, ValueError):
    """A message failed validation before encoding."""


class DecodeError(QuickClearError, ValueError):
    """Base for all wire decoding failures."""


class FrameTruncated(DecodeError):
    pass


class BadMagic(DecodeError):
    pass


class BadHeader(DecodeError):
    """Version or message-type byte not recognised."""


class ChecksumMismatch(DecodeError):
    pass


class FieldOutOfRange(DecodeError, OutOfRange):
    """A decoded field violates its domain invariant."""


class CmpDecodeError(DecodeError):
    """Failure decoding a CMP stream frame.

    ``consumed`` is the number of bytes the caller should drop to resync,
    so a connection can keep reading after a bad frame.
    """

    def __init__(self, msg: str, consumed: int = 0) -> None:
        super().__init__(msg)
        self.consumed = consumed


class BodyTooLarge(CmpDecodeError):
    def __init__(self, length: int, limit: int) -> None:
        super().__init__(f"frame body of {length} bytes exceeds {limit}", consumed=0)
        self.length = length
        self.limit = limit


class MalformedBody(CmpDecodeError):
    pass


class UnknownKind(CmpDecodeError):
    def __init__(self, kind: object, consumed: int = 0) -> None:
        super().__init__(f"unknown record kind {kind!r}", consumed=consumed)
        self.kind = kind


class ConfigError(QuickClearError, ValueError):
    def __init__(self, path: str, detail: str) -> None:
        self.path = path
        self.detail = detail
        super().__init__(f"{path}: {detail}" if path else detail)


class ParseError(QuickClearError, ValueError):
    def __init__(self, line: int, detail: str = "") -> None:
        self.line = line
        super().__init__(f"line {line}: {detail}" if detail else f"line {line}")


class DuplicateRecord(QuickClearError, ValueError):
    pass


class CausalityViolation(QuickClearError, ValueError):
    pass


class PortInUse(QuickClearError, OSError):
    pass
