"""Exception hierarchy shared by every toolgate module."""

from __future__ import annotations


class ToolgateError(Exception):
    """Base class for all errors raised by toolgate."""


class ParseError(ToolgateError):
    """A document is not syntactically valid JSON/YAML."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {column})" if column is not None else ")")
        super().__init__(message + where)


class StructuralError(ToolgateError):
    """A document parses but violates a structural requirement."""


class CompileError(ToolgateError):
    """Tool compilation failed, typically an irreconcilable name collision."""


class DuplicateToolError(ToolgateError):
    """A tool name is already present in a registry."""


class RegistryIntegrityError(ToolgateError):
    """A registry or index file is empty, truncated or otherwise corrupt."""


class IncompatibleFormatError(ToolgateError):
    """A persisted file uses an unsupported format version."""


class ConfigurationError(ToolgateError):
    """Invalid or incomplete configuration (including missing credentials)."""


class ProviderError(ToolgateError):
    """An embedding provider returned a non-retryable failure."""


class EmbeddingIntegrityError(ToolgateError):
    """Embedding vectors are inconsistent (dimension drift, zero vectors)."""


class FingerprintMismatchError(ToolgateError):
    """A query embedder does not match the embedder an index was built with."""


class ProtocolError(ToolgateError):
    """A JSON-RPC / MCP protocol violation."""

    def __init__(self, code: int, message: str, data: object = None):
        self.code = code
        self.data = data
        super().__init__(message)


class RegistrationError(ToolgateError):
    """A downstream MCP server could not be registered."""


class DataError(ToolgateError):
    """Evaluation data (tasks, traces, transcripts) is inconsistent."""


class TranscriptError(DataError):
    """A transcript tool-call entry is malformed; carries its position."""

    def __init__(self, message: str, message_index: int, call_index: int | None = None):
        self.message_index = message_index
        self.call_index = call_index
        pos = f"message {message_index}" + (f", tool call {call_index}" if call_index is not None else "")
        super().__init__(f"{message} at {pos}")
