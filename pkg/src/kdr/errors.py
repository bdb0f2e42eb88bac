"""Exception types shared across the engine.

Every error raised by kdr derives from KdrError so callers can catch the
whole family at an API boundary. Errors that carry extra context (positions,
line numbers, dropped names) expose it as attributes.
"""

from __future__ import annotations


class KdrError(Exception):
    """Base class for all engine errors."""


# --- ontology ---------------------------------------------------------------

class DuplicateName(KdrError):
    pass


class DuplicateAttribute(KdrError):
    pass


class UnknownParent(KdrError):
    pass


class KindMismatch(KdrError):
    pass


class CycleDetected(KdrError):
    pass


class UnknownConcept(KdrError):
    pass


class AmbiguousName(KdrError):
    pass


class EmptyImport(KdrError):
    pass


class SchemaViolation(KdrError):
    """An ontology document (file or proposal) breaks the declared schema."""


# --- llm gateway ------------------------------------------------------------

class BackendUnavailable(KdrError):
    pass


class ContextTooLong(KdrError):
    pass


# --- extraction -------------------------------------------------------------

class NoImportsFound(KdrError):
    """A model response contained no valid import line.

    `dropped` lists names that looked like imports but are unknown in the
    target namespace.
    """

    def __init__(self, message: str, dropped: list[str] | None = None):
        super().__init__(message)
        self.dropped = list(dropped or [])


class ParseFailure(KdrError):
    pass


class EmptyOutput(KdrError):
    pass


class UnknownGoldType(KdrError):
    pass


# --- knowledge store --------------------------------------------------------

class TypeMismatch(KdrError):
    pass


class KeyMismatch(KdrError):
    pass


class UnknownId(KdrError):
    pass


class IoFailure(KdrError):
    pass


class CorruptRecord(KdrError):
    """A persisted store line failed to parse; `line_number` is 1-based."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class UnrenderableValue(KdrError):
    pass


# --- reasoning --------------------------------------------------------------

class UnbalancedTags(KdrError):
    """Tag structure in a decomposition is broken; `position` is a character offset."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at offset {position})")
        self.position = position


class EmptyQuery(KdrError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at offset {position})")
        self.position = position


class NoConceptFound(KdrError):
    pass


class RejectedCode(KdrError):
    pass


class NoTopicEntity(KdrError):
    pass


class NoInstancesFound(KdrError):
    pass


class SandboxUnavailable(KdrError):
    pass


class SearchBackendUnavailable(KdrError):
    pass


class EmptyCorpus(KdrError):
    pass


# --- pipeline ---------------------------------------------------------------

class UnparseableProposal(KdrError):
    pass


class DanglingArtifact(KdrError):
    pass


# --- evaluation -------------------------------------------------------------

class GoldParentMissing(KdrError):
    pass


class ShapeMismatch(KdrError):
    pass


class SubgraphLoadFailure(KdrError):
    pass
