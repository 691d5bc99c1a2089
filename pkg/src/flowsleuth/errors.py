"""Exception types shared across the engine.

Parsing problems that should not abort a whole file (malformed lines) are
collected as report objects instead of raised; everything here is a hard
failure for the operation that raises it.
"""

from __future__ import annotations


class FlowsleuthError(Exception):
    """Base class for all engine errors."""


class MissingRequiredColumn(FlowsleuthError):
    def __init__(self, name: str):
        super().__init__(f"required column missing: {name}")
        self.name = name


class EmptyPassage(FlowsleuthError):
    """Document passage was empty or whitespace-only."""


class EmptyText(FlowsleuthError):
    """Embedder input was empty or whitespace-only."""


class DimensionMismatch(FlowsleuthError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"vector dimension mismatch: expected {expected}, got {got}")
        self.expected = expected
        self.got = got


class RemoteUnavailable(FlowsleuthError):
    """A remote backend (embedder or LLM) could not be reached."""

    def __init__(self, detail: str):
        super().__init__(f"remote backend unavailable: {detail}")
        self.detail = detail


class ScorerUnavailable(FlowsleuthError):
    """The cross-encoder scorer could not produce scores."""


class StorageFailure(FlowsleuthError):
    """The vector store could not be read or written."""


class UnknownCollection(FlowsleuthError):
    def __init__(self, name: str):
        super().__init__(f"unknown collection: {name}")
        self.name = name


class GateNotPassed(FlowsleuthError):
    """Prompt construction was attempted on an abstained retrieval."""


class ContextOverflow(FlowsleuthError):
    def __init__(self, token_estimate: int):
        super().__init__(f"prompt exceeds context budget: ~{token_estimate} tokens")
        self.token_estimate = token_estimate


class SchemaViolation(FlowsleuthError):
    def __init__(self, section: str, detail: str = ""):
        msg = f"response schema violation in section {section}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.section = section


class UnknownDecision(FlowsleuthError):
    def __init__(self, token: str):
        super().__init__(f"unrecognized verdict token: {token!r}")
        self.token = token


class UnverifiedCitation(FlowsleuthError):
    """The model cited an entry id that is not part of the retrieved evidence.

    This is the anti-hallucination check: callers must surface it as a
    grounding failure, never repair or ignore it.
    """

    def __init__(self, entry_id: str):
        super().__init__(f"citation does not resolve to retrieved evidence: {entry_id!r}")
        self.entry_id = entry_id


class NoOverlap(FlowsleuthError):
    """Predictions and labels share no record ids."""


class SingleClassLabels(FlowsleuthError):
    """ROC/AUC is undefined when only one class is present."""


class LabelSetMismatch(FlowsleuthError):
    """Two reports being compared were not computed over the same label set."""
