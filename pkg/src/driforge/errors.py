"""Exception hierarchy shared by every stage.

Each error carries an ``error_kind`` and optional ``offending_ids`` so the CLI
can emit a machine-readable report without string parsing.
"""

from __future__ import annotations

from typing import Iterable


class DriforgeError(Exception):
    error_kind = "error"

    def __init__(self, detail: str, offending_ids: Iterable[str] = ()):
        super().__init__(detail)
        self.detail = detail
        self.offending_ids = list(offending_ids)

    def to_report(self, stage: str | None = None) -> dict:
        return {
            "stage": stage,
            "error_kind": self.error_kind,
            "detail": self.detail,
            "offending_ids": self.offending_ids,
        }


class ConfigError(DriforgeError):
    error_kind = "config"


class IngestError(DriforgeError):
    error_kind = "ingest"


class EmbeddingError(DriforgeError):
    error_kind = "embedding"


class DimensionMismatch(EmbeddingError):
    error_kind = "dimension_mismatch"


class ReductionError(DriforgeError):
    error_kind = "reduction"


class CategorizationError(DriforgeError):
    error_kind = "categorization"


class TemplateError(DriforgeError):
    error_kind = "template"


class GenerationError(DriforgeError):
    error_kind = "generation"

    def __init__(self, detail: str, offending_ids: Iterable[str] = (), transcripts: list | None = None):
        super().__init__(detail, offending_ids)
        self.transcripts = transcripts or []


class TransportError(DriforgeError):
    """A provider could not be reached or answered with a non-success status."""

    error_kind = "transport"


class ReviewError(DriforgeError):
    error_kind = "review"


class SurveyError(DriforgeError):
    error_kind = "survey"


class ValidationError(DriforgeError):
    error_kind = "validation"


class StageError(DriforgeError):
    error_kind = "stage"


class MissingUpstream(StageError):
    error_kind = "missing_upstream"
