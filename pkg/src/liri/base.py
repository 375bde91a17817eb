"""Shared record types and exceptions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable


class LiriError(Exception):
    """Base class for errors raised by this package."""


class DataError(LiriError, ValueError):
    """Malformed or inconsistent input data."""


class StaleIndexError(LiriError):
    """A dense index was built from a different checkpoint than the one in use."""


class FormatError(LiriError):
    """A persisted file could not be decoded."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class NonFiniteError(FormatError):
    pass


class OrchestrationError(LiriError):
    """A role in the asynchronous training pipeline failed."""

    def __init__(self, role: str, cause: BaseException):
        super().__init__(f"{role} failed: {cause!r}")
        self.role = role
        self.cause = cause


@dataclass(frozen=True)
class Passage:
    id: str
    text: str


@dataclass(frozen=True)
class Query:
    id: str
    text: str
    gold: str


@dataclass
class RankedResult:
    """Passages ordered by descending score, ties broken by ascending id."""

    items: list[tuple[str, float]] = field(default_factory=list)

    @classmethod
    def from_scores(cls, scores: Iterable[tuple[str, float]], k: int | None = None) -> "RankedResult":
        ranked = sorted(scores, key=lambda item: (-item[1], item[0]))
        if k is not None:
            ranked = ranked[:k]
        return cls([(pid, float(s)) for pid, s in ranked])

    @property
    def ids(self) -> list[str]:
        return [pid for pid, _ in self.items]

    def rank_of(self, passage_id: str) -> int | None:
        """1-based rank of ``passage_id``, or None when absent."""
        for i, (pid, _) in enumerate(self.items, start=1):
            if pid == passage_id:
                return i
        return None

    def __len__(self) -> int:
        return len(self.items)


class DuplicateIdError(DataError):
    pass


class DanglingGoldError(DataError):
    pass


class MalformedLineError(DataError):
    pass


class EmptyCorpusError(DataError):
    pass
