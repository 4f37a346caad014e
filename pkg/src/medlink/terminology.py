"""Terminology ingestion: gazetteer TSV -> validated in-memory concept store."""

from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, NamedTuple

logger = logging.getLogger(__name__)

GAZETTEER_HEADER = ("code", "term", "semantic_tag", "is_preferred", "is_obsolete")


class GazetteerError(ValueError):
    """Raised for malformed gazetteer input."""


class GazetteerRow(NamedTuple):
    code: str
    term: str
    semantic_tag: str = ""
    is_preferred: bool = False
    is_obsolete: bool = False


class TermRow(NamedTuple):
    term: str
    code: str


@dataclass(frozen=True)
class Concept:
    code: str
    fsn: str
    synonyms: tuple[str, ...] = ()
    semantic_tag: str | None = None
    obsolete: bool = False
    language: str = "es"

    def __post_init__(self) -> None:
        if not self.code.strip():
            raise GazetteerError("concept code must be non-empty")
        if not self.fsn.strip():
            raise GazetteerError(f"concept {self.code!r} has an empty fsn")
        if any(not s.strip() for s in self.synonyms):
            raise GazetteerError(f"concept {self.code!r} has an empty synonym")
        if len(set(self.synonyms)) != len(self.synonyms) or self.fsn in self.synonyms:
            raise GazetteerError(f"concept {self.code!r} has duplicated terms")

    @property
    def terms(self) -> tuple[str, ...]:
        return (self.fsn, *self.synonyms)


@dataclass(frozen=True)
class ConceptStore:
    """Immutable code -> Concept map plus the flat (term, code) listing.

    ``term_rows`` lists every concept's fsn followed by its synonyms, in
    concept insertion order. Identical surface terms under different codes
    are kept as separate rows.
    """

    concepts: Mapping[str, Concept] = field(default_factory=dict)
    include_obsolete: bool = True

    def __post_init__(self) -> None:
        if not self.include_obsolete:
            stale = [c.code for c in self.concepts.values() if c.obsolete]
            if stale:
                raise GazetteerError(f"obsolete concepts in a non-obsolete store: {stale[:5]}")
        rows = tuple(TermRow(t, c.code) for c in self.concepts.values() for t in c.terms)
        object.__setattr__(self, "_term_rows", rows)

    @property
    def term_rows(self) -> tuple[TermRow, ...]:
        return self._term_rows  # type: ignore[attr-defined]

    def __len__(self) -> int:
        return len(self.concepts)

    def __contains__(self, code: object) -> bool:
        return code in self.concepts

    def __getitem__(self, code: str) -> Concept:
        return self.concepts[code]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ConceptStore):
            return NotImplemented
        return list(self.concepts.items()) == list(other.concepts.items())

    __hash__ = None  # type: ignore[assignment]

    @property
    def codes(self) -> list[str]:
        return list(self.concepts)


@dataclass(frozen=True)
class StoreStats:
    concept_count: int
    term_count: int
    synonym_histogram: dict[int, int]


def _parse_flag(value: str, lineno: int, column: str) -> bool:
    value = value.strip()
    if value not in ("0", "1"):
        raise GazetteerError(f"line {lineno}: {column} must be 0 or 1, got {value!r}")
    return value == "1"


def read_gazetteer_rows(path: str | Path) -> Iterator[GazetteerRow]:
    """Parse the canonical 5-column gazetteer TSV, validating each row."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != GAZETTEER_HEADER:
            raise GazetteerError(f"line 1: bad gazetteer header {header!r}")
        for lineno, cols in enumerate(reader, start=2):
            if not cols:
                continue
            if len(cols) != len(GAZETTEER_HEADER):
                raise GazetteerError(
                    f"line {lineno}: expected {len(GAZETTEER_HEADER)} columns, got {len(cols)}")
            code, term, tag = cols[0].strip(), cols[1].strip(), cols[2].strip()
            if not code:
                raise GazetteerError(f"line {lineno}: empty code")
            if not term:
                raise GazetteerError(f"line {lineno}: empty term")
            yield GazetteerRow(code, term, tag,
                               _parse_flag(cols[3], lineno, "is_preferred"),
                               _parse_flag(cols[4], lineno, "is_obsolete"))


def store_from_rows(rows: Iterable[GazetteerRow], include_obsolete: bool = True,
                    language: str = "es") -> ConceptStore:
    """Merge gazetteer rows into concepts.

    This is also the converter hook for non-canonical layouts: map foreign
    records to ``GazetteerRow`` and pass them here.

    Obsolete rows are dropped up front when ``include_obsolete`` is false;
    a concept is flagged obsolete only when every one of its rows is.
    """
    terms: dict[str, dict[str, bool]] = {}
    tags: dict[str, str] = {}
    live: dict[str, bool] = {}
    for row in rows:
        code, term = row.code.strip(), row.term.strip()
        if not code or not term:
            raise GazetteerError(f"empty code or term in row {row!r}")
        if row.is_obsolete and not include_obsolete:
            continue
        seen = terms.setdefault(code, {})
        seen[term] = seen.get(term, False) or row.is_preferred
        if row.semantic_tag and code not in tags:
            tags[code] = row.semantic_tag.strip()
        live[code] = live.get(code, False) or not row.is_obsolete

    concepts: dict[str, Concept] = {}
    for code, seen in terms.items():
        ordered = list(seen)
        preferred = [t for t in ordered if seen[t]]
        if preferred:
            fsn = preferred[0]
        else:
            fsn = ordered[0]
            logger.warning("code %s has no preferred term; promoting %r to fsn", code, fsn)
        concepts[code] = Concept(
            code=code,
            fsn=fsn,
            synonyms=tuple(t for t in ordered if t != fsn),
            semantic_tag=tags.get(code),
            obsolete=not live[code],
            language=language,
        )
    return ConceptStore(concepts, include_obsolete=include_obsolete)


def ingest_gazetteer(path: str | Path, include_obsolete: bool = False) -> ConceptStore:
    return store_from_rows(read_gazetteer_rows(path), include_obsolete=include_obsolete)


def write_gazetteer(store: ConceptStore, path: str | Path) -> None:
    """Export ``store`` in the canonical TSV layout (fsn row flagged preferred)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\t".join(GAZETTEER_HEADER) + "\n")
        for c in store.concepts.values():
            tag = c.semantic_tag or ""
            obs = "1" if c.obsolete else "0"
            for term in c.terms:
                pref = "1" if term == c.fsn else "0"
                fh.write(f"{c.code}\t{term}\t{tag}\t{pref}\t{obs}\n")


def store_stats(store: ConceptStore) -> StoreStats:
    hist = Counter(len(c.synonyms) for c in store.concepts.values())
    return StoreStats(
        concept_count=len(store.concepts),
        term_count=len(store.term_rows),
        synonym_histogram=dict(sorted(hist.items())),
    )
