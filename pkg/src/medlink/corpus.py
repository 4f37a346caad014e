"""Annotated mention corpora: ingestion, and the unseen-codes evaluation subset."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

ANNOTATION_HEADER = ("doc_id", "span_start", "span_end", "text", "code")
NO_MAPPING = frozenset({"", "NOMAP", "NO_CODE"})


class AnnotationError(ValueError):
    """Raised for structurally malformed annotation rows."""


@dataclass(frozen=True)
class MentionRecord:
    doc_id: str
    span_start: int
    span_end: int
    text: str
    code: str

    def __post_init__(self) -> None:
        if self.span_start < 0 or self.span_end <= self.span_start:
            raise AnnotationError(f"bad span [{self.span_start}, {self.span_end})")
        if not self.text:
            raise AnnotationError("empty mention text")
        if not self.code:
            raise AnnotationError("empty code")


@dataclass(frozen=True)
class CorpusSplit:
    name: str
    records: tuple[MentionRecord, ...]
    n_dropped: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def codes(self) -> set[str]:
        return {r.code for r in self.records}


def split_codes(field: str) -> list[str]:
    """Expand a composite code field (``A+B``) into its distinct parts."""
    parts = [p.strip() for p in field.split("+")]
    return list(dict.fromkeys(p for p in parts if p))


def ingest_annotations(path: str | Path, name: str | None = None) -> CorpusSplit:
    """Read an annotations TSV.

    Structural problems (column count, non-integer offsets) raise
    ``AnnotationError``. Rows with no usable code, an empty text or an
    inverted span are dropped and counted in ``n_dropped``.
    """
    path = Path(path)
    records: list[MentionRecord] = []
    dropped = 0
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != ANNOTATION_HEADER:
            raise AnnotationError(f"line 1: bad annotations header {header!r}")
        for lineno, cols in enumerate(reader, start=2):
            if not cols:
                continue
            if len(cols) != len(ANNOTATION_HEADER):
                raise AnnotationError(
                    f"line {lineno}: expected {len(ANNOTATION_HEADER)} columns, got {len(cols)}")
            doc_id, start, end, text, code_field = cols
            try:
                span_start, span_end = int(start), int(end)
            except ValueError:
                raise AnnotationError(f"line {lineno}: non-integer span offsets") from None
            text = text.strip()
            codes = [] if code_field.strip().upper() in NO_MAPPING else split_codes(code_field)
            if not codes or not text or span_start < 0 or span_end <= span_start:
                dropped += 1
                continue
            for code in codes:
                records.append(MentionRecord(doc_id.strip(), span_start, span_end, text, code))
    return CorpusSplit(name or path.stem, tuple(records), dropped)


def write_annotations(records: Iterable[MentionRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\t".join(ANNOTATION_HEADER) + "\n")
        for r in records:
            fh.write(f"{r.doc_id}\t{r.span_start}\t{r.span_end}\t{r.text}\t{r.code}\n")


def unseen_codes_subset(train: CorpusSplit, test: CorpusSplit) -> CorpusSplit:
    seen = train.codes
    return CorpusSplit("unseen", tuple(r for r in test.records if r.code not in seen))
