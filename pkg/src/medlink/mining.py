"""Training-example construction for the bi-encoder and the cross-encoder."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .terminology import ConceptStore, GazetteerRow, store_from_rows

if TYPE_CHECKING:
    from .corpus import MentionRecord
    from .index import CandidateSet


@dataclass(frozen=True)
class PairExample:
    anchor: str
    positive: str
    group: str

    def __post_init__(self) -> None:
        if not (self.anchor and self.positive and self.group):
            raise ValueError("pair fields must be non-empty")


@dataclass(frozen=True)
class Triplet:
    anchor: str
    positive: str
    negative: str
    meta: str | None = None

    def __post_init__(self) -> None:
        if not (self.anchor and self.positive and self.negative):
            raise ValueError("triplet fields must be non-empty")
        if self.positive == self.negative:
            raise ValueError("positive and negative must differ")


@dataclass
class HardTripletResult:
    triplets: list[Triplet]
    skipped_unknown_gold: int = 0
    skipped_no_positive: int = 0


def build_fsn_pairs(store: ConceptStore) -> list[PairExample]:
    """(fsn, synonym) pairs grouped by code, ordered by code then synonym order."""
    pairs = []
    for code in sorted(store.concepts):
        c = store.concepts[code]
        pairs.extend(PairExample(c.fsn, syn, code) for syn in c.synonyms)
    return pairs


def build_random_triplets(store: ConceptStore, negatives_per_positive: int = 5,
                          seed: int = 0) -> list[Triplet]:
    """Each (fsn, synonym) pair gets ``negatives_per_positive`` random negatives.

    Negatives are drawn uniformly (with replacement) from the term rows of
    other codes.
    """
    if negatives_per_positive < 0:
        raise ValueError("negatives_per_positive must be >= 0")
    if len(store.concepts) < 2:
        raise ValueError("no negatives available: store has fewer than two codes")
    if negatives_per_positive == 0:
        return []
    rows = sorted(store.term_rows, key=lambda r: (r.code, r.term))
    codes = np.array([r.code for r in rows], dtype=object)
    terms = np.array([r.term for r in rows], dtype=object)
    rng = np.random.default_rng(seed)
    triplets = []
    for pair in build_fsn_pairs(store):
        # a cross-synonym identical to the positive cannot serve as its negative
        pool = np.flatnonzero((codes != pair.group) & (terms != pair.positive))
        if pool.size == 0:
            raise ValueError(f"no negatives available for code {pair.group!r}")
        for i in rng.choice(pool, size=negatives_per_positive, replace=True):
            triplets.append(Triplet(pair.anchor, pair.positive, rows[i].term, meta=rows[i].code))
    return triplets


def build_hard_triplets_from_candidates(
    candidates: Iterable[tuple[MentionRecord, CandidateSet]],
    store: ConceptStore,
) -> HardTripletResult:
    """Triplets (mention, gold term, wrong-code candidate term) in retrieval order.

    The positive is the gold code's retrieved term when it was retrieved,
    otherwise the store's first term for that code (fsn, then synonyms).
    Terms identical to the mention never serve as positives: when the pool
    is built from the training mentions themselves, every mention retrieves
    its own text and would only teach string identity. Mentions whose gold
    code is unknown to ``store``, or that have no usable positive, are
    skipped and counted.
    """
    out = HardTripletResult([])
    for record, cset in candidates:
        gold = record.code
        if gold not in store:
            out.skipped_unknown_gold += 1
            continue
        options = [c.term for c in cset.candidates if c.code == gold] + list(store[gold].terms)
        positive = next((t for t in options if t != record.text), None)
        if positive is None:
            out.skipped_no_positive += 1
            continue
        for c in cset.candidates:
            if c.code != gold and c.term != positive:
                out.triplets.append(Triplet(record.text, positive, c.term, meta=c.code))
    return out


def mention_vocabulary_store(records: Iterable[MentionRecord]) -> ConceptStore:
    """Candidate pool built from annotated mentions (term = mention text).

    Used to mine cross-encoder triplets without the task gazetteer; each
    code's first-seen mention becomes its fsn.
    """
    seen: set[str] = set()
    rows = []
    for r in records:
        rows.append(GazetteerRow(r.code, r.text, "", r.code not in seen, False))
        seen.add(r.code)
    return store_from_rows(rows, include_obsolete=True)


def write_pairs(pairs: Sequence[PairExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("anchor\tpositive\tgroup\n")
        for p in pairs:
            fh.write(f"{p.anchor}\t{p.positive}\t{p.group}\n")


def read_pairs(path: str | Path) -> list[PairExample]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        next(reader)
        return [PairExample(*row) for row in reader if row]


def write_triplets(triplets: Sequence[Triplet], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("anchor\tpositive\tnegative\n")
        for t in triplets:
            fh.write(f"{t.anchor}\t{t.positive}\t{t.negative}\n")


def read_triplets(path: str | Path) -> list[Triplet]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        next(reader)
        return [Triplet(*row) for row in reader if row]
