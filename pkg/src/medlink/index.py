"""Dense term index and top-k candidate retrieval."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .encoder import TextEncoder, encode_batch
from .terminology import ConceptStore, TermRow

INDEX_MAGIC = b"CLIX"
INDEX_VERSION = 1
_HEADER = struct.Struct("<4sHIQ32s")
_LEN = struct.Struct("<I")


class IndexError_(ValueError):
    """Index build/load/query failure (named to avoid shadowing the builtin)."""


class Candidate(NamedTuple):
    code: str
    term: str
    score: float


@dataclass(frozen=True)
class CandidateSet:
    mention: str
    candidates: tuple[Candidate, ...]
    k_requested: int

    def __len__(self) -> int:
        return len(self.candidates)

    @property
    def codes(self) -> list[str]:
        return [c.code for c in self.candidates]


@dataclass
class VectorIndex:
    dim: int
    entries: list[TermRow]
    matrix: np.ndarray  # (N, dim) float32, unit rows
    built_with: bytes
    _layout: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.matrix.shape != (len(self.entries), self.dim):
            raise IndexError_("matrix shape does not match entries/dim")
        if len(self.built_with) != 32:
            raise IndexError_("encoder fingerprint must be 32 bytes")

    def __len__(self) -> int:
        return len(self.entries)

    def layout(self):
        """Rows regrouped by code (codes ascending): order, segment starts, codes."""
        if self._layout is None:
            codes = np.array([e.code for e in self.entries], dtype=object)
            uniq, inverse = np.unique(codes.astype(str), return_inverse=True)
            order = np.argsort(inverse, kind="stable")
            starts = np.searchsorted(inverse[order], np.arange(len(uniq)))
            self._layout = (order, starts, [str(c) for c in uniq])
        return self._layout


def _normalize_rows(X: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise IndexError_("cannot index a zero embedding")
    return X / norms


def build_index(store: ConceptStore, encoder: TextEncoder, batch_size: int = 256,
                existing: str | Path | None = None) -> VectorIndex:
    """Encode every term row of ``store`` (fsn and each synonym separately).

    ``existing`` names an index file this build will replace; a dim clash
    with it is an error.
    """
    if len(store) == 0:
        raise IndexError_("cannot index an empty store")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if existing is not None and Path(existing).exists():
        old_dim = read_index_header(existing)["dim"]
        if old_dim != encoder.dim:
            raise IndexError_(f"encoder dim {encoder.dim} != existing index dim {old_dim}")
    entries = list(store.term_rows)
    terms = [e.term for e in entries]
    blocks = [encode_batch(encoder, terms[i:i + batch_size])
              for i in range(0, len(terms), batch_size)]
    matrix = _normalize_rows(np.vstack(blocks)).astype(np.float32)
    return VectorIndex(encoder.dim, entries, matrix, encoder.fingerprint())


def _rank(index: VectorIndex, query: np.ndarray, mention: str, k: int) -> CandidateSet:
    order, starts, codes = index.layout()
    # row-wise reduction: identical rows get bit-identical scores, which BLAS
    # matrix-vector kernels do not guarantee
    scores = (index.matrix.astype(np.float64) * query).sum(axis=1)
    grouped = scores[order]
    best = np.maximum.reduceat(grouped, starts)
    # first term (in entry order) reaching its code's best score
    seg = np.repeat(np.arange(len(starts)), np.diff(np.append(starts, len(grouped))))
    is_best = grouped == best[seg]
    first = np.full(len(starts), len(grouped))
    np.minimum.at(first, seg[is_best], np.flatnonzero(is_best))
    ranking = np.lexsort((np.arange(len(codes)), -best))[:k]
    cands = tuple(
        Candidate(codes[c], index.entries[order[first[c]]].term, float(best[c]))
        for c in ranking
    )
    return CandidateSet(mention, cands, k)


def _check(index: VectorIndex, encoder: TextEncoder, k: int) -> None:
    if k < 1:
        raise ValueError("k must be >= 1")
    if encoder.fingerprint() != index.built_with:
        raise IndexError_("encoder fingerprint does not match the one the index was built with")


def _queries(encoder: TextEncoder, mentions: Sequence[str]) -> np.ndarray:
    Q = encode_batch(encoder, mentions)
    norms = np.linalg.norm(Q, axis=1, keepdims=True)
    return np.divide(Q, norms, out=np.zeros_like(Q), where=norms > 0)


def retrieve(index: VectorIndex, encoder: TextEncoder, mention: str, k: int) -> CandidateSet:
    """Top-k distinct codes by best cosine similarity of any of their terms.

    Ties are broken by code ascending. Asking for more codes than exist
    returns all of them.
    """
    _check(index, encoder, k)
    return _rank(index, _queries(encoder, [mention])[0], mention, k)


def retrieve_batch(index: VectorIndex, encoder: TextEncoder, mentions: Sequence[str],
                   k: int) -> list[CandidateSet]:
    _check(index, encoder, k)
    if not mentions:
        return []
    Q = _queries(encoder, mentions)
    return [_rank(index, q, m, k) for q, m in zip(Q, mentions)]


def save_index(index: VectorIndex, path: str | Path) -> None:
    parts = [
        _HEADER.pack(INDEX_MAGIC, INDEX_VERSION, index.dim, len(index.entries), index.built_with),
        np.ascontiguousarray(index.matrix, dtype="<f4").tobytes(),
    ]
    for term, code in index.entries:
        for s in (term, code):
            b = s.encode("utf-8")
            parts.append(_LEN.pack(len(b)) + b)
    Path(path).write_bytes(b"".join(parts))


def read_index_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise IndexError_("index file truncated")
    magic, version, dim, rows, fp = _HEADER.unpack(raw)
    if magic != INDEX_MAGIC:
        raise IndexError_(f"bad index magic {magic!r}")
    if version != INDEX_VERSION:
        raise IndexError_(f"unsupported index version {version}")
    return {"dim": dim, "rows": rows, "fingerprint": fp}


def load_index(path: str | Path) -> VectorIndex:
    raw = Path(path).read_bytes()
    head = read_index_header(path)
    dim, rows = head["dim"], head["rows"]
    pos = _HEADER.size
    nbytes = 4 * dim * rows
    if len(raw) < pos + nbytes:
        raise IndexError_("index file truncated")
    matrix = np.frombuffer(raw, dtype="<f4", count=dim * rows, offset=pos)
    matrix = matrix.astype(np.float32).reshape(rows, dim)
    pos += nbytes
    strings = []
    for _ in range(2 * rows):
        if len(raw) < pos + _LEN.size:
            raise IndexError_("index file truncated")
        (n,) = _LEN.unpack_from(raw, pos)
        pos += _LEN.size
        if len(raw) < pos + n:
            raise IndexError_("index file truncated")
        strings.append(raw[pos:pos + n].decode("utf-8"))
        pos += n
    if pos != len(raw):
        raise IndexError_("trailing bytes after index entries")
    entries = [TermRow(strings[i], strings[i + 1]) for i in range(0, len(strings), 2)]
    return VectorIndex(dim, entries, matrix, head["fingerprint"])
