"""Text encoders, pair scorers, optimizer and checkpoint I/O.

The trainable reference model is a hashed character n-gram embedding bag:

    h = mean(E[ngram ids])      (H,)
    z = tanh(h) @ W + b         (D,)

Parameters live on the float32 grid (so checkpoints round-trip bit-exactly)
while all arithmetic runs in float64.
"""

from __future__ import annotations

import copy
import hashlib
import struct
import zlib
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
import scipy.sparse as sp

DEFAULT_VOCAB = 2**15
DEFAULT_HIDDEN = 64
DEFAULT_DIM = 64
MAX_INPUT_LENGTH = 256
PAIR_SEPARATOR = " [SEP] "

CHECKPOINT_MAGIC = b"CLK1"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sHBIQ")
KIND_TOY_ENCODER = 0
KIND_TOY_CROSS_ENCODER = 1


class CheckpointError(ValueError):
    pass


class TextEncoder(Protocol):
    dim: int
    max_input_length: int

    def encode(self, texts: Sequence[str]) -> np.ndarray: ...

    def parameters(self) -> np.ndarray: ...

    def fingerprint(self) -> bytes: ...


class PairScorer(Protocol):
    def score_pairs(self, pairs: Sequence[tuple[str, str]]) -> np.ndarray: ...

    def parameters(self) -> np.ndarray: ...


@dataclass
class OptimizerConfig:
    learning_rate: float = 2e-5
    batch_size: int = 256
    epochs: int = 1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


class Adam:
    """Adam over a flat parameter vector."""

    def __init__(self, size: int, config: OptimizerConfig):
        self.config = config
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        c = self.config
        self.t += 1
        self.m *= c.beta1
        self.m += (1 - c.beta1) * grad
        self.v *= c.beta2
        self.v += (1 - c.beta2) * grad * grad
        m_hat = self.m / (1 - c.beta1**self.t)
        v_hat = self.v / (1 - c.beta2**self.t)
        return params - c.learning_rate * m_hat / (np.sqrt(v_hat) + c.eps)


def truncate(text: str, max_input_length: int = MAX_INPUT_LENGTH) -> str:
    return text[:max_input_length]


def _hash(token: str, vocab_size: int) -> int:
    return zlib.crc32(token.encode("utf-8")) % vocab_size


def _grams(text: str, orders: tuple[int, ...]) -> list[str]:
    padded = f"\x02{text}\x03"
    out = []
    for n in orders:
        if len(padded) < n:
            out.append(f"{n}:{padded}")
        else:
            out.extend(f"{n}:{padded[i:i + n]}" for i in range(len(padded) - n + 1))
    return out


@lru_cache(maxsize=500_000)
def ngram_ids(text: str, vocab_size: int, orders: tuple[int, ...]) -> tuple[int, ...]:
    """Hashed n-gram ids of an (already truncated) text; empty text has none."""
    if not text:
        return ()
    return tuple(_hash(g, vocab_size) for g in _grams(text, orders))


@lru_cache(maxsize=500_000)
def pair_ngram_ids(text: str, vocab_size: int, orders: tuple[int, ...]) -> tuple[int, ...]:
    """Ids for a ``left [SEP] right`` pair text.

    Both sides contribute their ordinary n-gram ids. Every n-gram occurring
    on both sides additionally emits a hashed match token, which is the
    scorer's only channel for reading the two segments jointly.
    """
    left, sep, right = text.partition(PAIR_SEPARATOR)
    if not sep:
        return ngram_ids(text, vocab_size, orders)
    ids = list(ngram_ids(left, vocab_size, orders)) + list(ngram_ids(right, vocab_size, orders))
    if left and right:
        shared = set(_grams(left, orders)) & set(_grams(right, orders))
        ids.extend(_hash("match:" + g, vocab_size) for g in sorted(shared))
    return tuple(ids)


def _to_f32_grid(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32).astype(np.float64)


@dataclass
class _ForwardCache:
    bag: sp.csr_matrix
    activations: np.ndarray
    empty: np.ndarray


class ToyEncoder:
    """Trainable hashed character n-gram encoder (the desk-scale backbone)."""

    kind = KIND_TOY_ENCODER

    def __init__(self, dim: int = DEFAULT_DIM, vocab_size: int = DEFAULT_VOCAB,
                 hidden_dim: int = DEFAULT_HIDDEN, ngram_orders: Sequence[int] = (3,),
                 max_input_length: int = MAX_INPUT_LENGTH, seed: int = 0):
        if min(dim, vocab_size, hidden_dim, max_input_length) < 1:
            raise ValueError("encoder sizes must be positive")
        self.dim = dim
        self.vocab_size = vocab_size
        self.hidden_dim = hidden_dim
        self.ngram_orders = tuple(ngram_orders)
        self.max_input_length = max_input_length
        rng = np.random.default_rng(seed)
        self._flat = np.empty(self.num_parameters)
        self._bind_views()
        self.embeddings[:] = rng.normal(0.0, 1.0, size=self.embeddings.shape)
        self.projection[:] = rng.normal(0.0, hidden_dim**-0.5, size=self.projection.shape)
        self.bias[:] = rng.normal(0.0, 0.01, size=self.bias.shape)
        self._flat[:] = _to_f32_grid(self._flat)
        self._fingerprint: bytes | None = None

    @property
    def num_parameters(self) -> int:
        return self.vocab_size * self.hidden_dim + self.hidden_dim * self.dim + self.dim

    def _bind_views(self) -> None:
        v, h, d = self.vocab_size, self.hidden_dim, self.dim
        self.embeddings = self._flat[: v * h].reshape(v, h)
        self.projection = self._flat[v * h: v * h + h * d].reshape(h, d)
        self.bias = self._flat[v * h + h * d:]

    def __deepcopy__(self, memo):
        clone = copy.copy(self)
        clone._flat = self._flat.copy()
        clone._bind_views()
        return clone

    def parameters(self) -> np.ndarray:
        return self._flat.copy()

    def set_parameters(self, flat: np.ndarray, exact: bool = False) -> None:
        """Overwrite parameters; values are snapped to float32 unless ``exact``."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != self._flat.shape:
            raise ValueError(f"expected {self._flat.size} parameters, got {flat.size}")
        self._flat[:] = flat if exact else _to_f32_grid(flat)
        self._fingerprint = None

    def fingerprint(self) -> bytes:
        if self._fingerprint is None:
            self._fingerprint = hashlib.sha256(checkpoint_bytes(self)).digest()
        return self._fingerprint

    def bag_of_ngrams(self, texts: Sequence[str],
                      pairs: bool = False) -> tuple[sp.csr_matrix, np.ndarray]:
        """Row-normalized n-gram count matrix (n, V) and an empty-input mask."""
        tokenize = pair_ngram_ids if pairs else ngram_ids
        indptr = [0]
        indices: list[int] = []
        data: list[float] = []
        empty = np.zeros(len(texts), dtype=bool)
        for i, text in enumerate(texts):
            ids = tokenize(truncate(text, self.max_input_length), self.vocab_size,
                           self.ngram_orders)
            if not ids:
                empty[i] = True
            else:
                uniq, counts = np.unique(ids, return_counts=True)
                indices.extend(uniq.tolist())
                data.extend((counts / len(ids)).tolist())
            indptr.append(len(indices))
        bag = sp.csr_matrix((data, indices, indptr), shape=(len(texts), self.vocab_size))
        return bag, empty

    def forward(self, texts: Sequence[str],
                pairs: bool = False) -> tuple[np.ndarray, _ForwardCache]:
        bag, empty = self.bag_of_ngrams(texts, pairs)
        acts = np.tanh(bag @ self.embeddings)
        # einsum keeps each output row's reduction order independent of batch size
        z = np.einsum("ih,hd->id", acts, self.projection) + self.bias
        return z, _ForwardCache(bag, acts, empty)

    def backward(self, cache: _ForwardCache, grad_z: np.ndarray) -> np.ndarray:
        """Flat parameter gradient given dLoss/dz."""
        grad = np.zeros_like(self._flat)
        v, h, d = self.vocab_size, self.hidden_dim, self.dim
        grad[v * h: v * h + h * d] = (cache.activations.T @ grad_z).ravel()
        grad[v * h + h * d:] = grad_z.sum(axis=0)
        grad_h = (grad_z @ self.projection.T) * (1.0 - cache.activations**2)
        grad[: v * h] = np.asarray(cache.bag.T @ grad_h).ravel()
        return grad

    def encode(self, texts: Sequence[str]) -> np.ndarray:
        return self.forward(texts)[0]

    def active_parameter_indices(self, texts: Sequence[str]) -> np.ndarray:
        """Indices of parameters the given texts actually touch."""
        v, h, d = self.vocab_size, self.hidden_dim, self.dim
        bag, _ = self.bag_of_ngrams(texts)
        rows = np.unique(bag.indices)
        emb = (rows[:, None] * h + np.arange(h)).ravel()
        return np.concatenate([emb, np.arange(v * h, self.num_parameters)])


class FixedTableEncoder:
    """Read-only encoder backed by precomputed embeddings (external models).

    Lookup is by exact (truncated) string; unknown strings raise ``KeyError``.
    """

    kind = None

    def __init__(self, terms: Sequence[str], vectors: np.ndarray,
                 max_input_length: int = MAX_INPUT_LENGTH):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(terms):
            raise ValueError("vectors must be (len(terms), dim)")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("vectors must be finite")
        self.max_input_length = max_input_length
        self.dim = vectors.shape[1]
        self._vectors = vectors
        self._row = {truncate(t, max_input_length): i for i, t in enumerate(terms)}
        digest = hashlib.sha256(vectors.astype("<f4").tobytes())
        for t in terms:
            digest.update(t.encode("utf-8") + b"\x00")
        self._fingerprint = digest.digest()

    @classmethod
    def from_files(cls, terms_path: str | Path, vectors_path: str | Path) -> FixedTableEncoder:
        terms = Path(terms_path).read_text(encoding="utf-8").splitlines()
        return cls(terms, np.load(vectors_path))

    def encode(self, texts: Sequence[str]) -> np.ndarray:
        rows = [self._row[truncate(t, self.max_input_length)] for t in texts]
        return self._vectors[rows].copy() if rows else np.zeros((0, self.dim))

    def parameters(self) -> np.ndarray:
        return self._vectors.ravel().copy()

    def fingerprint(self) -> bytes:
        return self._fingerprint


class ToyCrossEncoder:
    """Pair scorer: ``ToyEncoder(mention + " [SEP] " + term) @ w + c``.

    The shared encoder has the same layout as the bi-encoder so its weights
    can be copied over; the scalar head starts at zero.
    """

    kind = KIND_TOY_CROSS_ENCODER

    def __init__(self, encoder: ToyEncoder):
        self.encoder = encoder
        self.head = np.zeros(encoder.dim + 1)

    @classmethod
    def from_biencoder(cls, biencoder: ToyEncoder) -> ToyCrossEncoder:
        return cls(copy.deepcopy(biencoder))

    def __deepcopy__(self, memo):
        clone = ToyCrossEncoder(copy.deepcopy(self.encoder))
        clone.head = self.head.copy()
        return clone

    @property
    def dim(self) -> int:
        return self.encoder.dim

    @property
    def num_parameters(self) -> int:
        return self.encoder.num_parameters + self.head.size

    def parameters(self) -> np.ndarray:
        return np.concatenate([self.encoder.parameters(), self.head])

    def set_parameters(self, flat: np.ndarray, exact: bool = False) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.num_parameters:
            raise ValueError(f"expected {self.num_parameters} parameters, got {flat.size}")
        n = self.encoder.num_parameters
        self.encoder.set_parameters(flat[:n], exact=exact)
        self.head = flat[n:].copy() if exact else _to_f32_grid(flat[n:])

    def fingerprint(self) -> bytes:
        return hashlib.sha256(checkpoint_bytes(self)).digest()

    def pair_texts(self, pairs: Sequence[tuple[str, str]]) -> list[str]:
        m = self.encoder.max_input_length
        return [truncate(a + PAIR_SEPARATOR + b, m) for a, b in pairs]

    def forward(self, pairs: Sequence[tuple[str, str]]):
        z, cache = self.encoder.forward(self.pair_texts(pairs), pairs=True)
        scores = np.einsum("id,d->i", z, self.head[:-1]) + self.head[-1]
        return scores, (z, cache)

    def backward(self, state, grad_scores: np.ndarray) -> np.ndarray:
        z, cache = state
        grad_z = np.outer(grad_scores, self.head[:-1])
        head_grad = np.concatenate([z.T @ grad_scores, [grad_scores.sum()]])
        return np.concatenate([self.encoder.backward(cache, grad_z), head_grad])

    def score_pairs(self, pairs: Sequence[tuple[str, str]]) -> np.ndarray:
        if not pairs:
            return np.zeros(0)
        return self.forward(pairs)[0]


def encode_batch(encoder: TextEncoder, texts: Sequence[str],
                 return_empty_mask: bool = False):
    """Encode ``texts`` into an (n, D) matrix.

    Empty strings map to the encoder's reserved empty-input vector (for the
    toy encoder: the learned bias); ``return_empty_mask`` flags those rows.
    """
    texts = list(texts)
    if not texts:
        raise ValueError("texts must be non-empty")
    out = np.asarray(encoder.encode(texts), dtype=np.float64)
    if out.shape != (len(texts), encoder.dim) or not np.all(np.isfinite(out)):
        raise ValueError("encoder produced a malformed embedding matrix")
    if return_empty_mask:
        return out, np.array([t == "" for t in texts])
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - f| / max(|a|, |f|, floor); the floor absorbs finite-difference roundoff."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def gradient_check(encoder: ToyEncoder,
                   loss: Callable[[np.ndarray], tuple[float, np.ndarray]],
                   texts: Sequence[str], probe_count: int = 20, seed: int = 0,
                   step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss`` maps an embedding matrix to ``(value, dvalue/dembeddings)``.
    Probed coordinates are drawn from the parameters ``texts`` touch.
    """
    if probe_count < 1:
        raise ValueError("probe_count must be >= 1")
    model = copy.deepcopy(encoder)
    base = model.parameters()
    z, cache = model.forward(texts)
    value, grad_z = loss(z)
    if not np.isfinite(value):
        raise FloatingPointError("loss is not finite")
    analytic = model.backward(cache, np.asarray(grad_z, dtype=np.float64))
    rng = np.random.default_rng(seed)
    active = model.active_parameter_indices(texts)
    probes = rng.choice(active, size=min(probe_count, active.size), replace=False)
    numeric = np.empty(probes.size)
    for j, idx in enumerate(probes):
        vals = []
        for sign in (1.0, -1.0):
            shifted = base.copy()
            shifted[idx] += sign * step
            model.set_parameters(shifted, exact=True)
            v, _ = loss(model.encode(texts))
            if not np.isfinite(v):
                raise FloatingPointError("loss is not finite")
            vals.append(v)
        numeric[j] = (vals[0] - vals[1]) / (2 * step)
    return float(relative_error(analytic[probes], numeric).max())


def checkpoint_bytes(model) -> bytes:
    params = model.parameters()
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, model.kind, model.dim,
                          params.size)
    return header + params.astype("<f4").tobytes()


def save_checkpoint(model, path: str | Path) -> None:
    if getattr(model, "kind", None) is None:
        raise CheckpointError(f"{type(model).__name__} cannot be checkpointed")
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path: str | Path, vocab_size: int = DEFAULT_VOCAB,
                    ngram_orders: Sequence[int] = (3,),
                    max_input_length: int = MAX_INPUT_LENGTH,
                    expected_dim: int | None = None):
    """Rebuild a toy model from a checkpoint.

    The header carries only the output dim and parameter count, so the
    vocabulary size must be supplied; the hidden width is solved from it.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError("checkpoint truncated")
    magic, version, kind, dim, count = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if expected_dim is not None and dim != expected_dim:
        raise CheckpointError(f"checkpoint dim {dim} != expected {expected_dim}")
    if len(raw) != _HEADER.size + 4 * count:
        raise CheckpointError("checkpoint size does not match its parameter count")
    head = {KIND_TOY_ENCODER: 0, KIND_TOY_CROSS_ENCODER: dim + 1}.get(kind)
    if head is None:
        raise CheckpointError(f"unknown model kind {kind}")
    hidden, rest = divmod(count - head - dim, vocab_size + dim)
    if rest or hidden < 1:
        raise CheckpointError(
            f"parameter count {count} inconsistent with dim {dim} and vocab {vocab_size}")
    params = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).astype(np.float64)
    encoder = ToyEncoder(dim=dim, vocab_size=vocab_size, hidden_dim=hidden,
                         ngram_orders=ngram_orders, max_input_length=max_input_length)
    if kind == KIND_TOY_ENCODER:
        encoder.set_parameters(params)
        return encoder
    model = ToyCrossEncoder(encoder)
    model.set_parameters(params)
    return model
