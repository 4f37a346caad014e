"""Contrastive objectives and the bi-encoder training loop."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import Adam, OptimizerConfig, ToyEncoder
from .mining import PairExample, Triplet

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MSLossConfig:
    alpha: float = 2.0
    beta: float = 50.0
    base: float = 0.5
    mining_margin: float = 0.2

    def __post_init__(self) -> None:
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("alpha and beta must be positive")
        if not 0 <= self.mining_margin < 1:
            raise ValueError("mining_margin must be in [0, 1)")


@dataclass(frozen=True)
class MinedTripletSet:
    triplets: np.ndarray  # (m, 3) int: anchor, positive, negative

    def __len__(self) -> int:
        return len(self.triplets)

    def as_set(self) -> set[tuple[int, int, int]]:
        return {tuple(t) for t in self.triplets.tolist()}


@dataclass
class StepRecord:
    step: int
    loss: float
    mined_triplets: int
    batch_groups: int


@dataclass
class TrainResult:
    model: object
    trace: list[StepRecord] = field(default_factory=list)
    skipped_batches: int = 0


def _group_ids(groups: Sequence) -> np.ndarray:
    _, inverse = np.unique(np.asarray(groups, dtype=object).astype(str), return_inverse=True)
    return inverse


def cosine_similarity_matrix(E: np.ndarray) -> np.ndarray:
    E = np.asarray(E, dtype=np.float64)
    norms = np.linalg.norm(E, axis=1)
    if np.any(norms == 0):
        raise ValueError("cosine similarity undefined for zero rows")
    N = E / norms[:, None]
    S = N @ N.T
    S = 0.5 * (S + S.T)
    np.fill_diagonal(S, 1.0)
    return S


def mine_hard_triplets(S: np.ndarray, groups: Sequence, margin: float = 0.2) -> MinedTripletSet:
    """All (a, p, n) with S[a, n] > S[a, p] - margin, ordered lexicographically."""
    S = np.asarray(S, dtype=np.float64)
    g = _group_ids(groups)
    n = len(g)
    idx = np.arange(n)
    out = []
    for a in range(n):
        pos = idx[(g == g[a]) & (idx != a)]
        neg = idx[g != g[a]]
        if pos.size == 0 or neg.size == 0:
            continue
        hit = S[a, neg][None, :] > (S[a, pos] - margin)[:, None]
        pi, ni = np.nonzero(hit)
        out.append(np.column_stack([np.full(pi.size, a), pos[pi], neg[ni]]))
    triplets = np.concatenate(out) if out else np.zeros((0, 3), dtype=int)
    return MinedTripletSet(triplets.astype(int))


def count_hard_triplets(S: np.ndarray, groups: Sequence, margin: float = 0.2) -> int:
    """``len(mine_hard_triplets(...))`` without materializing the triplets."""
    g = _group_ids(groups)
    idx = np.arange(len(g))
    total = 0
    for a in range(len(g)):
        neg = np.sort(S[a, g != g[a]])
        pos = S[a, (g == g[a]) & (idx != a)]
        if neg.size and pos.size:
            total += int((neg.size - np.searchsorted(neg, pos - margin, side="right")).sum())
    return total


def mine_pairs(S: np.ndarray, groups: Sequence, margin: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Positive / negative pair masks of the pairs occurring in some hard triplet.

    A positive (a, p) survives if S[a, p] - margin < max negative similarity
    of a; a negative (a, n) survives if S[a, n] > min positive similarity of
    a minus margin.
    """
    S = np.asarray(S, dtype=np.float64)
    g = _group_ids(groups)
    same = g[:, None] == g[None, :]
    np.fill_diagonal(same, False)
    diff = g[:, None] != g[None, :]
    thresh = S - margin
    max_neg = np.where(diff, S, -np.inf).max(axis=1)
    min_pos_thresh = np.where(same, thresh, np.inf).min(axis=1)
    pos_mask = same & (max_neg[:, None] > thresh)
    neg_mask = diff & (S > min_pos_thresh[:, None])
    return pos_mask, neg_mask


def _log1p_sum_exp(x: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise log(1 + sum_{mask} e^x) and its gradient w.r.t. x."""
    x = np.where(mask, x, -np.inf)
    top = np.maximum(x.max(axis=1, initial=-np.inf), 0.0)
    ex = np.exp(x - top[:, None])
    denom = np.exp(-top) + ex.sum(axis=1)
    value = top + np.log(denom)
    return value, ex / denom[:, None]


def multi_similarity_loss(S: np.ndarray, groups: Sequence,
                          config: MSLossConfig = MSLossConfig()) -> tuple[float, np.ndarray]:
    """Multi-similarity loss over mined pairs, and its gradient w.r.t. ``S``.

    Per anchor i:
        (1/alpha) log(1 + sum_P exp(-alpha (S_ip - base)))
      + (1/beta)  log(1 + sum_N exp( beta (S_in - base)))
    averaged over anchors owning at least one mined pair.
    """
    S = np.asarray(S, dtype=np.float64)
    pos_mask, neg_mask = mine_pairs(S, groups, config.mining_margin)
    active = pos_mask.any(axis=1) | neg_mask.any(axis=1)
    n_active = int(active.sum())
    if n_active == 0:
        return 0.0, np.zeros_like(S)
    a, b, lam = config.alpha, config.beta, config.base
    pos_val, pos_w = _log1p_sum_exp(-a * (S - lam), pos_mask)
    neg_val, neg_w = _log1p_sum_exp(b * (S - lam), neg_mask)
    loss = (pos_val / a + neg_val / b)[active].sum() / n_active
    grad = (neg_w - pos_w) / n_active
    return float(loss), grad


def _normalize_backward(E: np.ndarray, grad_n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(E, axis=1, keepdims=True)
    N = E / norms
    grad_e = (grad_n - N * (grad_n * N).sum(axis=1, keepdims=True)) / norms
    return N, grad_e


def ms_loss_on_embeddings(E: np.ndarray, groups: Sequence,
                          config: MSLossConfig = MSLossConfig()) -> tuple[float, np.ndarray]:
    """Multi-similarity loss of raw embeddings (cosine regime) with dLoss/dE."""
    S = cosine_similarity_matrix(E)
    loss, grad_s = multi_similarity_loss(S, groups, config)
    N = E / np.linalg.norm(E, axis=1, keepdims=True)
    grad_n = (grad_s + grad_s.T) @ N
    return loss, _normalize_backward(E, grad_n)[1]


def triplet_margin_loss(E_a: np.ndarray, E_p: np.ndarray, E_n: np.ndarray,
                        margin: float = 5.0):
    """mean(max(0, d(a,p) - d(a,n) + margin)), d euclidean on L2-normalized rows.

    Returns ``(loss, (grad_a, grad_p, grad_n))`` w.r.t. the raw rows.
    """
    E_a, E_p, E_n = (np.asarray(x, dtype=np.float64) for x in (E_a, E_p, E_n))
    if not E_a.shape == E_p.shape == E_n.shape:
        raise ValueError("anchor/positive/negative row sets must match in shape")
    m = len(E_a)
    if m == 0:
        z = np.zeros_like(E_a)
        return 0.0, (z, z.copy(), z.copy())
    A, P, Nn = (x / np.linalg.norm(x, axis=1, keepdims=True) for x in (E_a, E_p, E_n))
    d_ap = np.linalg.norm(A - P, axis=1)
    d_an = np.linalg.norm(A - Nn, axis=1)
    hinge = d_ap - d_an + margin
    live = (hinge > 0).astype(np.float64) / m
    # subgradient 0 where a distance vanishes
    u_ap = np.divide(A - P, d_ap[:, None], out=np.zeros_like(A), where=d_ap[:, None] > 0)
    u_an = np.divide(A - Nn, d_an[:, None], out=np.zeros_like(A), where=d_an[:, None] > 0)
    g_A = live[:, None] * (u_ap - u_an)
    g_P = -live[:, None] * u_ap
    g_N = live[:, None] * u_an
    loss = float(np.maximum(hinge, 0.0).mean())
    return loss, (_normalize_backward(E_a, g_A)[1], _normalize_backward(E_p, g_P)[1],
                  _normalize_backward(E_n, g_N)[1])


def assemble_batches(pairs: Sequence[PairExample], batch_size: int,
                     rng: np.random.Generator) -> list[list[PairExample]]:
    """Shuffle, then deal pairs round-robin across groups before chunking.

    Interleaving spreads each group's pairs over consecutive batches so a
    batch holds as many distinct groups as the data allows.
    """
    by_group: dict[str, list[PairExample]] = {}
    for i in rng.permutation(len(pairs)):
        by_group.setdefault(pairs[i].group, []).append(pairs[i])
    queues = list(by_group.values())
    ordered: list[PairExample] = []
    depth = 0
    while len(ordered) < len(pairs):
        ordered.extend(q[depth] for q in queues if depth < len(q))
        depth += 1
    return [ordered[i:i + batch_size] for i in range(0, len(ordered), batch_size)]


def _batch_loss_and_grad(encoder: ToyEncoder, batch: Sequence[PairExample],
                         config: MSLossConfig):
    texts = [p.anchor for p in batch] + [p.positive for p in batch]
    groups = [p.group for p in batch] * 2
    z, cache = encoder.forward(texts)
    loss, grad_z = ms_loss_on_embeddings(z, groups, config)
    S = cosine_similarity_matrix(z)
    mined = count_hard_triplets(S, groups, config.mining_margin)
    return loss, grad_z, cache, mined


def epoch_batches(pairs: Sequence[PairExample], opt: OptimizerConfig) -> list[list[list[PairExample]]]:
    """The batches every epoch of ``train_biencoder`` will see, in order."""
    rng = np.random.default_rng(opt.seed)
    return [assemble_batches(pairs, opt.batch_size, rng) for _ in range(opt.epochs)]


def mean_batch_loss(encoder: ToyEncoder, batches: Sequence[Sequence[PairExample]],
                    config: MSLossConfig = MSLossConfig()) -> float:
    """Mean multi-similarity loss over usable batches, without updating."""
    losses = [_batch_loss_and_grad(encoder, b, config)[0]
              for b in batches if len({p.group for p in b}) >= 2]
    return float(np.mean(losses)) if losses else 0.0


def train_biencoder(encoder: ToyEncoder, pairs: Sequence[PairExample],
                    opt: OptimizerConfig = OptimizerConfig(),
                    loss: MSLossConfig = MSLossConfig()) -> TrainResult:
    """Train a copy of ``encoder`` on anchor/positive pairs with in-batch negatives.

    Each batch encodes anchors and positives separately and stacks them
    (2n rows, group labels duplicated). Batches covering one group only are
    skipped and counted.
    """
    if not pairs:
        raise ValueError("no training pairs")
    model = copy.deepcopy(encoder)
    adam = Adam(model.num_parameters, opt)
    result = TrainResult(model)
    step = 0
    for batches in epoch_batches(pairs, opt):
        for batch in batches:
            n_groups = len({p.group for p in batch})
            if n_groups < 2:
                result.skipped_batches += 1
                continue
            value, grad_z, cache, mined = _batch_loss_and_grad(model, batch, loss)
            grad = model.backward(cache, grad_z)
            model.set_parameters(adam.step(model.parameters(), grad))
            result.trace.append(StepRecord(step, value, mined, n_groups))
            step += 1
    if result.skipped_batches:
        logger.warning("skipped %d single-group batches", result.skipped_batches)
    return result


def train_biencoder_triplets(encoder: ToyEncoder, triplets: Sequence[Triplet],
                             opt: OptimizerConfig = OptimizerConfig(),
                             margin: float = 5.0) -> TrainResult:
    """Triplet-margin training (the corpus-specific bi-encoder variant)."""
    if not triplets:
        raise ValueError("no training triplets")
    model = copy.deepcopy(encoder)
    adam = Adam(model.num_parameters, opt)
    result = TrainResult(model)
    rng = np.random.default_rng(opt.seed)
    step = 0
    for _ in range(opt.epochs):
        order = rng.permutation(len(triplets))
        for start in range(0, len(order), opt.batch_size):
            batch = [triplets[i] for i in order[start:start + opt.batch_size]]
            m = len(batch)
            texts = ([t.anchor for t in batch] + [t.positive for t in batch]
                     + [t.negative for t in batch])
            z, cache = model.forward(texts)
            value, (ga, gp, gn) = triplet_margin_loss(z[:m], z[m:2 * m], z[2 * m:], margin)
            grad = model.backward(cache, np.vstack([ga, gp, gn]))
            model.set_parameters(adam.step(model.parameters(), grad))
            result.trace.append(StepRecord(step, value, m, 0))
            step += 1
    return result


def write_loss_trace(trace: Sequence[StepRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss", "mined_triplets", "batch_groups"])
        for r in trace:
            writer.writerow([r.step, repr(float(r.loss)), r.mined_triplets, r.batch_groups])
