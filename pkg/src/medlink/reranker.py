"""Cross-encoder stage: pair scoring, re-ranking, training and end-to-end linking."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .contrastive import StepRecord, TrainResult
from .encoder import Adam, OptimizerConfig, PairScorer, TextEncoder, ToyCrossEncoder, ToyEncoder
from .index import CandidateSet, VectorIndex, retrieve_batch
from .mining import Triplet


class ScoredCandidate(NamedTuple):
    code: str
    term: str
    bi_score: float
    ce_score: float | None


@dataclass(frozen=True)
class ScoredCandidateSet:
    mention: str
    candidates: tuple[ScoredCandidate, ...]
    provenance: str = "bi"
    k_requested: int = 0

    @property
    def codes(self) -> list[str]:
        return [c.code for c in self.candidates]

    @classmethod
    def from_candidates(cls, cset: CandidateSet) -> ScoredCandidateSet:
        return cls(cset.mention,
                   tuple(ScoredCandidate(c.code, c.term, c.score, None) for c in cset.candidates),
                   "bi", cset.k_requested)


@dataclass(frozen=True)
class Prediction:
    mention: str
    doc_id: str
    gold_code: str | None
    scored: ScoredCandidateSet

    @property
    def codes(self) -> list[str]:
        return self.scored.codes


def score_candidates(scorer: PairScorer, mention: str, candidates: CandidateSet) -> np.ndarray:
    if len(candidates) == 0:
        raise ValueError("no candidates to score")
    scores = np.asarray(scorer.score_pairs([(mention, c.term) for c in candidates.candidates]),
                        dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise FloatingPointError("scorer produced non-finite scores")
    return scores


def rerank(candidates: CandidateSet | ScoredCandidateSet, scores: Sequence[float]) -> ScoredCandidateSet:
    """Sort candidates by score descending; ties keep the incoming order."""
    scores = np.asarray(scores, dtype=np.float64)
    items = candidates.candidates
    if len(scores) != len(items):
        raise ValueError(f"{len(scores)} scores for {len(items)} candidates")
    order = np.argsort(-scores, kind="stable")
    bi = [c.bi_score if isinstance(c, ScoredCandidate) else c.score for c in items]
    out = tuple(ScoredCandidate(items[i].code, items[i].term, bi[i], float(scores[i]))
                for i in order)
    return ScoredCandidateSet(candidates.mention, out, "bi+ce", candidates.k_requested)


def _labeled_pairs(triplets: Sequence[Triplet]) -> tuple[list[tuple[str, str]], np.ndarray]:
    pairs, labels = [], []
    for t in triplets:
        pairs += [(t.anchor, t.positive), (t.anchor, t.negative)]
        labels += [1.0, 0.0]
    return pairs, np.array(labels)


def bce_with_logits(scores: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy of sigmoid(scores); returns (loss, dloss/dscores)."""
    loss = np.logaddexp(0.0, scores) - labels * scores
    prob = 0.5 * (1.0 + np.tanh(0.5 * scores))
    return float(loss.mean()), (prob - labels) / len(scores)


def crossencoder_loss(scorer: ToyCrossEncoder, triplets: Sequence[Triplet]) -> float:
    pairs, labels = _labeled_pairs(triplets)
    return bce_with_logits(scorer.score_pairs(pairs), labels)[0]


def train_crossencoder(init_from: ToyEncoder, triplets: Sequence[Triplet],
                       opt: OptimizerConfig = OptimizerConfig()) -> TrainResult:
    """Fit a pair scorer whose encoder starts as a copy of the bi-encoder.

    Each triplet contributes (anchor, positive) -> 1 and (anchor, negative)
    -> 0; pairs are shuffled per epoch and fitted with BCE on sigmoid(score).
    """
    if not triplets:
        raise ValueError("no training triplets")
    model = ToyCrossEncoder.from_biencoder(init_from)
    pairs, labels = _labeled_pairs(triplets)
    adam = Adam(model.num_parameters, opt)
    rng = np.random.default_rng(opt.seed)
    result = TrainResult(model)
    step = 0
    for _ in range(opt.epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(order), opt.batch_size):
            idx = order[start:start + opt.batch_size]
            scores, state = model.forward([pairs[i] for i in idx])
            value, grad_s = bce_with_logits(scores, labels[idx])
            grad = model.backward(state, grad_s)
            model.set_parameters(adam.step(model.parameters(), grad))
            result.trace.append(StepRecord(step, value, len(idx), 0))
            step += 1
    return result


def rerank_head(candidates: CandidateSet, scorer: PairScorer, depth: int | None = None) -> ScoredCandidateSet:
    """Score and re-rank the first ``depth`` candidates; the tail keeps bi-encoder order.

    ``depth=None`` re-ranks the whole set.
    """
    if depth is None or depth >= len(candidates):
        return rerank(candidates, score_candidates(scorer, candidates.mention, candidates))
    if depth < 1:
        raise ValueError("depth must be >= 1")
    head = CandidateSet(candidates.mention, candidates.candidates[:depth], candidates.k_requested)
    ranked = rerank(head, score_candidates(scorer, candidates.mention, head))
    tail = tuple(ScoredCandidate(c.code, c.term, c.score, None)
                 for c in candidates.candidates[depth:])
    return ScoredCandidateSet(candidates.mention, ranked.candidates + tail, "bi+ce",
                              candidates.k_requested)


def link_end_to_end(encoder: TextEncoder, scorer: PairScorer | None, index: VectorIndex,
                    mentions: Sequence[str], k: int,
                    rerank_depth: int | None = None) -> list[ScoredCandidateSet]:
    """Retrieve k candidates per mention, then (if a scorer is given) re-rank them."""
    out = []
    for cset in retrieve_batch(index, encoder, list(mentions), k):
        if scorer is None or len(cset) == 0:
            out.append(ScoredCandidateSet.from_candidates(cset))
        else:
            out.append(rerank_head(cset, scorer, rerank_depth))
    return out


def _prediction_obj(p: Prediction) -> dict:
    return {
        "mention": p.mention,
        "doc_id": p.doc_id,
        "gold_code": p.gold_code,
        "provenance": p.scored.provenance,
        "k_requested": p.scored.k_requested,
        "candidates": [
            {"code": c.code, "term": c.term, "bi_score": c.bi_score, "ce_score": c.ce_score,
             "rank": r}
            for r, c in enumerate(p.scored.candidates, start=1)
        ],
    }


def write_predictions(predictions: Iterable[Prediction], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in predictions:
            fh.write(json.dumps(_prediction_obj(p), ensure_ascii=False) + "\n")


def read_predictions(path: str | Path) -> list[Prediction]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            cands = sorted(obj["candidates"], key=lambda c: c["rank"])
            scored = ScoredCandidateSet(
                obj["mention"],
                tuple(ScoredCandidate(c["code"], c["term"], c["bi_score"], c.get("ce_score"))
                      for c in cands),
                obj.get("provenance", "bi"),
                obj.get("k_requested", len(cands)),
            )
            out.append(Prediction(obj["mention"], obj.get("doc_id", ""), obj.get("gold_code"),
                                  scored))
    return out


def candidates_to_predictions(records, csets: Sequence[CandidateSet | ScoredCandidateSet]):
    """Pair mention records with their (scored) candidate sets."""
    out = []
    for r, c in zip(records, csets):
        scored = c if isinstance(c, ScoredCandidateSet) else ScoredCandidateSet.from_candidates(c)
        out.append(Prediction(r.text, r.doc_id, r.code, scored))
    return out
