"""Top-k accuracy reports over linked predictions."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

DEFAULT_KS = (1, 5, 25, 50, 100)


@dataclass(frozen=True)
class EvalReport:
    split: str
    ks: tuple[int, ...]
    accuracy: dict[int, float]
    n_mentions: int
    n_missing_gold: int = 0
    n_gold_not_in_kb: int | None = None
    correct: dict[int, int] = field(default_factory=dict, compare=False)

    def to_json(self) -> dict:
        obj = {
            "split": self.split,
            "ks": list(self.ks),
            "accuracy": {str(k): round(self.accuracy[k], 4) for k in self.ks},
            "n_mentions": self.n_mentions,
            "n_missing_gold": self.n_missing_gold,
        }
        if self.n_gold_not_in_kb is not None:
            obj["n_gold_not_in_kb"] = self.n_gold_not_in_kb
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> EvalReport:
        ks = tuple(int(k) for k in obj["ks"])
        return cls(obj["split"], ks, {int(k): float(v) for k, v in obj["accuracy"].items()},
                   int(obj["n_mentions"]), int(obj.get("n_missing_gold", 0)),
                   obj.get("n_gold_not_in_kb"))


def gold_rank(codes: Sequence[str], gold: str) -> int | None:
    """1-based rank of ``gold`` among ``codes``; None when absent."""
    try:
        return list(codes).index(gold) + 1
    except ValueError:
        return None


def topk_accuracy(predictions: Iterable, ks: Sequence[int] = DEFAULT_KS, split: str = "gold",
                  known_codes: Iterable[str] | None = None) -> EvalReport:
    """Fraction of mentions whose gold code is among their first k candidate codes.

    ``predictions`` yields objects with ``gold_code`` and ``codes`` (e.g.
    ``reranker.Prediction``) or ``(codes, gold_code)`` tuples. Records with
    no gold code are excluded and counted; gold codes unknown to the KB stay
    in the denominator and are counted when ``known_codes`` is given.
    """
    ks = tuple(ks)
    if not ks or min(ks) < 1:
        raise ValueError("ks must be non-empty positive integers")
    kb = set(known_codes) if known_codes is not None else None
    correct = {k: 0 for k in ks}
    n = missing = not_in_kb = 0
    for p in predictions:
        codes, gold = p if isinstance(p, tuple) else (p.codes, p.gold_code)
        if not gold:
            missing += 1
            continue
        n += 1
        if kb is not None and gold not in kb:
            not_in_kb += 1
        rank = gold_rank(codes, gold)
        if rank is not None:
            for k in ks:
                if rank <= k:
                    correct[k] += 1
    accuracy = {k: (correct[k] / n if n else 0.0) for k in ks}
    return EvalReport(split, ks, accuracy, n, missing, not_in_kb if kb is not None else None,
                      correct)


def compare_reports(a: EvalReport, b: EvalReport) -> dict[int, float]:
    """Per-k absolute difference ``b - a``."""
    if tuple(a.ks) != tuple(b.ks):
        raise ValueError(f"reports use different ks: {a.ks} vs {b.ks}")
    return {k: b.accuracy[k] - a.accuracy[k] for k in a.ks}


def write_report(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")


def read_report(path: str | Path) -> EvalReport:
    return EvalReport.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def format_table(reports: Sequence[EvalReport], labels: Sequence[str] | None = None) -> str:
    """Plain-text accuracy table, one row per report."""
    labels = labels or [r.split for r in reports]
    ks = reports[0].ks
    width = max(len(x) for x in labels) + 2
    lines = ["".ljust(width) + "".join(f"@{k}".rjust(8) for k in ks)]
    for label, r in zip(labels, reports):
        lines.append(label.ljust(width) + "".join(f"{r.accuracy[k]:8.3f}" for k in ks))
    return "\n".join(lines)
