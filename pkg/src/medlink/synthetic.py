"""Seeded synthetic terminology + corpus for desk-scale end-to-end runs.

Every code owns a few pseudo-word stems. A surface variant joins one or
two of those stems with generic clinical filler words shared by all
codes, so raw character overlap is a noisy signal until an encoder learns
which n-grams carry identity.

Per code: variant 0 is the preferred term, variants 1..n-2 are synonyms,
and the last variant is held out as the test mention. Training mentions
are extra variants for a subset of the codes; the remaining codes make up
the unseen-codes test subset.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

from .corpus import MentionRecord, write_annotations
from .terminology import GazetteerRow, GAZETTEER_HEADER

ONSETS = ["b", "c", "d", "f", "g", "l", "m", "n", "p", "r", "s", "t", "v", "z",
          "br", "cr", "tr", "pl", "gl", "ch", "qu"]
NUCLEI = ["a", "e", "i", "o", "u", "ia", "io", "ue"]
CODAS = ["", "", "n", "s", "r", "l"]
FILLER = [
    "enfermedad", "síndrome", "trastorno", "crónica", "aguda", "grave", "leve",
    "primaria", "secundaria", "izquierda", "derecha", "bilateral", "progresiva",
    "congénita", "recurrente", "localizada", "generalizada", "del", "con", "sin",
    "tipo", "lesión", "dolor", "infección", "inflamación", "no especificada",
]


@dataclass
class SyntheticDataset:
    gazetteer: list[GazetteerRow]
    train: list[MentionRecord]
    test: list[MentionRecord]

    def write(self, directory: str | Path) -> dict[str, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {
            "gazetteer": directory / "gazetteer.tsv",
            "train": directory / "train.tsv",
            "test": directory / "test.tsv",
        }
        with open(paths["gazetteer"], "w", encoding="utf-8", newline="") as fh:
            fh.write("\t".join(GAZETTEER_HEADER) + "\n")
            for r in self.gazetteer:
                fh.write(f"{r.code}\t{r.term}\t{r.semantic_tag}\t{int(r.is_preferred)}"
                         f"\t{int(r.is_obsolete)}\n")
        write_annotations(self.train, paths["train"])
        write_annotations(self.test, paths["test"])
        return paths


def _stem(rng: np.random.Generator) -> str:
    n = int(rng.integers(2, 4))
    return "".join(ONSETS[rng.integers(len(ONSETS))] + NUCLEI[rng.integers(len(NUCLEI))]
                   + CODAS[rng.integers(len(CODAS))] for _ in range(n))


def _variant(stems: tuple[str, ...], rng: np.random.Generator, n_filler: int) -> str:
    words = list(stems) + list(rng.choice(FILLER, size=n_filler, replace=False))
    rng.shuffle(words)
    return " ".join(words)


def generate(seed: int = 13, n_codes: int = 200, n_variants: int = 5, stems_per_code: int = 3,
             filler_per_variant: int = 3, n_train_codes: int = 150,
             train_mentions_per_code: int = 2, obsolete_fraction: float = 0.0) -> SyntheticDataset:
    rng = np.random.default_rng(seed)
    used: set[str] = set()
    stem_sets = []
    for _ in range(n_codes):
        stems = []
        while len(stems) < stems_per_code:
            s = _stem(rng)
            if s not in used:
                used.add(s)
                stems.append(s)
        stem_sets.append(stems)

    combos = [c for r in (2, 1) for c in combinations(range(stems_per_code), r)]
    gazetteer: list[GazetteerRow] = []
    test: list[MentionRecord] = []
    train: list[MentionRecord] = []
    train_codes = set(rng.choice(n_codes, size=n_train_codes, replace=False).tolist())
    for i, stems in enumerate(stem_sets):
        code = f"C{i:05d}"
        obsolete = bool(rng.random() < obsolete_fraction)
        variants: list[str] = []
        while len(variants) < n_variants + (train_mentions_per_code if i in train_codes else 0):
            pick = combos[int(rng.integers(len(combos)))] if len(variants) >= len(combos) \
                else combos[len(variants)]
            v = _variant(tuple(stems[j] for j in pick), rng, filler_per_variant)
            if v not in variants:
                variants.append(v)
        for j, term in enumerate(variants[: n_variants - 1]):
            gazetteer.append(GazetteerRow(code, term, "disorder", j == 0, obsolete))
        held_out = variants[n_variants - 1]
        test.append(MentionRecord(f"test{i:05d}", 0, len(held_out), held_out, code))
        for j, term in enumerate(variants[n_variants:]):
            train.append(MentionRecord(f"train{i:05d}_{j}", 0, len(term), term, code))
    return SyntheticDataset(gazetteer, train, test)
