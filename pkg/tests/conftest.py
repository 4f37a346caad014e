import logging
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from medlink.encoder import ToyEncoder
from medlink.terminology import GazetteerRow, store_from_rows


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.ERROR, logger="medlink")


def write_tsv(path: Path, header, rows) -> Path:
    lines = ["\t".join(header)] + ["\t".join(str(c) for c in r) for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


GAZ_HEADER = ("code", "term", "semantic_tag", "is_preferred", "is_obsolete")
ANN_HEADER = ("doc_id", "span_start", "span_end", "text", "code")


@pytest.fixture
def small_encoder():
    return ToyEncoder(dim=8, vocab_size=512, hidden_dim=6, seed=3)


@pytest.fixture
def tiny_store():
    rows = [
        GazetteerRow("A", "dolor torácico", "finding", True),
        GazetteerRow("A", "dolor en el pecho"),
        GazetteerRow("B", "fiebre alta", "finding", True),
        GazetteerRow("B", "hipertermia"),
        GazetteerRow("B", "pirexia"),
        GazetteerRow("C", "cefalea", "finding", True),
    ]
    return store_from_rows(rows)


def random_words(rng: np.random.Generator, n: int, alphabet="abcdefghijklmnopqrstuvwxyz ") -> list[str]:
    out = []
    for _ in range(n):
        length = int(rng.integers(3, 20))
        out.append("".join(rng.choice(list(alphabet), size=length)).strip() or "x")
    return out


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for line in results:
            terminalreporter.write_line(line)
