import numpy as np
import pytest

from medlink.corpus import MentionRecord
from medlink.index import Candidate, CandidateSet
from medlink.mining import (PairExample, Triplet, build_fsn_pairs,
                            build_hard_triplets_from_candidates, build_random_triplets,
                            mention_vocabulary_store, read_pairs, read_triplets, write_pairs,
                            write_triplets)
from medlink.terminology import Concept, ConceptStore, GazetteerRow, store_from_rows


def store_of(*concepts):
    return ConceptStore({c.code: c for c in concepts})


def cset(mention, *items):
    return CandidateSet(mention, tuple(Candidate(c, t, 1.0 - 0.1 * i)
                                       for i, (c, t) in enumerate(items)), len(items))


class TestFsnPairs:
    def test_fsn_with_synonyms(self):
        pairs = build_fsn_pairs(store_of(Concept("X", "F", ("a", "b"))))
        assert pairs == [PairExample("F", "a", "X"), PairExample("F", "b", "X")]

    def test_no_synonyms(self):
        assert build_fsn_pairs(store_of(Concept("X", "F"))) == []

    def test_random_store_count(self):
        rng = np.random.default_rng(0)
        concepts = [Concept(f"C{i}", f"f{i}", tuple(f"s{i}_{j}" for j in range(rng.integers(0, 5))))
                    for i in range(50)]
        assert len(build_fsn_pairs(store_of(*concepts))) == sum(len(c.synonyms) for c in concepts)

    def test_invariant_under_duplicated_rows(self):
        rows = [GazetteerRow("A", "f", "", True), GazetteerRow("A", "s")]
        dup = rows + [GazetteerRow("A", "s")] * 3
        assert build_fsn_pairs(store_from_rows(rows)) == build_fsn_pairs(store_from_rows(dup))


class TestRandomTriplets:
    def test_two_codes_five_negatives(self):
        store = store_of(Concept("A", "fa", ("sa",)), Concept("B", "fb", ("sb",)))
        trips = build_random_triplets(store, 5, seed=1)
        assert len(trips) == 10
        for t in trips:
            own = "A" if t.anchor == "fa" else "B"
            other = store["B" if own == "A" else "A"]
            assert t.negative in other.terms
            assert t.meta != own

    def test_zero_negatives(self, tiny_store):
        assert build_random_triplets(tiny_store, 0) == []

    def test_replay(self, tiny_store):
        assert build_random_triplets(tiny_store, 5, seed=7) == build_random_triplets(tiny_store, 5, seed=7)

    def test_single_code_rejected(self):
        with pytest.raises(ValueError):
            build_random_triplets(store_of(Concept("A", "f", ("s",))), 5)

    def test_shared_term_never_negative_for_itself(self):
        store = store_of(Concept("A", "fa", ("shared",)), Concept("B", "shared", ("sb",)))
        for t in build_random_triplets(store, 20, seed=0):
            assert t.negative != t.positive


class TestHardTriplets:
    def test_one_gold_one_wrong(self):
        store = store_of(Concept("g", "t_g"), Concept("w", "t_w"))
        m = MentionRecord("d", 0, 1, "m", "g")
        out = build_hard_triplets_from_candidates([(m, cset("m", ("g", "t_g"), ("w", "t_w")))], store)
        assert out.triplets == [Triplet("m", "t_g", "t_w", "w")]

    def test_all_gold(self):
        store = store_of(Concept("g", "t_g", ("t_g2",)))
        m = MentionRecord("d", 0, 1, "m", "g")
        out = build_hard_triplets_from_candidates([(m, cset("m", ("g", "t_g")))], store)
        assert out.triplets == []

    def test_gold_not_retrieved_uses_store_fsn(self):
        store = store_of(Concept("g", "fsn_g"), Concept("w", "t_w"))
        m = MentionRecord("d", 0, 1, "m", "g")
        out = build_hard_triplets_from_candidates([(m, cset("m", ("w", "t_w")))], store)
        assert out.triplets == [Triplet("m", "fsn_g", "t_w", "w")]

    def test_positive_differs_from_anchor(self):
        store = store_of(Concept("g", "m", ("other",)), Concept("w", "t_w"))
        m = MentionRecord("d", 0, 1, "m", "g")
        out = build_hard_triplets_from_candidates([(m, cset("m", ("g", "m"), ("w", "t_w")))], store)
        assert out.triplets == [Triplet("m", "other", "t_w", "w")]

    def test_skips_are_counted(self):
        store = store_of(Concept("g", "m"), Concept("w", "t_w"))
        unknown = MentionRecord("d", 0, 1, "x", "zzz")
        no_pos = MentionRecord("d", 0, 1, "m", "g")
        out = build_hard_triplets_from_candidates(
            [(unknown, cset("x", ("w", "t_w"))), (no_pos, cset("m", ("g", "m"), ("w", "t_w")))], store)
        assert out.triplets == []
        assert (out.skipped_unknown_gold, out.skipped_no_positive) == (1, 1)

    def test_random_recount(self):
        rng = np.random.default_rng(4)
        store = store_of(*[Concept(f"C{i}", f"f{i}", (f"s{i}",)) for i in range(10)])
        items, expected = [], 0
        for j in range(40):
            gold = f"C{rng.integers(10)}"
            codes = rng.choice(10, size=int(rng.integers(1, 8)), replace=False)
            cands = [(f"C{c}", f"f{c}") for c in codes]
            expected += sum(1 for c, _ in cands if c != gold)
            items.append((MentionRecord("d", 0, 1, f"mention {j}", gold), cset(f"mention {j}", *cands)))
        out = build_hard_triplets_from_candidates(items, store)
        assert len(out.triplets) == expected
        for t in out.triplets:
            assert t.meta not in {c.code for c in store.concepts.values() if t.positive in c.terms}


class TestMentionPool:
    def test_first_mention_is_fsn(self):
        recs = [MentionRecord("d", 0, 1, "a", "X"), MentionRecord("d", 0, 1, "b", "X"),
                MentionRecord("d", 0, 1, "a", "X"), MentionRecord("d", 0, 1, "c", "Y")]
        pool = mention_vocabulary_store(recs)
        assert pool["X"].terms == ("a", "b")
        assert pool["Y"].fsn == "c"


class TestIO:
    def test_pairs_round_trip(self, tmp_path, tiny_store):
        pairs = build_fsn_pairs(tiny_store)
        write_pairs(pairs, tmp_path / "p.tsv")
        assert read_pairs(tmp_path / "p.tsv") == pairs

    def test_triplets_round_trip(self, tmp_path, tiny_store):
        trips = build_random_triplets(tiny_store, 2, seed=0)
        write_triplets(trips, tmp_path / "t.tsv")
        back = read_triplets(tmp_path / "t.tsv")
        assert [(t.anchor, t.positive, t.negative) for t in back] == \
            [(t.anchor, t.positive, t.negative) for t in trips]

    def test_invalid_examples(self):
        with pytest.raises(ValueError):
            PairExample("", "b", "g")
        with pytest.raises(ValueError):
            Triplet("a", "b", "b")
