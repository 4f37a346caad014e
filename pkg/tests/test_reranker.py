import numpy as np
import pytest

from oracles import stable_sort_desc
from medlink.corpus import MentionRecord
from medlink.encoder import OptimizerConfig, ToyCrossEncoder, ToyEncoder
from medlink.index import Candidate, CandidateSet, build_index, retrieve_batch
from medlink.mining import Triplet
from medlink.reranker import (Prediction, ScoredCandidateSet, bce_with_logits,
                              candidates_to_predictions, crossencoder_loss, link_end_to_end,
                              read_predictions, rerank, rerank_head, score_candidates,
                              train_crossencoder, write_predictions)


def make_cset(n, mention="m", seed=0):
    rng = np.random.default_rng(seed)
    scores = np.sort(rng.uniform(-1, 1, size=n))[::-1]
    return CandidateSet(mention, tuple(Candidate(f"C{i}", f"term {i}", float(s))
                                       for i, s in enumerate(scores)), n)


class LengthScorer:
    """Deterministic toy scorer: longer shared prefix scores higher."""

    def score_pairs(self, pairs):
        out = []
        for a, b in pairs:
            n = 0
            while n < min(len(a), len(b)) and a[n] == b[n]:
                n += 1
            out.append(float(n))
        return np.array(out)

    def parameters(self):
        return np.zeros(0)


TRIPLETS = [Triplet("dolor de pecho", "dolor torácico", "fiebre alta"),
            Triplet("fiebre", "pirexia", "cefalea"),
            Triplet("migraña", "cefalea", "tos seca"),
            Triplet("tos", "tos seca", "dolor torácico")]


class TestScoreCandidates:
    def test_identical_terms_identical_scores(self, small_encoder):
        ce = ToyCrossEncoder.from_biencoder(small_encoder)
        ce.set_parameters(ce.parameters() + 0.1)
        cs = CandidateSet("m", (Candidate("A", "same", 0.9), Candidate("B", "same", 0.5)), 2)
        s = score_candidates(ce, "m", cs)
        assert s.shape == (2,)
        assert s[0] == s[1]

    def test_matches_per_pair_calls(self, small_encoder):
        ce = ToyCrossEncoder.from_biencoder(small_encoder)
        ce.set_parameters(ce.parameters() + 0.05)
        cs = make_cset(5)
        batch = score_candidates(ce, "m", cs)
        single = [ce.score_pairs([("m", c.term)])[0] for c in cs.candidates]
        np.testing.assert_allclose(batch, single, atol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            score_candidates(LengthScorer(), "m", CandidateSet("m", (), 5))


class TestRerank:
    def test_sorted_scores_identity(self):
        cs = make_cset(6)
        out = rerank(cs, [6, 5, 4, 3, 2, 1])
        assert out.codes == cs.codes
        assert out.provenance == "bi+ce"

    def test_ties_stable(self):
        cs = make_cset(3)
        assert rerank(cs, [1.0, 2.0, 1.0]).codes == ["C1", "C0", "C2"]

    def test_random_25_stable_sort_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            cs = make_cset(25, seed=int(rng.integers(1 << 30)))
            scores = rng.integers(0, 6, size=25).astype(float)
            assert rerank(cs, scores).codes == stable_sort_desc(cs.codes, scores.tolist())

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            rerank(make_cset(3), [1.0, 2.0])

    def test_keeps_bi_scores(self):
        cs = make_cset(4)
        out = rerank(cs, [0, 1, 2, 3])
        by_code = {c.code: c.score for c in cs.candidates}
        for c in out.candidates:
            assert c.bi_score == by_code[c.code]

    def test_idempotent(self):
        cs = make_cset(8)
        s = np.random.default_rng(0).normal(size=8)
        once = rerank(cs, s)
        twice = rerank(once, [c.ce_score for c in once.candidates])
        assert twice == once


class TestRerankHead:
    def test_tail_keeps_order(self):
        cs = make_cset(6)
        out = rerank_head(cs, LengthScorer(), depth=3)
        assert out.codes[3:] == cs.codes[3:]
        assert sorted(out.codes[:3]) == sorted(cs.codes[:3])
        assert all(c.ce_score is None for c in out.candidates[3:])

    def test_full_depth_equals_rerank(self):
        cs = make_cset(6, mention="term 4")
        full = rerank_head(cs, LengthScorer())
        assert full == rerank(cs, score_candidates(LengthScorer(), cs.mention, cs))
        assert full.codes[0] == "C4"

    def test_depth_validation(self):
        with pytest.raises(ValueError):
            rerank_head(make_cset(4), LengthScorer(), depth=0)


class TestTrainCrossencoder:
    def test_zero_epochs_copies_weights(self, small_encoder):
        model = train_crossencoder(small_encoder, TRIPLETS, OptimizerConfig(epochs=0)).model
        assert model.encoder.parameters().tobytes() == small_encoder.parameters().tobytes()
        np.testing.assert_array_equal(model.head, 0.0)
        assert model.encoder is not small_encoder

    def test_one_step_reduces_bce(self):
        enc = ToyEncoder(dim=16, vocab_size=4096, hidden_dim=16, seed=1)
        opt = OptimizerConfig(learning_rate=1e-2, batch_size=8, epochs=1, seed=0)
        before = crossencoder_loss(ToyCrossEncoder.from_biencoder(enc), TRIPLETS)
        after = crossencoder_loss(train_crossencoder(enc, TRIPLETS, opt).model, TRIPLETS)
        assert before == pytest.approx(np.log(2.0))  # zero head scores every pair 0
        assert after < before

    def test_replay(self, small_encoder):
        opt = OptimizerConfig(learning_rate=1e-2, batch_size=2, epochs=2, seed=4)
        a = train_crossencoder(small_encoder, TRIPLETS, opt).model
        b = train_crossencoder(small_encoder, TRIPLETS, opt).model
        assert a.parameters().tobytes() == b.parameters().tobytes()

    def test_empty_rejected(self, small_encoder):
        with pytest.raises(ValueError):
            train_crossencoder(small_encoder, [])

    def test_bce_gradient(self):
        s = np.array([-2.0, 0.3, 4.0])
        y = np.array([1.0, 0.0, 1.0])
        _, g = bce_with_logits(s, y)
        for i in range(3):
            e = np.zeros(3)
            e[i] = 1e-6
            fd = (bce_with_logits(s + e, y)[0] - bce_with_logits(s - e, y)[0]) / 2e-6
            assert g[i] == pytest.approx(fd, abs=1e-8)


class TestLinkEndToEnd:
    def _setup(self, tiny_store):
        enc = ToyEncoder(dim=8, vocab_size=512, hidden_dim=6, seed=0)
        ce = ToyCrossEncoder.from_biencoder(enc)
        ce.set_parameters(ce.parameters() + np.random.default_rng(0).normal(0, 0.3, ce.num_parameters))
        return enc, ce, build_index(tiny_store, enc)

    def test_no_scorer_is_retrieval_order(self, tiny_store):
        enc, _, idx = self._setup(tiny_store)
        mentions = ["dolor", "fiebre"]
        out = link_end_to_end(enc, None, idx, mentions, 3)
        assert [o.codes for o in out] == [c.codes for c in retrieve_batch(idx, enc, mentions, 3)]
        assert all(o.provenance == "bi" for o in out)

    def test_k1_is_noop(self, tiny_store):
        enc, ce, idx = self._setup(tiny_store)
        out = link_end_to_end(enc, ce, idx, ["tos"], 1)
        assert out[0].codes == retrieve_batch(idx, enc, ["tos"], 1)[0].codes

    def test_manual_composition(self, tiny_store):
        enc, ce, idx = self._setup(tiny_store)
        mentions = ["dolor pecho", "pirexia alta", "cefalea"]
        out = link_end_to_end(enc, ce, idx, mentions, 3)
        for m, o in zip(mentions, out):
            cs = retrieve_batch(idx, enc, [m], 3)[0]
            assert o == rerank(cs, score_candidates(ce, m, cs))


class TestPredictionsIO:
    def test_round_trip(self, tmp_path):
        cs = rerank(make_cset(4), [0.1, 0.9, 0.5, 0.2])
        recs = [MentionRecord("doc", 0, 1, "m", "C1")]
        preds = candidates_to_predictions(recs, [cs])
        write_predictions(preds, tmp_path / "p.jsonl")
        back = read_predictions(tmp_path / "p.jsonl")
        assert back == preds

    def test_plain_candidate_sets_wrapped(self):
        preds = candidates_to_predictions([MentionRecord("d", 0, 1, "m", "C0")], [make_cset(2)])
        assert isinstance(preds[0], Prediction)
        assert isinstance(preds[0].scored, ScoredCandidateSet)
        assert preds[0].codes == ["C0", "C1"]
