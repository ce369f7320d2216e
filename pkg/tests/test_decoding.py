import numpy as np
import pytest

from ramkit.decoding import (
    BigramModel, PhoneHmm, PhoneSet, build_bigram, bundled_timit_map, compute_per,
    edit_distance_counts, estimate_priors, load_phone_map, map_phones, read_bigram,
    read_sequences, viterbi_decode, write_bigram, write_sequences,
)
from ramkit.features import Utterance
from ramkit.numerics import ContractViolation, Rng

from oracles import edit_distance_memoized, enumerate_viterbi


def _random_instance(rng, T, p_count, s_count):
    n = p_count * s_count
    posteriors = np.exp(rng.normal(size=(T, n)))
    posteriors /= posteriors.sum(axis=1, keepdims=True)
    priors = np.exp(0.3 * rng.normal(size=n))
    priors /= priors.sum()
    init = np.exp(rng.normal(size=p_count))
    init /= init.sum()
    trans = np.exp(rng.normal(size=(p_count, p_count)))
    trans /= trans.sum(axis=1, keepdims=True)
    phones = [f"p{k}" for k in range(p_count)]
    bigram = BigramModel(phones=phones, log_initial=np.log(init),
                         log_transition=np.log(trans))
    phoneset = PhoneSet(phones=phones, states_per_phone=s_count,
                        scoring_map={p: p for p in phones})
    hmm = PhoneHmm(states_per_phone=s_count, self_loop_prob=0.5)
    return posteriors, priors, bigram, hmm, phoneset


def _oracle_decode(posteriors, priors, bigram, hmm, phoneset, lm_weight):
    emission = np.log(posteriors) - np.log(priors)[None, :]
    score, seq = enumerate_viterbi(
        emission, bigram.log_initial.tolist(),
        bigram.log_transition.tolist(), hmm.log_loop, hmm.log_advance,
        phoneset.states_per_phone, lm_weight)
    return score, [phoneset.phones[p] for p in seq]


class TestBigram:
    def test_counting_on_tiny_transcript(self):
        phones = ["a", "b"]
        model = build_bigram([["a", "b", "a", "b"]], phones, smoothing_floor=1e-6)
        trans = np.exp(model.log_transition)
        assert trans[0, 1] > 0.999 and trans[1, 0] > 0.999
        assert np.exp(model.log_initial)[0] > 0.999

    def test_empty_input_rejected(self):
        with pytest.raises(ContractViolation):
            build_bigram([], ["a"], smoothing_floor=0.1)
        with pytest.raises(ContractViolation):
            build_bigram([[]], ["a"], smoothing_floor=0.1)

    def test_rows_normalize_for_random_corpora(self):
        rng = Rng(1)
        phones = [f"p{k}" for k in range(5)]
        for _ in range(10):
            transcripts = [[phones[int(v)] for v in rng.integers(0, 5, size=8)]
                           for _ in range(6)]
            model = build_bigram(transcripts, phones)
            rows = np.exp(model.log_transition).sum(axis=1)
            assert np.max(np.abs(rows - 1.0)) < 1e-10
            assert abs(np.exp(model.log_initial).sum() - 1.0) < 1e-10

    def test_unknown_symbol_rejected(self):
        with pytest.raises(ContractViolation):
            build_bigram([["a", "z"]], ["a", "b"])


class TestViterbi:
    def test_single_frame_single_state_closed_form(self):
        rng = Rng(2)
        posteriors, priors, bigram, hmm, phoneset = _random_instance(rng, 1, 4, 1)
        got = viterbi_decode(posteriors, priors, bigram, hmm, phoneset)
        scores = (np.log(posteriors[0]) - np.log(priors)) + bigram.log_initial
        assert got == [phoneset.phones[int(scores.argmax())]]

    def test_uniform_everything_tie_breaks_to_lowest_phone(self):
        p_count, s_count, T = 3, 1, 4
        n = p_count * s_count
        posteriors = np.full((T, n), 1.0 / n)
        priors = np.full(n, 1.0 / n)
        phones = [f"p{k}" for k in range(p_count)]
        bigram = BigramModel(phones=phones,
                             log_initial=np.log(np.full(p_count, 1.0 / p_count)),
                             log_transition=np.log(np.full((p_count, p_count),
                                                           1.0 / p_count)))
        phoneset = PhoneSet(phones=phones, states_per_phone=1,
                            scoring_map={p: p for p in phones})
        hmm = PhoneHmm(states_per_phone=1)
        assert viterbi_decode(posteriors, priors, bigram, hmm, phoneset) == ["p0"]

    @pytest.mark.parametrize("T,p_count,s_count", [
        (1, 1, 1), (3, 2, 1), (4, 3, 2), (5, 4, 1), (6, 2, 2), (6, 4, 2),
    ])
    def test_matches_enumeration_oracle(self, T, p_count, s_count):
        for seed in range(8):
            rng = Rng(5000 + 97 * seed + T + 10 * p_count + 100 * s_count)
            posteriors, priors, bigram, hmm, phoneset = \
                _random_instance(rng, T, p_count, s_count)
            got = viterbi_decode(posteriors, priors, bigram, hmm, phoneset)
            _, want = _oracle_decode(posteriors, priors, bigram, hmm, phoneset, 1.0)
            assert got == want

    def test_zero_lm_weight_matches_oracle_without_bigram(self):
        rng = Rng(3)
        posteriors, priors, bigram, hmm, phoneset = _random_instance(rng, 6, 3, 2)
        got = viterbi_decode(posteriors, priors, bigram, hmm, phoneset, lm_weight=0.0)
        _, want = _oracle_decode(posteriors, priors, bigram, hmm, phoneset, 0.0)
        assert got == want

    def test_decoding_deterministic(self):
        rng = Rng(4)
        posteriors, priors, bigram, hmm, phoneset = _random_instance(rng, 10, 4, 2)
        first = viterbi_decode(posteriors, priors, bigram, hmm, phoneset)
        second = viterbi_decode(posteriors.copy(), priors.copy(), bigram, hmm, phoneset)
        assert first == second

    def test_unnormalized_posteriors_rejected(self):
        rng = Rng(5)
        posteriors, priors, bigram, hmm, phoneset = _random_instance(rng, 3, 2, 1)
        with pytest.raises(ContractViolation):
            viterbi_decode(posteriors * 2.0, priors, bigram, hmm, phoneset)

    def test_zero_prior_rejected(self):
        rng = Rng(6)
        posteriors, priors, bigram, hmm, phoneset = _random_instance(rng, 3, 2, 1)
        priors[0] = 0.0
        with pytest.raises(ContractViolation):
            viterbi_decode(posteriors, priors, bigram, hmm, phoneset)


class TestMapPhones:
    def _phoneset(self, mapping):
        return PhoneSet(phones=sorted(mapping), states_per_phone=1, scoring_map=mapping)

    def test_identity_map_unchanged(self):
        ps = self._phoneset({"a": "a", "b": "b"})
        assert map_phones(["a", "b", "a"], ps) == ["a", "b", "a"]

    def test_merging_map_collapses_adjacent_duplicates(self):
        ps = self._phoneset({"a": "x", "b": "x"})
        assert map_phones(["a", "b", "a"], ps) == ["x"]
        assert map_phones(["a", "b", "a"], ps, collapse=False) == ["x", "x", "x"]

    def test_deletion_symbol(self):
        # deletion closes the gap first, so the surviving duplicates merge
        ps = self._phoneset({"a": "a", "q": None})
        assert map_phones(["a", "q", "a"], ps) == ["a"]
        assert map_phones(["a", "q", "a"], ps, collapse=False) == ["a", "a"]

    def test_unknown_symbol_rejected(self):
        ps = self._phoneset({"a": "a"})
        with pytest.raises(ContractViolation):
            map_phones(["z"], ps)

    def test_bundled_48_to_39_table(self):
        mapping = bundled_timit_map()
        assert len(mapping) == 48
        outputs = {v for v in mapping.values() if v is not None}
        assert len(outputs) == 39
        # spot checks of the standard folds
        assert mapping["ao"] == "aa" and mapping["zh"] == "sh"
        assert mapping["cl"] == "sil" and mapping["vcl"] == "sil"
        assert mapping["ix"] == "ih" and mapping["el"] == "l"


class TestPer:
    def test_identical_sequences_zero(self):
        per, counts = compute_per({"u1": ["a", "b"]}, {"u1": ["a", "b"]})
        assert per == 0.0
        assert counts["u1"] == (0, 0, 0, 2)

    def test_empty_hypothesis_all_deletions(self):
        per, counts = compute_per({"u1": ["a", "b", "c"]}, {"u1": []})
        assert per == 100.0
        assert counts["u1"] == (0, 3, 0, 3)

    def test_vs_memoized_recursion_oracle_100_pairs(self):
        rng = Rng(7)
        symbols = ["a", "b", "c", "d", "e"]
        for k in range(100):
            ref = [symbols[int(v)] for v in
                   rng.integers(0, 5, size=int(rng.integers(0, 12)))]
            hyp = [symbols[int(v)] for v in
                   rng.integers(0, 5, size=int(rng.integers(0, 12)))]
            subs, dels, inss = edit_distance_counts(ref, hyp)
            assert subs + dels + inss == edit_distance_memoized(ref, hyp)

    def test_invariant_under_reordering(self):
        rng = Rng(8)
        refs, hyps = {}, {}
        for k in range(10):
            refs[f"u{k}"] = [str(v) for v in rng.integers(0, 4, size=6)]
            hyps[f"u{k}"] = [str(v) for v in rng.integers(0, 4, size=6)]
        per1, _ = compute_per(refs, hyps)
        reordered = dict(reversed(list(refs.items())))
        per2, _ = compute_per(reordered, hyps)
        assert per1 == per2

    def test_id_mismatch_rejected(self):
        with pytest.raises(ContractViolation):
            compute_per({"u1": ["a"]}, {"u2": ["a"]})


class TestPriors:
    def test_counts_with_floor(self):
        utts = [Utterance("u1", "s1", np.zeros((4, 2)),
                          labels=np.array([0, 0, 1, 2], dtype=np.intp))]
        priors = estimate_priors(utts, 4, floor=0.5)
        assert abs(priors.sum() - 1.0) < 1e-12
        assert priors[0] > priors[1] > priors[3]
        assert priors[3] > 0.0

    def test_missing_labels_rejected(self):
        with pytest.raises(ContractViolation):
            estimate_priors([Utterance("u1", "s1", np.zeros((2, 2)))], 4)


class TestWireFormats:
    def test_bigram_roundtrip(self, tmp_path):
        rng = Rng(9)
        phones = ["a", "b", "c"]
        model = build_bigram([["a", "b", "c", "a"], ["b", "c"]], phones)
        path = tmp_path / "lm.tsv"
        write_bigram(path, model)
        loaded = read_bigram(path, phones)
        assert np.array_equal(loaded.log_initial, model.log_initial)
        assert np.array_equal(loaded.log_transition, model.log_transition)

    def test_sequence_file_roundtrip(self, tmp_path):
        seqs = {"u1": ["a", "b"], "u2": ["c"]}
        path = tmp_path / "hyp.tsv"
        write_sequences(path, seqs)
        assert read_sequences(path) == seqs

    def test_phone_map_file(self, tmp_path):
        path = tmp_path / "map.tsv"
        path.write_text("a\tx\nq\t-\n# comment\nb\tx\n")
        mapping = load_phone_map(path)
        assert mapping == {"a": "x", "q": None, "b": "x"}
