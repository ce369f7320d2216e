import numpy as np
import pytest

from ramkit.features import (
    CmnConfig, Utterance, append_ivector, apply_cmn, cmn_offline, cmn_online,
    global_mean_of, read_corpus, write_corpus,
)
from ramkit.numerics import ContractViolation, Rng

from oracles import online_cmn_scalar


def _utt(utt_id, speaker, frames, labels=None, transcript=None):
    return Utterance(utt_id, speaker, np.asarray(frames, dtype=float), labels, transcript)


class TestCmnOffline:
    def test_constant_utterance_becomes_zero(self):
        u = _utt("a", "s1", np.full((6, 3), 2.5))
        out = cmn_offline([u], "utterance")[0]
        assert np.allclose(out.frames, 0.0, atol=1e-12)

    def test_per_speaker_centering(self):
        rng = Rng(1)
        u1 = _utt("a", "s1", rng.normal(size=(10, 4)) + 3.0)
        u2 = _utt("b", "s1", rng.normal(size=(14, 4)) - 1.0)
        out = cmn_offline([u1, u2], "speaker")
        pooled = np.concatenate([o.frames for o in out], axis=0)
        assert np.max(np.abs(pooled.mean(axis=0))) < 1e-10
        # both utterances shared one subtracted mean
        shift1 = u1.frames - out[0].frames
        shift2 = u2.frames - out[1].frames
        assert np.allclose(shift1[0], shift2[0], atol=1e-12)

    def test_per_utterance_differs_from_per_speaker(self):
        rng = Rng(2)
        u1 = _utt("a", "s1", rng.normal(size=(8, 3)) + 5.0)
        u2 = _utt("b", "s1", rng.normal(size=(8, 3)) - 5.0)
        by_utt = cmn_offline([u1, u2], "utterance")
        by_spk = cmn_offline([u1, u2], "speaker")
        assert not np.allclose(by_utt[0].frames, by_spk[0].frames)

    def test_group_mean_zero_property(self):
        rng = Rng(3)
        utts = [_utt(f"u{k}", f"s{k % 3}", rng.normal(size=(5 + k, 4)) + k)
                for k in range(9)]
        for scope in ("utterance", "speaker"):
            out = cmn_offline(utts, scope)
            if scope == "utterance":
                for o in out:
                    assert np.max(np.abs(o.frames.mean(axis=0))) < 1e-10
            else:
                by_spk = {}
                for o in out:
                    by_spk.setdefault(o.speaker_id, []).append(o.frames)
                for frames in by_spk.values():
                    pooled = np.concatenate(frames, axis=0)
                    assert np.max(np.abs(pooled.mean(axis=0))) < 1e-10

    def test_variance_normalization_option(self):
        rng = Rng(4)
        u = _utt("a", "s1", rng.normal(size=(200, 3)) * 7.0 + 2.0)
        out = cmn_offline([u], "utterance", normalize_variance=True)[0]
        assert np.max(np.abs(out.frames.mean(axis=0))) < 1e-10
        assert np.max(np.abs(out.frames.std(axis=0) - 1.0)) < 1e-10

    def test_empty_rejected(self):
        with pytest.raises(ContractViolation):
            cmn_offline([], "speaker")


class TestCmnOnline:
    def test_signal_equal_to_global_mean_gives_zero(self):
        g = np.array([1.0, -2.0])
        u = _utt("a", "s1", np.tile(g, (20, 1)))
        out = cmn_online(u, CmnConfig(mode="online", global_mean=g))
        assert np.allclose(out.frames, 0.0, atol=1e-12)

    def test_huge_prior_dominates(self):
        g = np.array([1.0])
        c = np.array([4.0])
        u = _utt("a", "s1", np.tile(c, (10, 1)))
        out = cmn_online(u, CmnConfig(mode="online", global_mean=g, prior_frames=10 ** 9))
        assert np.allclose(out.frames, c - g, atol=1e-6)

    def test_constant_signal_converges_vs_scalar_recurrence(self):
        g = np.array([0.5, -0.5])
        frames = np.tile([2.0, 3.0], (200, 1))
        u = _utt("a", "s1", frames)
        out = cmn_online(u, CmnConfig(mode="online", global_mean=g, prior_frames=100))
        want = online_cmn_scalar(frames.tolist(), g.tolist(), 100)
        assert np.max(np.abs(out.frames - np.array(want))) < 1e-10
        assert np.max(np.abs(out.frames[-1])) < np.max(np.abs(out.frames[0]))

    def test_strict_causality_prefix_property(self):
        rng = Rng(5)
        frames = rng.normal(size=(30, 3))
        g = np.zeros(3)
        cfg = CmnConfig(mode="online", global_mean=g, prior_frames=10)
        full = cmn_online(_utt("a", "s1", frames), cfg).frames
        for cut in (1, 7, 15):
            prefix = cmn_online(_utt("a", "s1", frames[:cut]), cfg).frames
            assert np.array_equal(full[:cut], prefix)

    def test_forgetting_factor_recurrence(self):
        g = np.array([1.0])
        frames = np.array([[2.0], [4.0], [0.0]])
        alpha = 0.5
        out = cmn_online(_utt("a", "s1", frames),
                         CmnConfig(mode="online", global_mean=g, forgetting=alpha))
        # m0 = 1; out0 = 2 - 1 = 1; m1 = 1.5; out1 = 4 - 1.5 = 2.5; m2 = 2.75
        assert np.allclose(out.frames[:, 0], [1.0, 2.5, -2.75], atol=1e-12)

    def test_missing_global_mean_rejected(self):
        with pytest.raises(ContractViolation):
            cmn_online(_utt("a", "s1", np.zeros((3, 2))), CmnConfig(mode="online"))


class TestAppendIvector:
    def test_zero_ivector_appends_zeros(self):
        frames = Rng(6).normal(size=(5, 4))
        out = append_ivector(frames, np.zeros(3))
        assert out.shape == (5, 7)
        assert np.all(out[:, 4:] == 0.0)

    def test_dims_add_up(self):
        out = append_ivector(np.zeros((9, 40)), np.zeros(10))
        assert out.shape == (9, 50)

    def test_feature_block_unchanged_and_blocks_differ(self):
        rng = Rng(7)
        frames = rng.normal(size=(6, 4))
        v1 = rng.normal(size=3)
        v2 = rng.normal(size=3)
        out1 = append_ivector(frames, v1)
        out2 = append_ivector(frames, v2)
        assert np.array_equal(out1[:, :4], frames)
        assert np.array_equal(out2[:, :4], frames)
        assert not np.array_equal(out1[:, 4:], out2[:, 4:])
        assert np.all(out1[:, 4:] == v1)


class TestCorpusIo:
    def test_roundtrip(self, tmp_path):
        rng = Rng(8)
        utts = [
            _utt("s1-u0", "s1", rng.normal(size=(7, 3)),
                 labels=np.array([0, 1, 1, 2, 0, 0, 2], dtype=np.intp),
                 transcript=["ph00", "ph01"]),
            _utt("s2-u0", "s2", rng.normal(size=(4, 3))),
        ]
        write_corpus(tmp_path, utts)
        loaded = read_corpus(tmp_path)
        assert [u.utt_id for u in loaded] == ["s1-u0", "s2-u0"]
        assert np.array_equal(loaded[0].frames, utts[0].frames)
        assert np.array_equal(loaded[0].labels, utts[0].labels)
        assert loaded[0].transcript == ["ph00", "ph01"]
        assert loaded[1].labels is None and loaded[1].transcript is None

    def test_manifest_is_five_column_tsv(self, tmp_path):
        write_corpus(tmp_path, [_utt("a-u0", "a", np.zeros((2, 2)))])
        line = (tmp_path / "corpus.tsv").read_text().splitlines()[0]
        parts = line.split("\t")
        assert len(parts) == 5
        assert parts[0] == "a-u0" and parts[3] == "-" and parts[4] == "-"

    def test_apply_cmn_dispatch(self):
        rng = Rng(9)
        utts = [_utt("a", "s1", rng.normal(size=(5, 2)) + 4.0)]
        out = apply_cmn(utts, CmnConfig(mode="offline_per_utterance"))
        assert np.max(np.abs(out[0].frames.mean(axis=0))) < 1e-10
        out = apply_cmn(utts, CmnConfig(mode="none"))
        assert np.array_equal(out[0].frames, utts[0].frames)
        g = global_mean_of(utts)
        out = apply_cmn(utts, CmnConfig(mode="online", global_mean=g))
        assert out[0].frames.shape == utts[0].frames.shape
