"""Tests for synthetic corpus generation and trial lists."""

import numpy as np
import pytest

from xvkd.corpus import (
    SyntheticCorpusSpec,
    Trial,
    TrialList,
    gen_corpus,
    read_trials,
    write_trials,
)


def small_spec(**kwargs):
    defaults = dict(
        n_speakers=6,
        eval_speakers=4,
        utterances_per_speaker=3,
        frames_per_utterance=60,
        n_target_trials=10,
        seed=77,
    )
    defaults.update(kwargs)
    return SyntheticCorpusSpec(**defaults)


class TestGenCorpus:
    def test_same_seed_bit_identical(self):
        a_train, a_eval, a_trials = gen_corpus(small_spec())
        b_train, b_eval, b_trials = gen_corpus(small_spec())
        for ua, ub in zip(a_train, b_train):
            assert ua.utterance_id == ub.utterance_id
            np.testing.assert_array_equal(ua.features, ub.features)
        for ua, ub in zip(a_eval, b_eval):
            np.testing.assert_array_equal(ua.features, ub.features)
        assert a_trials.trials == b_trials.trials

    def test_different_seed_differs(self):
        a_train, _, _ = gen_corpus(small_spec(seed=1))
        b_train, _, _ = gen_corpus(small_spec(seed=2))
        assert not np.array_equal(a_train.utterances[0].features, b_train.utterances[0].features)

    def test_degenerate_spreads_give_identical_frames(self):
        spec = small_spec(channel_spread=1e-12, noise_scale=0.0, speaker_spread=1.0)
        train, _, _ = gen_corpus(spec)
        by_speaker = {}
        for utt in train:
            by_speaker.setdefault(utt.speaker, []).append(utt.features)
        for utts in by_speaker.values():
            base = utts[0][0]
            for feats in utts:
                np.testing.assert_allclose(feats, np.tile(base, (feats.shape[0], 1)), atol=1e-9)

    def test_white_noise_when_ar_zero(self):
        spec = small_spec(
            n_speakers=2,
            eval_speakers=2,
            utterances_per_speaker=1,
            frames_per_utterance=10_000,
            noise_ar=0.0,
            channel_spread=0.05,
            speaker_spread=1.0,
            noise_scale=1.0,
            n_target_trials=1,
        )
        train, _, _ = gen_corpus(spec)
        feats = np.asarray(train.utterances[0].features, dtype=np.float64)
        noise = feats - feats.mean(axis=0)
        lag1 = (noise[1:] * noise[:-1]).mean() / noise.var()
        assert abs(lag1) < 0.05

    def test_ar_noise_is_correlated(self):
        spec = small_spec(
            n_speakers=2,
            eval_speakers=2,
            utterances_per_speaker=1,
            frames_per_utterance=10_000,
            noise_ar=0.8,
            channel_spread=0.05,
            speaker_spread=1.0,
            noise_scale=1.0,
            n_target_trials=1,
        )
        train, _, _ = gen_corpus(spec)
        feats = np.asarray(train.utterances[0].features, dtype=np.float64)
        noise = feats - feats.mean(axis=0)
        lag1 = (noise[1:] * noise[:-1]).mean() / noise.var()
        assert lag1 > 0.7

    def test_eval_speakers_disjoint(self):
        train, evalc, _ = gen_corpus(small_spec())
        assert not set(train.speakers) & set(evalc.speakers)
        assert len(train.speakers) == 6
        assert len(evalc.speakers) == 4

    def test_trials_balanced_one_to_three(self):
        _, _, trials = gen_corpus(small_spec())
        n_target = sum(1 for t in trials if t.target)
        n_nontarget = sum(1 for t in trials if not t.target)
        assert n_target == 10
        assert n_nontarget == 30

    def test_trial_ids_resolve(self):
        _, evalc, trials = gen_corpus(small_spec())
        ids = {u.utterance_id for u in evalc}
        spk = {u.utterance_id: u.speaker for u in evalc}
        for t in trials:
            assert t.enroll_id in ids and t.test_id in ids
            assert (spk[t.enroll_id] == spk[t.test_id]) == t.target

    def test_spec_validation(self):
        with pytest.raises(ValueError, match="learnable"):
            SyntheticCorpusSpec(speaker_spread=0.1, channel_spread=0.5)
        with pytest.raises(ValueError):
            SyntheticCorpusSpec(noise_ar=1.0)


class TestTrialIo:
    def test_roundtrip(self, tmp_path):
        trials = TrialList(
            trials=[Trial("a-utt000", "b-utt001", True), Trial("a-utt000", "c-utt002", False)]
        )
        path = tmp_path / "trials.txt"
        write_trials(trials, path)
        text = path.read_text()
        assert "a-utt000 b-utt001 target" in text
        assert "a-utt000 c-utt002 nontarget" in text
        back = read_trials(path)
        assert back.trials == trials.trials

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("a b maybe\n")
        with pytest.raises(ValueError, match="malformed"):
            read_trials(path)

    def test_single_label_list_rejected(self):
        with pytest.raises(ValueError, match="label"):
            TrialList(trials=[Trial("a", "b", True)])
