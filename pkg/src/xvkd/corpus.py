"""Synthetic speaker corpus generation and verification trial lists.

Each speaker is a 40-d latent offset; each utterance adds a channel offset
and first-order autoregressive frame noise.  Evaluation speakers are disjoint
from training speakers, and the trial list pairs evaluation utterances at a
1:3 target-to-nontarget ratio.  Everything is deterministic given the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SyntheticCorpusSpec",
    "Utterance",
    "Corpus",
    "Trial",
    "TrialList",
    "gen_corpus",
    "write_trials",
    "read_trials",
]

FEAT_DIM = 40


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    """Shape and noise structure of the generated corpus."""

    n_speakers: int = 200
    eval_speakers: int = 40
    utterances_per_speaker: int = 10
    frames_per_utterance: int = 400
    speaker_spread: float = 1.0
    channel_spread: float = 0.3
    noise_ar: float = 0.5
    noise_scale: float = 0.3
    n_target_trials: int = 800
    seed: int = 42

    def __post_init__(self):
        if self.n_speakers < 2 or self.eval_speakers < 2:
            raise ValueError("need at least two train and two eval speakers")
        if self.utterances_per_speaker < 1 or self.frames_per_utterance < 1:
            raise ValueError("need at least one utterance of at least one frame")
        if not self.speaker_spread > self.channel_spread > 0.0:
            raise ValueError(
                "learnable task requires speaker_spread > channel_spread > 0"
            )
        if not 0.0 <= self.noise_ar < 1.0:
            raise ValueError("noise_ar must lie in [0, 1)")
        if self.noise_scale < 0.0:
            raise ValueError("noise_scale must be non-negative")
        if self.n_target_trials < 1:
            raise ValueError("need at least one target trial")


@dataclass
class Utterance:
    utterance_id: str
    speaker: str
    features: np.ndarray  # (T, 40) float32 storage

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class Corpus:
    utterances: list[Utterance]

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    @property
    def speakers(self) -> list[str]:
        seen: dict[str, None] = {}
        for utt in self.utterances:
            seen.setdefault(utt.speaker, None)
        return list(seen)

    def by_id(self) -> dict[str, Utterance]:
        return {u.utterance_id: u for u in self.utterances}


@dataclass(frozen=True)
class Trial:
    enroll_id: str
    test_id: str
    target: bool


@dataclass
class TrialList:
    trials: list[Trial] = field(default_factory=list)

    def __post_init__(self):
        if self.trials:
            labels = {t.target for t in self.trials}
            if labels != {True, False}:
                raise ValueError("trial list needs at least one trial of each label")

    def __len__(self) -> int:
        return len(self.trials)

    def __iter__(self):
        return iter(self.trials)


def _ar1_noise(rng: np.random.Generator, shape, rho: float, scale: float) -> np.ndarray:
    """AR(1) noise along the frame axis of (U, T, d)."""
    eps = rng.normal(0.0, 1.0, size=shape) * scale
    if rho == 0.0:
        return eps
    noise = eps
    for t in range(1, shape[1]):
        noise[:, t] += rho * noise[:, t - 1]
    return noise


def _gen_split(
    rng: np.random.Generator, spec: SyntheticCorpusSpec, n_speakers: int, prefix: str
) -> Corpus:
    utterances = []
    for s in range(n_speakers):
        speaker = f"{prefix}{s:04d}"
        latent = rng.normal(0.0, 1.0, size=FEAT_DIM) * spec.speaker_spread
        channels = (
            rng.normal(0.0, 1.0, size=(spec.utterances_per_speaker, 1, FEAT_DIM))
            * spec.channel_spread
        )
        noise = _ar1_noise(
            rng,
            (spec.utterances_per_speaker, spec.frames_per_utterance, FEAT_DIM),
            spec.noise_ar,
            spec.noise_scale,
        )
        feats = latent + channels + noise
        for u in range(spec.utterances_per_speaker):
            utterances.append(
                Utterance(
                    utterance_id=f"{speaker}-utt{u:03d}",
                    speaker=speaker,
                    features=feats[u].astype(np.float32),
                )
            )
    return Corpus(utterances=utterances)


def _gen_trials(rng: np.random.Generator, corpus: Corpus, n_target: int) -> TrialList:
    by_speaker: dict[str, list[str]] = {}
    for utt in corpus:
        by_speaker.setdefault(utt.speaker, []).append(utt.utterance_id)
    same_pairs = []
    for ids in by_speaker.values():
        for i in range(len(ids)):
            for j in range(i + 1, len(ids)):
                same_pairs.append((ids[i], ids[j]))
    all_ids = [u.utterance_id for u in corpus]
    spk_of = {u.utterance_id: u.speaker for u in corpus}
    cross_pairs = []
    for i in range(len(all_ids)):
        for j in range(i + 1, len(all_ids)):
            if spk_of[all_ids[i]] != spk_of[all_ids[j]]:
                cross_pairs.append((all_ids[i], all_ids[j]))
    n_target = min(n_target, len(same_pairs))
    n_nontarget = min(3 * n_target, len(cross_pairs))
    tar_idx = rng.choice(len(same_pairs), size=n_target, replace=False)
    non_idx = rng.choice(len(cross_pairs), size=n_nontarget, replace=False)
    trials = [Trial(*same_pairs[i], target=True) for i in sorted(tar_idx)]
    trials += [Trial(*cross_pairs[i], target=False) for i in sorted(non_idx)]
    return TrialList(trials=trials)


def gen_corpus(spec: SyntheticCorpusSpec) -> tuple[Corpus, Corpus, TrialList]:
    """Generate disjoint train/eval corpora plus an evaluation trial list."""
    rng = np.random.default_rng(spec.seed)
    train = _gen_split(rng, spec, spec.n_speakers, "trn")
    evalc = _gen_split(rng, spec, spec.eval_speakers, "evl")
    trials = _gen_trials(rng, evalc, spec.n_target_trials)
    return train, evalc, trials


def write_trials(trials: TrialList, path) -> None:
    """One `<enroll-id> <test-id> <target|nontarget>` line per trial."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for t in trials:
            label = "target" if t.target else "nontarget"
            fh.write(f"{t.enroll_id} {t.test_id} {label}\n")


def read_trials(path) -> TrialList:
    trials = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[2] not in ("target", "nontarget"):
                raise ValueError(f"{path}:{line_no}: malformed trial line {line!r}")
            trials.append(Trial(parts[0], parts[1], target=parts[2] == "target"))
    return TrialList(trials=trials)
