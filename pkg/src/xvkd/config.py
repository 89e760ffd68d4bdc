"""Experiment configuration: `[section]` blocks of `key = value` lines.

Every key has a default; a config file only overrides what it names.
Booleans accept true/false, yes/no, on/off, 1/0.  The full default block:

    [experiment]
    seed = 42                   ; master seed for every stage

    [corpus]
    n_speakers = 200            ; training speakers
    eval_speakers = 40          ; evaluation speakers (disjoint)
    utterances_per_speaker = 10
    frames_per_utterance = 400
    speaker_spread = 1.0        ; speaker latent stddev
    channel_spread = 0.3        ; per-utterance channel stddev
    noise_ar = 0.5              ; AR(1) coefficient of frame noise
    noise_scale = 0.3           ; innovation stddev of frame noise
    n_target_trials = 800       ; target trials (nontargets = 3x)

    [teacher]
    epochs = 2                  ; passes over the sampled chunk budget
    steps_per_epoch = 35        ; optimizer steps per epoch
    batch_chunks = 8            ; chunks per optimizer step
    learning_rate = 1e-3
    aam_margin = 0.2            ; radians
    aam_scale = 30.0
    lde_components = 16
    lde_loss_weight = 0.3       ; auxiliary LDE classification weight

    [distill]
    epochs = 3
    batch_chunks = 8
    learning_rate = 2e-3
    n_utterances = 100          ; training utterances used for distillation
    chunk_frames = 200          ; 2 s at a 10 ms frame shift

    [backend]
    plda_iterations = 10
    length_norm = false
    n_utterances = 500          ; training utterances embedded for PLDA

    [metrics]
    p_target = 0.01
    c_miss = 1.0
    c_fa = 1.0

    [frontend]
    cmn_window = 300            ; frames; embedding/feature mean normalization
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

from .corpus import SyntheticCorpusSpec
from .metrics import DcfParams

__all__ = ["ExperimentConfig", "load_config", "default_config", "ConfigError", "DEFAULTS"]


class ConfigError(ValueError):
    """Malformed configuration file or value."""


DEFAULTS: dict[str, dict[str, str]] = {
    "experiment": {"seed": "42"},
    "corpus": {
        "n_speakers": "200",
        "eval_speakers": "40",
        "utterances_per_speaker": "10",
        "frames_per_utterance": "400",
        "speaker_spread": "1.0",
        "channel_spread": "0.3",
        "noise_ar": "0.5",
        "noise_scale": "0.3",
        "n_target_trials": "800",
    },
    "teacher": {
        "epochs": "2",
        "steps_per_epoch": "35",
        "batch_chunks": "8",
        "learning_rate": "1e-3",
        "aam_margin": "0.2",
        "aam_scale": "30.0",
        "lde_components": "16",
        "lde_loss_weight": "0.3",
    },
    "distill": {
        "epochs": "3",
        "batch_chunks": "8",
        "learning_rate": "2e-3",
        "n_utterances": "100",
        "chunk_frames": "200",
    },
    "backend": {
        "plda_iterations": "10",
        "length_norm": "false",
        "n_utterances": "800",
    },
    "metrics": {"p_target": "0.01", "c_miss": "1.0", "c_fa": "1.0"},
    "frontend": {"cmn_window": "300"},
}

_BOOL = {"true": True, "yes": True, "on": True, "1": True,
         "false": False, "no": False, "off": False, "0": False}


@dataclass
class TeacherTrainConfig:
    epochs: int = 2
    steps_per_epoch: int = 35
    batch_chunks: int = 8
    learning_rate: float = 1e-3
    aam_margin: float = 0.2
    aam_scale: float = 30.0
    lde_components: int = 16
    lde_loss_weight: float = 0.3


@dataclass
class DistillTrainConfig:
    epochs: int = 3
    batch_chunks: int = 8
    learning_rate: float = 2e-3
    n_utterances: int = 100
    chunk_frames: int = 200


@dataclass
class BackendConfig:
    plda_iterations: int = 10
    length_norm: bool = False
    n_utterances: int = 800


@dataclass
class ExperimentConfig:
    seed: int = 42
    corpus: SyntheticCorpusSpec = field(default_factory=SyntheticCorpusSpec)
    teacher: TeacherTrainConfig = field(default_factory=TeacherTrainConfig)
    distill: DistillTrainConfig = field(default_factory=DistillTrainConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    dcf: DcfParams = field(default_factory=DcfParams)
    cmn_window: int = 300


def _merged(path) -> dict[str, dict[str, str]]:
    values = {section: dict(keys) for section, keys in DEFAULTS.items()}
    if path is None:
        return values
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except (configparser.Error, OSError) as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    for section in parser.sections():
        if section not in values:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in parser.items(section):
            if key not in values[section]:
                raise ConfigError(f"unknown config key '{key}' in [{section}]")
            values[section][key] = value
    return values


def _to_bool(text: str, where: str) -> bool:
    try:
        return _BOOL[text.strip().lower()]
    except KeyError:
        raise ConfigError(f"{where}: expected a boolean, got {text!r}") from None


def _convert(values: dict[str, dict[str, str]], seed_override: int | None) -> ExperimentConfig:
    def num(section, key, kind):
        raw = values[section][key]
        try:
            return kind(raw) if kind is not bool else _to_bool(raw, f"[{section}] {key}")
        except ValueError as err:
            raise ConfigError(f"[{section}] {key}: {err}") from err

    seed = int(values["experiment"]["seed"]) if seed_override is None else int(seed_override)
    corpus = SyntheticCorpusSpec(
        n_speakers=num("corpus", "n_speakers", int),
        eval_speakers=num("corpus", "eval_speakers", int),
        utterances_per_speaker=num("corpus", "utterances_per_speaker", int),
        frames_per_utterance=num("corpus", "frames_per_utterance", int),
        speaker_spread=num("corpus", "speaker_spread", float),
        channel_spread=num("corpus", "channel_spread", float),
        noise_ar=num("corpus", "noise_ar", float),
        noise_scale=num("corpus", "noise_scale", float),
        n_target_trials=num("corpus", "n_target_trials", int),
        seed=seed,
    )
    teacher = TeacherTrainConfig(
        epochs=num("teacher", "epochs", int),
        steps_per_epoch=num("teacher", "steps_per_epoch", int),
        batch_chunks=num("teacher", "batch_chunks", int),
        learning_rate=num("teacher", "learning_rate", float),
        aam_margin=num("teacher", "aam_margin", float),
        aam_scale=num("teacher", "aam_scale", float),
        lde_components=num("teacher", "lde_components", int),
        lde_loss_weight=num("teacher", "lde_loss_weight", float),
    )
    distill = DistillTrainConfig(
        epochs=num("distill", "epochs", int),
        batch_chunks=num("distill", "batch_chunks", int),
        learning_rate=num("distill", "learning_rate", float),
        n_utterances=num("distill", "n_utterances", int),
        chunk_frames=num("distill", "chunk_frames", int),
    )
    backend = BackendConfig(
        plda_iterations=num("backend", "plda_iterations", int),
        length_norm=num("backend", "length_norm", bool),
        n_utterances=num("backend", "n_utterances", int),
    )
    dcf = DcfParams(
        p_target=num("metrics", "p_target", float),
        c_miss=num("metrics", "c_miss", float),
        c_fa=num("metrics", "c_fa", float),
    )
    return ExperimentConfig(
        seed=seed,
        corpus=corpus,
        teacher=teacher,
        distill=distill,
        backend=backend,
        dcf=dcf,
        cmn_window=num("frontend", "cmn_window", int),
    )


def load_config(path=None, seed: int | None = None) -> ExperimentConfig:
    """Parse a config file over the defaults; `seed` overrides the file."""
    return _convert(_merged(path), seed)


def default_config(seed: int | None = None) -> ExperimentConfig:
    return load_config(None, seed=seed)
