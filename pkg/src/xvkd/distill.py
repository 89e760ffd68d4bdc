"""Teacher-student learning with a frame-wise cosine objective.

Per-utterance teacher embeddings are replicated across frames to form
frame-level targets; frame-level bottlenecks are used as-is.  The loss for a
batch sums the negative cosine similarity over samples and averages over
frames, so its value lies in [-N, N] for N samples.  The teacher stays frozen
throughout: a parameter digest is asserted unchanged after every run.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .embeddings import (
    EmbeddingKind,
    LdeLayer,
    SpeakerEmbedding,
    lde_encode,
    statistics_pool,
)
from .features import CHUNK_FRAMES, FeatureSequence, chunk, windowed_cmn
from .models import (
    StudentModel,
    TeacherModel,
    param_digest,
    student_forward,
    teacher_forward,
)
from .optim import Adam

__all__ = [
    "DistillBatch",
    "DistillConfig",
    "DistillError",
    "TargetCache",
    "replicate_to_frames",
    "cosine_kd_loss",
    "frame_kd_loss",
    "build_target_cache",
    "distill_student",
    "student_embed",
]

log = logging.getLogger("xvkd.distill")

COSINE_EPS = 1e-8


class DistillError(RuntimeError):
    """Distillation violated one of its contracts."""


@dataclass
class DistillBatch:
    """Aligned teacher targets and student inputs for one optimizer step."""

    teacher_targets: np.ndarray  # (N, T, d)
    student_inputs: np.ndarray  # (N, T, 40)

    def __post_init__(self):
        self.teacher_targets = np.asarray(self.teacher_targets, dtype=np.float64)
        self.student_inputs = np.asarray(self.student_inputs, dtype=np.float64)
        if (
            self.teacher_targets.ndim != 3
            or self.student_inputs.ndim != 3
            or self.teacher_targets.shape[:2] != self.student_inputs.shape[:2]
        ):
            raise ValueError(
                f"targets {self.teacher_targets.shape} and inputs "
                f"{self.student_inputs.shape} disagree on batch or frame count"
            )

    @property
    def n_samples(self) -> int:
        return self.teacher_targets.shape[0]

    @property
    def n_frames(self) -> int:
        return self.teacher_targets.shape[1]


@dataclass(frozen=True)
class DistillConfig:
    """Student training hyperparameters for one embedding kind."""

    embedding_kind: EmbeddingKind
    epochs: int = 3
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    chunk_frames: int = CHUNK_FRAMES
    cmn_window: int = 300

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


def replicate_to_frames(vec, n_frames: int) -> np.ndarray:
    """Tile a single embedding into a (T, d) frame-level target."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    if isinstance(vec, SpeakerEmbedding):
        vec = vec.vector
    v = np.asarray(vec, dtype=np.float64).reshape(-1)
    return np.tile(v, (n_frames, 1))


def _cosine_sum(teacher: Tensor, student: Tensor) -> Tensor:
    """Sum over leading axes of the per-row cosine similarity."""
    t_norm = ad.sqrt((teacher * teacher).sum(axis=-1))
    s_norm = ad.sqrt((student * student).sum(axis=-1))
    denom = ad.maximum(t_norm * s_norm, COSINE_EPS)
    cos = (teacher * student).sum(axis=-1) / denom
    return cos.sum()


def _warn_zero_rows(arr: np.ndarray, side: str) -> None:
    norms = np.linalg.norm(arr, axis=-1)
    if (norms < COSINE_EPS).any():
        warnings.warn(f"zero-norm {side} row in cosine loss; epsilon-stabilized", RuntimeWarning)


def cosine_kd_loss(teacher, student, reduction: str = "sum") -> Tensor:
    """Negative cosine similarity summed over the batch (mean with a flag).

    Inputs are (N, d); the teacher side is treated as a constant target.
    """
    t = teacher if isinstance(teacher, Tensor) else Tensor(teacher)
    s = student if isinstance(student, Tensor) else Tensor(student)
    if t.shape != s.shape:
        raise ad.ShapeError(f"teacher {t.shape} and student {s.shape} shapes differ")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction '{reduction}'")
    _warn_zero_rows(t.data, "teacher")
    _warn_zero_rows(s.data, "student")
    loss = -_cosine_sum(t, s)
    if reduction == "mean":
        loss = loss * (1.0 / float(np.prod(t.shape[:-1])))
    return loss


def frame_kd_loss(teacher, student) -> Tensor:
    """Per-frame cosine loss, summed over samples and averaged over frames.

    Inputs are (N, T, d); the result equals the frame average of the batched
    cosine loss and lies in [-N, N].
    """
    t = teacher if isinstance(teacher, Tensor) else Tensor(teacher)
    s = student if isinstance(student, Tensor) else Tensor(student)
    if t.shape != s.shape:
        raise ad.ShapeError(f"teacher {t.shape} and student {s.shape} shapes differ")
    if t.ndim != 3:
        raise ad.ShapeError(f"expected (N, T, d) tensors, got {t.shape}")
    n_frames = t.shape[1]
    if n_frames == 0:
        raise ad.ShapeError("frame loss over an empty sequence")
    _warn_zero_rows(t.data, "teacher")
    _warn_zero_rows(s.data, "student")
    return -_cosine_sum(t, s) * (1.0 / float(n_frames))


@dataclass
class TargetCache:
    """Per-chunk teacher quantities, stored 32-bit, shared across systems.

    ``narrow``/``wide`` hold raw (un-normalized) frame sequences; mean
    normalization is applied at batch-assembly time so both toggle settings
    share one cache.
    """

    inputs: np.ndarray  # (n_chunks, T, 40) float32
    utterance: np.ndarray  # (n_chunks, 512)
    narrow: np.ndarray  # (n_chunks, T, 512)
    wide: np.ndarray  # (n_chunks, T, 1500)
    sp: np.ndarray  # (n_chunks, 1024)
    lde: np.ndarray | None  # (n_chunks, 512)

    @property
    def n_chunks(self) -> int:
        return self.inputs.shape[0]


def build_target_cache(
    teacher: TeacherModel,
    chunks: np.ndarray,
    lde: LdeLayer | None = None,
    batch_size: int = 8,
) -> TargetCache:
    """Run the frozen teacher over chunks and collect all target pieces."""
    n, t_frames, _ = chunks.shape
    utt = np.empty((n, 512), dtype=np.float32)
    narrow = np.empty((n, t_frames, 512), dtype=np.float32)
    wide = np.empty((n, t_frames, 1500), dtype=np.float32)
    sp = np.empty((n, 1024), dtype=np.float32)
    lde_vec = np.empty((n, 512), dtype=np.float32) if lde is not None else None
    with ad.no_grad():
        for lo in range(0, n, batch_size):
            hi = min(lo + batch_size, n)
            out = teacher_forward(
                teacher, np.asarray(chunks[lo:hi], dtype=np.float64), training=False
            )
            utt[lo:hi] = out.fc1.data
            narrow[lo:hi] = out.tdnn[3].data
            wide[lo:hi] = out.tdnn[4].data
            sp_sum = sum(statistics_pool(out.tdnn[i]).data for i in range(4))
            sp[lo:hi] = sp_sum / 4.0
            if lde is not None:
                lde_sum = sum(lde_encode(out.tdnn[i], lde).data for i in range(4))
                lde_vec[lo:hi] = lde_sum / 4.0
    return TargetCache(
        inputs=np.asarray(chunks, dtype=np.float32),
        utterance=utt,
        narrow=narrow,
        wide=wide,
        sp=sp,
        lde=lde_vec,
    )


def _assemble_targets(cache: TargetCache, idx: np.ndarray, kind: EmbeddingKind, cmn_window: int) -> np.ndarray:
    """Build (N, T, d) distillation targets for the chunks in `idx`."""
    t_frames = cache.inputs.shape[1]
    variant = kind.variant

    def norm_seq(seqs: np.ndarray) -> np.ndarray:
        seqs = np.asarray(seqs, dtype=np.float64)
        if kind.mean_norm:
            return np.stack([windowed_cmn(s, cmn_window) for s in seqs])
        return seqs

    if variant == "utterance":
        return np.repeat(
            np.asarray(cache.utterance[idx], dtype=np.float64)[:, None, :], t_frames, axis=1
        )
    if variant == "narrow_bn":
        return norm_seq(cache.narrow[idx])
    if variant == "wide_bn":
        return norm_seq(cache.wide[idx])
    if variant == "sp_aggr":
        return np.repeat(np.asarray(cache.sp[idx], dtype=np.float64)[:, None, :], t_frames, axis=1)
    if variant == "lde_aggr":
        if cache.lde is None:
            raise DistillError("target cache was built without LDE vectors")
        return np.repeat(np.asarray(cache.lde[idx], dtype=np.float64)[:, None, :], t_frames, axis=1)
    if variant == "composite":
        if cache.lde is None:
            raise DistillError("target cache was built without LDE vectors")
        nbn = norm_seq(cache.narrow[idx]).mean(axis=1)
        wbn = norm_seq(cache.wide[idx]).mean(axis=1)
        vecs = np.concatenate(
            [
                np.asarray(cache.utterance[idx], dtype=np.float64),
                nbn,
                wbn,
                np.asarray(cache.sp[idx], dtype=np.float64),
                np.asarray(cache.lde[idx], dtype=np.float64),
            ],
            axis=1,
        )
        return np.repeat(vecs[:, None, :], t_frames, axis=1)
    raise DistillError(f"no target rule for embedding variant '{variant}'")


def corpus_chunks(utterances, chunk_frames: int = CHUNK_FRAMES) -> np.ndarray:
    """Stack every utterance's fixed-length chunks into one (n, T, 40) array."""
    pieces = []
    for utt in utterances:
        pieces.extend(chunk(utt.features, chunk_frames))
    return np.stack(pieces)


def distill_student(
    teacher: TeacherModel,
    kind: EmbeddingKind,
    corpus,
    cfg: DistillConfig,
    lde: LdeLayer | None = None,
    target_cache: TargetCache | None = None,
) -> StudentModel:
    """Train a fresh student to match frame-level teacher targets.

    `corpus` is a sequence of utterances with a ``features`` attribute; the
    teacher (and the LDE layer, when given) is frozen and verified unchanged.
    """
    if kind.variant in ("lde_aggr", "composite") and lde is None and target_cache is None:
        raise DistillError(f"'{kind.variant}' distillation requires the teacher's LDE layer")
    digest_before = param_digest(teacher)
    if target_cache is None:
        chunks = corpus_chunks(corpus, cfg.chunk_frames)
        target_cache = build_target_cache(teacher, chunks, lde=lde, batch_size=cfg.batch_size)
    student = StudentModel(d_out=kind.dim, seed=cfg.seed, kind=kind)
    opt = Adam(student.parameters(), learning_rate=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    n = target_cache.n_chunks
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            batch = DistillBatch(
                teacher_targets=_assemble_targets(target_cache, idx, kind, cfg.cmn_window),
                student_inputs=target_cache.inputs[idx],
            )
            pred = student_forward(student, batch.student_inputs)
            loss = frame_kd_loss(Tensor(batch.teacher_targets), pred)
            value = loss.item()
            if not -batch.n_samples - 1e-9 <= value <= batch.n_samples + 1e-9:
                raise DistillError(
                    f"frame loss {value} escaped [-N, N] for N={batch.n_samples}"
                )
            loss.backward()
            opt.step()
            losses.append(value / batch.n_samples)
        log.info(
            "distill %s epoch=%d mean_loss=%.4f wall=%.1fs",
            kind.label,
            epoch,
            float(np.mean(losses)),
            time.perf_counter() - t0,
        )
    if param_digest(teacher) != digest_before:
        raise DistillError("teacher parameters changed during distillation")
    return student


def student_embed(student: StudentModel, feats) -> SpeakerEmbedding:
    """Average the student's frame outputs over a whole utterance."""
    if student.kind is None:
        raise DistillError("student has no embedding kind; distill it first")
    if isinstance(feats, FeatureSequence):
        feats = feats.frames
    out = student_forward(student, np.asarray(feats, dtype=np.float64))
    return SpeakerEmbedding(kind=student.kind, vector=out.data.mean(axis=0))
