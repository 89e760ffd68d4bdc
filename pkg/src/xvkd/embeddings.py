"""Speaker embedding extraction from a forwarded teacher.

Five single embedding kinds are supported: the utterance-level vector from
the first fully-connected layer, frame-level bottlenecks from the last two
TDNN layers (512-d narrow, 1500-d wide, optionally mean-normalized), and two
aggregates over the first four TDNN layers (statistics pooling and learnable
dictionary encoding).  Their concatenation in a fixed order forms the
4060-dimensional composite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .features import CmnConfig, apply_cmn
from .models import TeacherOutput

__all__ = [
    "VARIANTS",
    "EMBEDDING_DIMS",
    "COMPOSE_ORDER",
    "EmbeddingKind",
    "SpeakerEmbedding",
    "EmbeddingSequence",
    "AggregationSpec",
    "LdeLayer",
    "statistics_pool",
    "lde_encode",
    "assignment_weights",
    "extract_utterance",
    "extract_frame_bn",
    "aggregate",
    "compose",
]

VARIANTS = ("utterance", "narrow_bn", "wide_bn", "sp_aggr", "lde_aggr", "composite")

EMBEDDING_DIMS = {
    "utterance": 512,
    "narrow_bn": 512,
    "wide_bn": 1500,
    "sp_aggr": 1024,
    "lde_aggr": 512,
    "composite": 4060,
}

COMPOSE_ORDER = ("utterance", "narrow_bn", "wide_bn", "sp_aggr", "lde_aggr")

# variants whose frame sequences carry the mean-normalization toggle
FRAME_LEVEL_VARIANTS = ("narrow_bn", "wide_bn")


@dataclass(frozen=True)
class EmbeddingKind:
    """An embedding variant plus its mean-normalization toggle.

    The toggle is meaningful for the frame-level bottlenecks and for the
    frame-level parts of the composite; it is ignored elsewhere.
    """

    variant: str
    mean_norm: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown embedding variant '{self.variant}'")

    @property
    def dim(self) -> int:
        return EMBEDDING_DIMS[self.variant]

    @property
    def label(self) -> str:
        if self.variant in FRAME_LEVEL_VARIANTS or self.variant == "composite":
            return self.variant + ("+cmn" if self.mean_norm else "")
        return self.variant


@dataclass
class SpeakerEmbedding:
    """A single fixed-dimensional speaker vector."""

    kind: EmbeddingKind
    vector: np.ndarray
    utterance_id: str = ""

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if not np.isfinite(self.vector).all():
            raise ValueError("embedding contains non-finite values")
        if self.kind.variant != "composite" and self.vector.size != self.kind.dim:
            raise ValueError(
                f"{self.kind.variant} embedding must be {self.kind.dim}-d, "
                f"got {self.vector.size}"
            )


@dataclass
class EmbeddingSequence:
    """Frame-level (T, d) embeddings of one utterance."""

    kind: EmbeddingKind
    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"expected (T>=1, d) frames, got {self.frames.shape}")
        if self.frames.shape[1] != self.kind.dim:
            raise ValueError(
                f"{self.kind.variant} frames must be {self.kind.dim}-d, "
                f"got {self.frames.shape[1]}"
            )


@dataclass(frozen=True)
class AggregationSpec:
    """Which pooling operator to apply to the first k TDNN layers."""

    operator: str
    k: int = 4

    def __post_init__(self):
        if self.operator not in ("sp", "lde"):
            raise ValueError(f"unknown aggregation operator '{self.operator}'")
        if not 1 <= self.k <= 4:
            raise ValueError("aggregation spans between 1 and 4 TDNN layers")


class LdeLayer:
    """Learnable dictionary encoding over 512-d frames.

    Soft-assigns each frame to dictionary components by scaled squared
    distance, pools normalized residuals per component, and projects the
    concatenated residuals back to 512 dimensions.  Weights are initialized
    from a normal distribution; component scales are kept positive through a
    log parameterization.
    """

    DIM = 512

    def __init__(self, components: int = 16, seed: int = 0):
        if components < 1:
            raise ValueError("need at least one dictionary component")
        self.components = int(components)
        rng = np.random.default_rng(seed)
        self.params: dict[str, Parameter] = {
            "lde.centers": Parameter("lde.centers", rng.normal(size=(components, self.DIM))),
            "lde.log_scales": Parameter("lde.log_scales", np.zeros(components)),
            "lde.proj.weight": Parameter(
                "lde.proj.weight",
                rng.normal(
                    0.0, 1.0 / math.sqrt(components * self.DIM), size=(components * self.DIM, self.DIM)
                ),
            ),
            "lde.proj.bias": Parameter("lde.proj.bias", np.zeros(self.DIM)),
        }

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())


def statistics_pool(h, var_floor: float = 1e-10) -> Tensor:
    """Unweighted per-dimension mean and standard deviation over frames."""
    h = h if isinstance(h, Tensor) else Tensor(h)
    squeeze = h.ndim == 2
    if squeeze:
        h = h.reshape((1,) + h.shape)
    mean = h.mean(axis=1)
    sq = (h * h).mean(axis=1)
    std = ad.sqrt(ad.maximum(sq - mean * mean, var_floor))
    out = ad.concat([mean, std], axis=-1)
    return out.reshape(out.shape[-1]) if squeeze else out


def lde_encode(h, lde: LdeLayer, z_floor: float = 1e-8) -> Tensor:
    """Encode (T, 512) or (N, T, 512) frames into a 512-d vector per sequence.

    Per-frame assignment weights softmax-normalize ``-s_c * ||h_t - mu_c||^2``
    over components; component residual means are concatenated and projected.
    """
    h = h if isinstance(h, Tensor) else Tensor(h)
    squeeze = h.ndim == 2
    if squeeze:
        h = h.reshape((1,) + h.shape)
    if h.shape[-1] != lde.DIM:
        raise ad.ShapeError(f"LDE expects {lde.DIM}-d frames, got {h.shape[-1]}")
    centers = lde.params["lde.centers"]
    scales = ad.exp(lde.params["lde.log_scales"])
    h_sq = (h * h).sum(axis=-1, keepdims=True)
    c_sq = (centers * centers).sum(axis=-1)
    cross = h @ centers.swap_last_axes()
    d2 = h_sq + c_sq - 2.0 * cross
    weights = ad.softmax(-(d2 * scales), axis=-1)
    z = ad.maximum(weights.sum(axis=1), z_floor)
    pooled = weights.swap_last_axes() @ h
    n = h.shape[0]
    residuals = pooled / z.reshape(n, lde.components, 1) - centers
    flat = residuals.reshape(n, lde.components * lde.DIM)
    out = ad.affine(flat, lde.params["lde.proj.weight"], lde.params["lde.proj.bias"])
    return out.reshape(out.shape[-1]) if squeeze else out


def assignment_weights(h: np.ndarray, lde: LdeLayer) -> np.ndarray:
    """Per-frame (T, C) component assignment weights; rows sum to one."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != lde.DIM:
        raise ad.ShapeError(f"expected (T, {lde.DIM}) frames, got {h.shape}")
    centers = lde.params["lde.centers"].data
    scales = np.exp(lde.params["lde.log_scales"].data)
    d2 = (
        (h * h).sum(axis=-1, keepdims=True)
        + (centers * centers).sum(axis=-1)
        - 2.0 * h @ centers.T
    )
    logits = -d2 * scales
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _vector(t: Tensor) -> np.ndarray:
    return np.asarray(t.data, dtype=np.float64).copy()


def extract_utterance(out: TeacherOutput, utterance_id: str = "") -> SpeakerEmbedding:
    """Utterance embedding: the first fully-connected pre-activation output."""
    return SpeakerEmbedding(
        kind=EmbeddingKind("utterance"), vector=_vector(out.fc1), utterance_id=utterance_id
    )


def extract_frame_bn(
    out: TeacherOutput, layer: int, cmn: CmnConfig | None = None, utterance_id: str = ""
) -> tuple[EmbeddingSequence, SpeakerEmbedding]:
    """Bottleneck embeddings from TDNN layer 4 (narrow) or 5 (wide).

    Returns the (optionally mean-normalized) frame sequence together with its
    frame-average vector.
    """
    if layer == 4:
        kind = EmbeddingKind("narrow_bn", mean_norm=cmn.enabled if cmn else False)
    elif layer == 5:
        kind = EmbeddingKind("wide_bn", mean_norm=cmn.enabled if cmn else False)
    else:
        raise ValueError(f"bottleneck layer must be 4 or 5, got {layer}")
    frames = _vector_frames(out.tdnn[layer - 1])
    if cmn is not None:
        frames = apply_cmn(frames, cmn)
    seq = EmbeddingSequence(kind=kind, frames=frames)
    vec = SpeakerEmbedding(kind=kind, vector=frames.mean(axis=0), utterance_id=utterance_id)
    return seq, vec


def _vector_frames(t: Tensor) -> np.ndarray:
    frames = np.asarray(t.data, dtype=np.float64)
    if frames.ndim != 2:
        raise ValueError("frame extraction expects an unbatched teacher forward")
    return frames.copy()


def aggregate(
    out: TeacherOutput,
    spec: AggregationSpec,
    lde: LdeLayer | None = None,
    utterance_id: str = "",
) -> SpeakerEmbedding:
    """Equal-weighted average of the pooling operator over TDNN layers 1..k."""
    for i in range(spec.k):
        if out.tdnn[i].shape[-1] != 512:
            raise ad.ShapeError(
                f"aggregation expects 512-wide layers, layer {i + 1} is {out.tdnn[i].shape[-1]}"
            )
    if spec.operator == "lde":
        if lde is None:
            raise ValueError("LDE aggregation requires an LdeLayer")
        pooled = [lde_encode(out.tdnn[i], lde) for i in range(spec.k)]
        kind = EmbeddingKind("lde_aggr")
    else:
        pooled = [statistics_pool(out.tdnn[i]) for i in range(spec.k)]
        kind = EmbeddingKind("sp_aggr")
    total = pooled[0]
    for p in pooled[1:]:
        total = total + p
    vec = _vector(total) / spec.k
    return SpeakerEmbedding(kind=kind, vector=vec, utterance_id=utterance_id)


def compose(parts, allow_partial: bool = False) -> SpeakerEmbedding:
    """Concatenate embeddings in the fixed order into a composite vector.

    All five kinds are required unless ``allow_partial``; the order must
    always follow ``COMPOSE_ORDER`` and frame-level parts must agree on the
    mean-normalization flag.
    """
    parts = list(parts)
    if not parts:
        raise ValueError("cannot compose an empty part list")
    variants = [p.kind.variant for p in parts]
    positions = []
    for v in variants:
        if v not in COMPOSE_ORDER:
            raise ValueError(f"'{v}' cannot be part of a composite")
        positions.append(COMPOSE_ORDER.index(v))
    if positions != sorted(set(positions)) or len(set(positions)) != len(positions):
        raise ValueError(f"composite parts out of order: {variants}")
    if not allow_partial and tuple(variants) != COMPOSE_ORDER:
        missing = [v for v in COMPOSE_ORDER if v not in variants]
        raise ValueError(f"composite is missing parts: {missing}")
    frame_flags = {p.kind.mean_norm for p in parts if p.kind.variant in FRAME_LEVEL_VARIANTS}
    if len(frame_flags) > 1:
        raise ValueError("frame-level parts disagree on mean normalization")
    mean_norm = frame_flags.pop() if frame_flags else False
    vector = np.concatenate([p.vector for p in parts])
    ids = {p.utterance_id for p in parts if p.utterance_id}
    if len(ids) > 1:
        raise ValueError(f"composite parts come from different utterances: {sorted(ids)}")
    return SpeakerEmbedding(
        kind=EmbeddingKind("composite", mean_norm=mean_norm),
        vector=vector,
        utterance_id=ids.pop() if ids else "",
    )
