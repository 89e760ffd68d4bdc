"""Teacher x-vector network and the compact fully-connected student.

The teacher stacks five TDNN layers (each affine-over-context, ReLU, then
batch normalization), an attentive statistics pooling layer, and two
utterance-level affine layers, trained with additive-angular-margin softmax.
The student is eight plain affine layers with ReLU between them and no
pooling or residual connections.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

__all__ = [
    "TDNN_SPECS",
    "FEAT_DIM",
    "EMBED_DIM",
    "POOLED_DIM",
    "ATTENTION_HIDDEN",
    "STUDENT_HIDDEN",
    "STUDENT_LAYERS",
    "AamConfig",
    "TeacherModel",
    "TeacherOutput",
    "StudentModel",
    "teacher_forward",
    "student_forward",
    "attentive_stats_pool",
    "aam_loss",
    "count_params",
    "param_digest",
    "ConfigurationError",
]

FEAT_DIM = 40
EMBED_DIM = 512
ATTENTION_HIDDEN = 128
STUDENT_HIDDEN = 256
STUDENT_LAYERS = 8

# name, context offsets, input width, output width
TDNN_SPECS = (
    ("tdnn1", (-2, -1, 0, 1, 2), FEAT_DIM, 512),
    ("tdnn2", (-2, 0, 2), 512, 512),
    ("tdnn3", (-3, 0, 3), 512, 512),
    ("tdnn4", (0,), 512, 512),
    ("tdnn5", (0,), 512, 1500),
)
POOLED_DIM = 2 * TDNN_SPECS[-1][3]

_POOL_VAR_FLOOR = 1e-10
_COS_CLIP = 1e-7


class ConfigurationError(ValueError):
    """Model configuration or input width does not match the architecture."""


@dataclass(frozen=True)
class AamConfig:
    """Additive-angular-margin softmax settings."""

    n_speakers: int
    margin: float = 0.2
    scale: float = 30.0

    def __post_init__(self):
        if not 0.0 <= self.margin < math.pi / 2:
            raise ValueError(f"margin must be in [0, pi/2), got {self.margin}")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.n_speakers < 2:
            raise ValueError("need at least two speakers")


def _he_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class TeacherModel:
    """Vanilla TDNN x-vector encoder with an AAM classification head."""

    def __init__(self, n_speakers: int, seed: int = 0, contexts=None):
        if n_speakers < 2:
            raise ConfigurationError("teacher needs at least two speakers")
        self.n_speakers = int(n_speakers)
        self.contexts = tuple(
            tuple(c) for c in (contexts if contexts is not None else [s[1] for s in TDNN_SPECS])
        )
        if len(self.contexts) != len(TDNN_SPECS):
            raise ConfigurationError(f"expected {len(TDNN_SPECS)} context tuples")
        rng = np.random.default_rng(seed)
        self.params: dict[str, Parameter] = {}
        self.buffers: dict[str, np.ndarray] = {}
        for (name, _, d_in, d_out), ctx in zip(TDNN_SPECS, self.contexts):
            k = len(ctx)
            self._add(name + ".weight", _he_init(rng, k * d_in, (k * d_in, d_out)))
            self._add(name + ".bias", np.zeros(d_out))
            self._add(name + ".bn.gamma", np.ones(d_out))
            self._add(name + ".bn.beta", np.zeros(d_out))
            self.buffers[name + ".bn.running_mean"] = np.zeros(d_out)
            self.buffers[name + ".bn.running_var"] = np.ones(d_out)
        wide = TDNN_SPECS[-1][3]
        self._add("pool.weight", _he_init(rng, wide, (wide, ATTENTION_HIDDEN)))
        self._add("pool.bias", np.zeros(ATTENTION_HIDDEN))
        self._add("pool.context", rng.normal(0.0, 0.1, size=(ATTENTION_HIDDEN, 1)))
        self._add("fc1.weight", _he_init(rng, POOLED_DIM, (POOLED_DIM, EMBED_DIM)))
        self._add("fc1.bias", np.zeros(EMBED_DIM))
        self._add("fc2.weight", _he_init(rng, EMBED_DIM, (EMBED_DIM, EMBED_DIM)))
        self._add("fc2.bias", np.zeros(EMBED_DIM))
        self._add(
            "head.weight",
            rng.normal(0.0, 1.0 / math.sqrt(EMBED_DIM), size=(EMBED_DIM, n_speakers)),
        )

    def _add(self, name: str, data: np.ndarray) -> None:
        if name in self.params:
            raise ConfigurationError(f"duplicate parameter name '{name}'")
        self.params[name] = Parameter(name, data)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def param_count(self, include_head: bool = False) -> int:
        """Total trainable parameters; the classification head is excluded
        from the reported model size by default."""
        return sum(
            p.size for p in self.params.values() if include_head or not p.name.startswith("head.")
        )


@dataclass
class TeacherOutput:
    """All teacher intermediates needed downstream.

    ``tdnn`` holds the five frame-level layer outputs (post ReLU+BN);
    ``fc1`` and ``fc2`` are the pre-activation utterance-level outputs.
    """

    tdnn: tuple[Tensor, ...]
    pooled: Tensor
    fc1: Tensor
    fc2: Tensor


def attentive_stats_pool(
    h: Tensor, weight: Tensor, bias: Tensor, context: Tensor, var_floor: float = _POOL_VAR_FLOOR
) -> Tensor:
    """Attention-weighted mean and standard deviation over frames.

    ``h`` is (T, d) or (N, T, d); the result is (2d,) or (N, 2d).  Attention
    scores are ``context . tanh(W h_t + b)`` softmax-normalized over frames.
    """
    h = h if isinstance(h, Tensor) else Tensor(h)
    squeeze = h.ndim == 2
    if squeeze:
        h = h.reshape((1,) + h.shape)
    n, t, d = h.shape
    scores = ad.affine(h, weight, bias)
    scores = ad.tanh(scores) @ context
    alpha = ad.softmax(scores.reshape(n, t), axis=-1).reshape(n, t, 1)
    mean = (alpha * h).sum(axis=1)
    sq = (alpha * h * h).sum(axis=1)
    std = ad.sqrt(ad.maximum(sq - mean * mean, var_floor))
    out = ad.concat([mean, std], axis=-1)
    return out.reshape(2 * d) if squeeze else out


def teacher_forward(model: TeacherModel, feats, training: bool = False) -> TeacherOutput:
    """Run the teacher on (T, 40) or batched (N, T, 40) features.

    Every frame-level intermediate is exposed for embedding extraction.
    """
    x = feats if isinstance(feats, Tensor) else Tensor(feats)
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 3 or x.shape[-1] != FEAT_DIM:
        raise ConfigurationError(f"expected (..., T, {FEAT_DIM}) features, got {x.shape}")
    if x.shape[-2] < 1:
        raise ConfigurationError("empty feature sequence")
    tdnn_outs = []
    for (name, _, _, _), ctx in zip(TDNN_SPECS, model.contexts):
        x = ad.tdnn_conv(x, model.params[name + ".weight"], model.params[name + ".bias"], ctx)
        x = ad.relu(x)
        x = ad.batch_norm(
            x,
            model.params[name + ".bn.gamma"],
            model.params[name + ".bn.beta"],
            model.buffers[name + ".bn.running_mean"],
            model.buffers[name + ".bn.running_var"],
            training=training,
        )
        tdnn_outs.append(x)
    pooled = attentive_stats_pool(
        tdnn_outs[-1],
        model.params["pool.weight"],
        model.params["pool.bias"],
        model.params["pool.context"],
    )
    fc1 = ad.affine(pooled, model.params["fc1.weight"], model.params["fc1.bias"])
    fc2 = ad.affine(ad.relu(fc1), model.params["fc2.weight"], model.params["fc2.bias"])
    if squeeze:
        tdnn_outs = [o.reshape(o.shape[1:]) for o in tdnn_outs]
        pooled = pooled.reshape(pooled.shape[-1])
        fc1 = fc1.reshape(fc1.shape[-1])
        fc2 = fc2.reshape(fc2.shape[-1])
    return TeacherOutput(tdnn=tuple(tdnn_outs), pooled=pooled, fc1=fc1, fc2=fc2)


def aam_loss(embedding, labels, cfg: AamConfig, weight: Tensor) -> Tensor:
    """Additive-angular-margin softmax loss, averaged over the batch.

    Both the embeddings and the class weight columns are length-normalized
    internally; the margin is added to the target-class angle only.
    """
    e = embedding if isinstance(embedding, Tensor) else Tensor(embedding)
    if e.ndim == 1:
        e = e.reshape(1, e.shape[0])
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.min() < 0 or labels.max() >= cfg.n_speakers:
        raise ValueError(f"label out of range [0, {cfg.n_speakers})")
    if e.shape[0] != labels.shape[0]:
        raise ad.ShapeError("one label per embedding required")
    e_norm = e / ad.sqrt((e * e).sum(axis=-1, keepdims=True))
    w_norm = weight / ad.sqrt((weight * weight).sum(axis=0, keepdims=True))
    cos = ad.clip(e_norm @ w_norm, -1.0 + _COS_CLIP, 1.0 - _COS_CLIP)
    cos_m, sin_m = math.cos(cfg.margin), math.sin(cfg.margin)
    phi = cos * cos_m - ad.sqrt(1.0 - cos * cos) * sin_m
    onehot = np.zeros((labels.shape[0], cfg.n_speakers))
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    logits = (phi * onehot + cos * (1.0 - onehot)) * cfg.scale
    per_sample = ad.logsumexp(logits, axis=-1) - (logits * onehot).sum(axis=-1)
    return per_sample.mean()


class StudentModel:
    """Eight affine layers, 256 wide, ReLU between and none after the last."""

    def __init__(self, d_out: int, seed: int = 0, kind=None):
        if d_out < 1:
            raise ConfigurationError("d_out must be positive")
        self.d_out = int(d_out)
        self.kind = kind
        rng = np.random.default_rng(seed)
        widths = [FEAT_DIM] + [STUDENT_HIDDEN] * (STUDENT_LAYERS - 1) + [self.d_out]
        self.params: dict[str, Parameter] = {}
        for i in range(STUDENT_LAYERS):
            d_in, d_o = widths[i], widths[i + 1]
            name = f"layer{i + 1}"
            self.params[name + ".weight"] = Parameter(
                name + ".weight", _he_init(rng, d_in, (d_in, d_o))
            )
            self.params[name + ".bias"] = Parameter(name + ".bias", np.zeros(d_o))

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())


def student_forward(model: StudentModel, feats) -> Tensor:
    """Map each frame independently through the student network."""
    x = feats if isinstance(feats, Tensor) else Tensor(feats)
    if x.shape[-1] != FEAT_DIM:
        raise ConfigurationError(f"expected (..., {FEAT_DIM}) features, got {x.shape}")
    for i in range(STUDENT_LAYERS):
        name = f"layer{i + 1}"
        x = ad.affine(x, model.params[name + ".weight"], model.params[name + ".bias"])
        if i < STUDENT_LAYERS - 1:
            x = ad.relu(x)
    return x


def count_params(model) -> int:
    """Sum of parameter element counts, biases and normalization included."""
    if hasattr(model, "params"):
        return sum(p.size for p in model.params.values())
    return sum(p.size for p in model)


def param_digest(model) -> str:
    """SHA-256 over all parameter buffers, in name order."""
    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(model.params[name].data).tobytes())
    return h.hexdigest()
