"""Binary model checkpoints and embedding/feature archives.

Checkpoints carry the magic ``XVKD``, a format version, a JSON architecture
descriptor, and a named list of row-major 32-bit little-endian arrays
(trainable parameters plus normalization buffers).  Round-trips are bit-exact
at 32-bit precision.  Corrupt inputs raise typed errors rather than crashing.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .embeddings import EmbeddingKind, LdeLayer
from .models import StudentModel, TeacherModel

__all__ = [
    "CheckpointError",
    "CheckpointFormatError",
    "CheckpointVersionError",
    "CheckpointTruncatedError",
    "CheckpointMismatchError",
    "save_checkpoint",
    "load_checkpoint",
    "write_embeddings",
    "read_embeddings",
    "write_embeddings_csv",
    "write_features",
    "read_features",
    "MAGIC",
    "FORMAT_VERSION",
]

MAGIC = b"XVKD"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Base class for checkpoint problems."""


class CheckpointFormatError(CheckpointError):
    """Unknown magic or malformed structure."""


class CheckpointVersionError(CheckpointError):
    """Format version not supported by this build."""


class CheckpointTruncatedError(CheckpointError):
    """The file ended before the declared data."""


class CheckpointMismatchError(CheckpointError):
    """Stored entries do not match the architecture descriptor."""


def _descriptor(model) -> dict:
    if isinstance(model, TeacherModel):
        return {
            "model": "teacher",
            "n_speakers": model.n_speakers,
            "contexts": [list(c) for c in model.contexts],
        }
    if isinstance(model, StudentModel):
        desc = {"model": "student", "d_out": model.d_out}
        if model.kind is not None:
            desc["kind"] = model.kind.variant
            desc["mean_norm"] = model.kind.mean_norm
        return desc
    if isinstance(model, LdeLayer):
        return {"model": "lde", "components": model.components}
    raise CheckpointError(f"cannot serialize a {type(model).__name__}")


def _entries(model) -> list[tuple[str, np.ndarray]]:
    out = [(name, p.data) for name, p in model.params.items()]
    for name, buf in getattr(model, "buffers", {}).items():
        out.append((name, buf))
    return out


def save_checkpoint(model, path) -> None:
    """Write the model's parameters and buffers in 32-bit form."""
    entries = _entries(model)
    desc = json.dumps(_descriptor(model), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(desc)))
        fh.write(desc)
        fh.write(struct.pack("<I", len(entries)))
        for name, data in entries:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def _read_exact(fh, count: int, what: str) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise CheckpointTruncatedError(f"file ended while reading {what}")
    return buf


def load_checkpoint(path):
    """Reconstruct a model from a checkpoint, validating every entry."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MAGIC:
            raise CheckpointFormatError(f"bad magic {magic!r}; expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != FORMAT_VERSION:
            raise CheckpointVersionError(f"unsupported format version {version}")
        (desc_len,) = struct.unpack("<I", _read_exact(fh, 4, "descriptor length"))
        try:
            desc = json.loads(_read_exact(fh, desc_len, "descriptor"))
        except json.JSONDecodeError as err:
            raise CheckpointFormatError(f"descriptor is not valid JSON: {err}") from err
        (n_entries,) = struct.unpack("<I", _read_exact(fh, 4, "entry count"))
        stored: dict[str, np.ndarray] = {}
        for _ in range(n_entries):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "entry name length"))
            name = _read_exact(fh, name_len, "entry name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, f"rank of '{name}'"))
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4, f"dims of '{name}'"))[0]
                for _ in range(rank)
            )
            count = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, 4 * count, f"values of '{name}'")
            stored[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    return _rebuild(desc, stored)


def _rebuild(desc: dict, stored: dict[str, np.ndarray]):
    kind = desc.get("model")
    if kind == "teacher":
        model = TeacherModel(
            n_speakers=int(desc["n_speakers"]),
            contexts=[tuple(c) for c in desc["contexts"]],
        )
    elif kind == "student":
        ek = None
        if "kind" in desc:
            ek = EmbeddingKind(desc["kind"], mean_norm=bool(desc.get("mean_norm", False)))
        model = StudentModel(d_out=int(desc["d_out"]), kind=ek)
    elif kind == "lde":
        model = LdeLayer(components=int(desc["components"]))
    else:
        raise CheckpointFormatError(f"descriptor names unknown model kind {kind!r}")
    expected: dict[str, np.ndarray] = {name: p.data for name, p in model.params.items()}
    for name, buf in getattr(model, "buffers", {}).items():
        expected[name] = buf
    for name in expected:
        if name not in stored:
            raise CheckpointMismatchError(f"checkpoint is missing parameter '{name}'")
        if stored[name].shape != expected[name].shape:
            raise CheckpointMismatchError(
                f"parameter '{name}' has shape {stored[name].shape}, "
                f"descriptor implies {expected[name].shape}"
            )
    for name in stored:
        if name not in expected:
            raise CheckpointMismatchError(f"checkpoint has unexpected entry '{name}'")
    for name, p in model.params.items():
        p.data = stored[name]
    for name in getattr(model, "buffers", {}):
        model.buffers[name] = stored[name]
    return model


# -- embedding and feature archives -------------------------------------------

def write_embeddings(path, items) -> None:
    """Binary records of (id, dim, 32-bit little-endian values)."""
    with open(path, "wb") as fh:
        for utt_id, vector in items:
            encoded = utt_id.encode("utf-8")
            vec = np.ascontiguousarray(np.asarray(vector).reshape(-1), dtype="<f4")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", vec.size))
            fh.write(vec.tobytes())


def read_embeddings(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        while True:
            head = fh.read(2)
            if not head:
                return out
            if len(head) != 2:
                raise CheckpointTruncatedError("embedding archive ended mid-record")
            (name_len,) = struct.unpack("<H", head)
            name = _read_exact(fh, name_len, "embedding id").decode("utf-8")
            (dim,) = struct.unpack("<I", _read_exact(fh, 4, f"dim of '{name}'"))
            raw = _read_exact(fh, 4 * dim, f"values of '{name}'")
            out[name] = np.frombuffer(raw, dtype="<f4").astype(np.float64)


def write_embeddings_csv(path, items) -> None:
    """CSV export mode: one `id,v0,v1,...` row per embedding."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for utt_id, vector in items:
            values = ",".join(repr(float(v)) for v in np.asarray(vector).reshape(-1))
            fh.write(f"{utt_id},{values}\n")


def write_features(path, utterances) -> None:
    """Binary records of (id, speaker, frame count, dim, 32-bit values)."""
    with open(path, "wb") as fh:
        for utt in utterances:
            for text in (utt.utterance_id, utt.speaker):
                encoded = text.encode("utf-8")
                fh.write(struct.pack("<H", len(encoded)))
                fh.write(encoded)
            frames = np.ascontiguousarray(utt.features, dtype="<f4")
            fh.write(struct.pack("<II", frames.shape[0], frames.shape[1]))
            fh.write(frames.tobytes())


def read_features(path):
    """Yield utterances from a feature archive (float32 storage)."""
    from .corpus import Utterance

    out = []
    with open(path, "rb") as fh:
        while True:
            head = fh.read(2)
            if not head:
                return out
            if len(head) != 2:
                raise CheckpointTruncatedError("feature archive ended mid-record")
            (id_len,) = struct.unpack("<H", head)
            utt_id = _read_exact(fh, id_len, "utterance id").decode("utf-8")
            (spk_len,) = struct.unpack("<H", _read_exact(fh, 2, "speaker length"))
            speaker = _read_exact(fh, spk_len, "speaker").decode("utf-8")
            n_frames, dim = struct.unpack("<II", _read_exact(fh, 8, "frame shape"))
            raw = _read_exact(fh, 4 * n_frames * dim, f"frames of '{utt_id}'")
            frames = np.frombuffer(raw, dtype="<f4").reshape(n_frames, dim)
            out.append(Utterance(utterance_id=utt_id, speaker=speaker, features=frames.copy()))
