"""End-to-end experiment: teacher training, distillation, PLDA scoring,
and the per-system report.

Stages run sequentially and deterministically for a given seed; any stage
failure aborts with the stage name and its cause.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Parameter
from .config import ExperimentConfig
from .corpus import Corpus, TrialList, gen_corpus, write_trials
from .distill import (
    DistillConfig,
    build_target_cache,
    corpus_chunks,
    distill_student,
)
from .embeddings import EmbeddingKind, LdeLayer, lde_encode
from .features import chunk
from .metrics import DcfParams, ScoreSet, compute_det, det_to_csv, eer, min_dcf
from .models import (
    AamConfig,
    StudentModel,
    TeacherModel,
    aam_loss,
    teacher_forward,
)
from .optim import Adam
from .plda import (
    LabeledEmbeddingSet,
    center_normalize,
    length_normalize,
    plda_score_matrix,
    plda_train,
)
from .serialization import save_checkpoint, write_embeddings

__all__ = [
    "SYSTEMS",
    "TEACHER_BASELINE_PARAMS",
    "SystemResult",
    "ExperimentReport",
    "StageError",
    "train_teacher",
    "run_experiment",
    "system_kind",
    "system_label",
]

log = logging.getLogger("xvkd.pipeline")

# published baseline size used as the size-reduction denominator
TEACHER_BASELINE_PARAMS = 5_900_000

# the nine student systems of the standard report
SYSTEMS: tuple[tuple[str, bool | None], ...] = (
    ("utterance", None),
    ("narrow_bn", False),
    ("narrow_bn", True),
    ("wide_bn", False),
    ("wide_bn", True),
    ("sp_aggr", None),
    ("lde_aggr", None),
    ("composite", False),
    ("composite", True),
)


class StageError(RuntimeError):
    """A pipeline stage failed; the message carries the stage name."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


def system_kind(variant: str, mean_norm: bool | None) -> EmbeddingKind:
    return EmbeddingKind(variant, mean_norm=bool(mean_norm))


def system_label(variant: str, mean_norm: bool | None) -> str:
    return system_kind(variant, mean_norm).label


def _subseed(master: int, *key: int) -> int:
    return int(np.random.SeedSequence((master,) + key).generate_state(1)[0])


@dataclass
class SystemResult:
    """One report row: a scored verification system."""

    label: str
    variant: str
    mean_norm: bool | None
    parameters: int
    eer_percent: float
    min_dcf: float
    size_reduction: float | None


@dataclass
class ExperimentReport:
    """Teacher row plus one row per configured student system."""

    rows: list[SystemResult]

    def student_rows(self) -> list[SystemResult]:
        return [r for r in self.rows if r.variant != "teacher"]

    def to_csv_text(self) -> str:
        lines = ["system,mean_norm,parameters,size_reduction_percent,eer_percent,min_dcf"]
        for r in self.rows:
            norm = "-" if r.mean_norm is None else ("yes" if r.mean_norm else "no")
            red = "" if r.size_reduction is None else f"{100.0 * r.size_reduction:.4f}"
            lines.append(
                f"{r.label},{norm},{r.parameters},{red},{r.eer_percent:.6f},{r.min_dcf:.6f}"
            )
        return "\n".join(lines) + "\n"

    def to_table_text(self) -> str:
        headers = ("System", "MeanNorm", "Params", "SizeRed%", "EER%", "minDCF")
        body = []
        for r in self.rows:
            norm = "-" if r.mean_norm is None else ("yes" if r.mean_norm else "no")
            red = "-" if r.size_reduction is None else f"{100.0 * r.size_reduction:.2f}"
            body.append(
                (r.label, norm, f"{r.parameters:,}", red, f"{r.eer_percent:.3f}", f"{r.min_dcf:.4f}")
            )
        widths = [max(len(h), *(len(row[i]) for row in body)) for i, h in enumerate(headers)]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths)
        lines = [fmt.format(*headers), fmt.format(*("-" * w for w in widths))]
        lines += [fmt.format(*row) for row in body]
        return "\n".join(lines) + "\n"


# -- teacher training ----------------------------------------------------------

def train_teacher(
    train_corpus: Corpus, cfg: ExperimentConfig
) -> tuple[TeacherModel, LdeLayer]:
    """Train the TDNN teacher with the angular-margin objective.

    The dictionary-encoding layer is trained jointly through an auxiliary
    classification head on its aggregated embedding; the head is discarded
    afterwards.
    """
    speakers = train_corpus.speakers
    spk_index = {s: i for i, s in enumerate(speakers)}
    chunks, labels = [], []
    for utt in train_corpus:
        for piece in chunk(utt.features, cfg.distill.chunk_frames):
            chunks.append(piece.astype(np.float32))
            labels.append(spk_index[utt.speaker])
    chunks = np.stack(chunks)
    labels = np.asarray(labels, dtype=np.int64)

    teacher = TeacherModel(n_speakers=len(speakers), seed=_subseed(cfg.seed, 1))
    lde = LdeLayer(components=cfg.teacher.lde_components, seed=_subseed(cfg.seed, 2))
    aam = AamConfig(
        n_speakers=len(speakers), margin=cfg.teacher.aam_margin, scale=cfg.teacher.aam_scale
    )
    rng = np.random.default_rng(_subseed(cfg.seed, 3))
    aux_head = Parameter(
        "lde_head.weight",
        rng.normal(0.0, 1.0 / np.sqrt(512.0), size=(512, len(speakers))),
    )
    params = teacher.parameters()
    use_lde_loss = cfg.teacher.lde_loss_weight > 0.0
    if use_lde_loss:
        params = params + lde.parameters() + [aux_head]
    opt = Adam(params, learning_rate=cfg.teacher.learning_rate)
    n = chunks.shape[0]
    batch = min(cfg.teacher.batch_chunks, n)
    for epoch in range(1, cfg.teacher.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for _ in range(cfg.teacher.steps_per_epoch):
            idx = rng.choice(n, size=batch, replace=False)
            feats = np.asarray(chunks[idx], dtype=np.float64)
            out = teacher_forward(teacher, feats, training=True)
            loss = aam_loss(out.fc2, labels[idx], aam, teacher.params["head.weight"])
            if use_lde_loss:
                agg = lde_encode(out.tdnn[0], lde)
                for i in range(1, 4):
                    agg = agg + lde_encode(out.tdnn[i], lde)
                agg = agg * 0.25
                loss = loss + cfg.teacher.lde_loss_weight * aam_loss(
                    agg, labels[idx], aam, aux_head
                )
            loss.backward()
            opt.step()
            losses.append(loss.item())
        log.info(
            "teacher epoch=%d mean_loss=%.4f wall=%.1fs",
            epoch,
            float(np.mean(losses)),
            time.perf_counter() - t0,
        )
    return teacher, lde


# -- embedding extraction ------------------------------------------------------

def teacher_utterance_embeddings(
    teacher: TeacherModel, utterances, batch_size: int = 8
) -> dict[str, np.ndarray]:
    """Utterance embeddings (fc1 pre-activation) for whole utterances."""
    from .autodiff import no_grad

    out: dict[str, np.ndarray] = {}
    utterances = list(utterances)
    with no_grad():
        for lo in range(0, len(utterances), batch_size):
            group = utterances[lo : lo + batch_size]
            feats = np.stack([np.asarray(u.features, dtype=np.float64) for u in group])
            fwd = teacher_forward(teacher, feats, training=False)
            for u, vec in zip(group, fwd.fc1.data):
                out[u.utterance_id] = np.asarray(vec, dtype=np.float64)
    return out


def student_embeddings(
    student: StudentModel, utterances, batch_size: int = 16
) -> dict[str, np.ndarray]:
    """Frame-averaged student embeddings, batched over equal-length utterances."""
    from .autodiff import no_grad
    from .models import student_forward

    by_length: dict[int, list] = {}
    for u in utterances:
        by_length.setdefault(u.features.shape[0], []).append(u)
    out: dict[str, np.ndarray] = {}
    with no_grad():
        for group in by_length.values():
            for lo in range(0, len(group), batch_size):
                batch = group[lo : lo + batch_size]
                feats = np.stack([np.asarray(u.features, dtype=np.float64) for u in batch])
                vecs = student_forward(student, feats).data.mean(axis=1)
                for u, vec in zip(batch, vecs):
                    out[u.utterance_id] = np.asarray(vec, dtype=np.float64)
    return out


def _backend_subset(corpus: Corpus, n_utterances: int) -> list:
    """Deterministic per-speaker round-robin subset with full speaker coverage."""
    by_speaker: dict[str, list] = {}
    for utt in corpus:
        by_speaker.setdefault(utt.speaker, []).append(utt)
    chosen, depth = [], 0
    while len(chosen) < n_utterances:
        added = False
        for utts in by_speaker.values():
            if depth < len(utts):
                chosen.append(utts[depth])
                added = True
                if len(chosen) == n_utterances:
                    break
        if not added:
            break
        depth += 1
    return chosen


def _labeled_set(embeddings: dict[str, np.ndarray], utterances) -> LabeledEmbeddingSet:
    speakers = sorted({u.speaker for u in utterances})
    index = {s: i for i, s in enumerate(speakers)}
    ids = [u.utterance_id for u in utterances]
    return LabeledEmbeddingSet(
        vectors=np.stack([embeddings[i] for i in ids]),
        speaker_labels=np.asarray([index[u.speaker] for u in utterances]),
        utterance_ids=ids,
    )


def backend_evaluate(
    train_set: LabeledEmbeddingSet,
    eval_embeddings: dict[str, np.ndarray],
    trials: TrialList,
    plda_iterations: int,
    length_norm: bool,
    dcf: DcfParams,
):
    """PLDA-train on the labeled set, score the trials, compute EER/minDCF."""
    centered, mean = center_normalize(train_set, length_norm=length_norm)
    model = plda_train(centered, iterations=plda_iterations)
    ids = sorted(eval_embeddings)
    mat = np.stack([eval_embeddings[i] for i in ids]) - mean
    if length_norm:
        mat = length_normalize(mat)
    row = {utt_id: i for i, utt_id in enumerate(ids)}
    enroll = np.stack([mat[row[t.enroll_id]] for t in trials])
    test = np.stack([mat[row[t.test_id]] for t in trials])
    scores = plda_score_matrix(model, enroll, test)
    labels = np.asarray([t.target for t in trials], dtype=bool)
    score_set = ScoreSet(target_scores=scores[labels], nontarget_scores=scores[~labels])
    curve = compute_det(score_set)
    return eer(curve), min_dcf(curve, dcf), scores, curve, model


# -- the full experiment -------------------------------------------------------

def _distill_subset(corpus: Corpus, n_utterances: int, seed: int) -> list:
    rng = np.random.default_rng(seed)
    utterances = list(corpus)
    order = rng.permutation(len(utterances))
    return [utterances[i] for i in order[: min(n_utterances, len(utterances))]]


def run_experiment(cfg: ExperimentConfig, outdir: str | Path | None = None) -> ExperimentReport:
    """Execute the full teacher/student/backend pipeline and build the report."""
    out_path = Path(outdir) if outdir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    def stage(name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            result = fn(*args, **kwargs)
        except Exception as err:
            raise StageError(name, err) from err
        log.info("stage %s done in %.1fs", name, time.perf_counter() - t0)
        return result

    train_corpus, eval_corpus, trials = stage("gen-data", gen_corpus, cfg.corpus)
    if out_path is not None:
        write_trials(trials, out_path / "trials.txt")

    teacher, lde = stage("train-teacher", train_teacher, train_corpus, cfg)
    if out_path is not None:
        save_checkpoint(teacher, out_path / "teacher.ckpt")
        save_checkpoint(lde, out_path / "lde.ckpt")

    backend_utts = _backend_subset(train_corpus, cfg.backend.n_utterances)
    eval_utts = list(eval_corpus)

    def teacher_system():
        train_embs = teacher_utterance_embeddings(teacher, backend_utts)
        eval_embs = teacher_utterance_embeddings(teacher, eval_utts)
        if out_path is not None:
            write_embeddings(
                out_path / "teacher_eval_embeddings.bin", sorted(eval_embs.items())
            )
        train_set = _labeled_set(train_embs, backend_utts)
        return backend_evaluate(
            train_set,
            eval_embs,
            trials,
            cfg.backend.plda_iterations,
            cfg.backend.length_norm,
            cfg.dcf,
        )

    teacher_eer, teacher_dcf, teacher_scores, teacher_curve, _ = stage(
        "evaluate-teacher", teacher_system
    )
    rows = [
        SystemResult(
            label="teacher",
            variant="teacher",
            mean_norm=None,
            parameters=teacher.param_count(include_head=False),
            eer_percent=teacher_eer,
            min_dcf=teacher_dcf,
            size_reduction=None,
        )
    ]
    _write_system_artifacts(out_path, "teacher", trials, teacher_scores, teacher_curve)

    distill_utts = _distill_subset(
        train_corpus, cfg.distill.n_utterances, _subseed(cfg.seed, 10)
    )
    cache = stage(
        "extract",
        lambda: build_target_cache(
            teacher,
            corpus_chunks(distill_utts, cfg.distill.chunk_frames),
            lde=lde,
            batch_size=cfg.distill.batch_chunks,
        ),
    )

    for sys_index, (variant, mean_norm) in enumerate(SYSTEMS):
        kind = system_kind(variant, mean_norm)
        label = kind.label

        def one_system(kind=kind, label=label, sys_index=sys_index):
            dcfg = DistillConfig(
                embedding_kind=kind,
                epochs=cfg.distill.epochs,
                batch_size=cfg.distill.batch_chunks,
                learning_rate=cfg.distill.learning_rate,
                seed=_subseed(cfg.seed, 20, sys_index),
                chunk_frames=cfg.distill.chunk_frames,
                cmn_window=cfg.cmn_window,
            )
            student = distill_student(
                teacher, kind, distill_utts, dcfg, lde=lde, target_cache=cache
            )
            if out_path is not None:
                students_dir = out_path / "students"
                students_dir.mkdir(exist_ok=True)
                save_checkpoint(student, students_dir / f"{_fs_label(label)}.ckpt")
            train_embs = student_embeddings(student, backend_utts)
            eval_embs = student_embeddings(student, eval_utts)
            train_set = _labeled_set(train_embs, backend_utts)
            e, d, scores, curve, _ = backend_evaluate(
                train_set,
                eval_embs,
                trials,
                cfg.backend.plda_iterations,
                cfg.backend.length_norm,
                cfg.dcf,
            )
            return student, e, d, scores, curve

        student, sys_eer, sys_dcf, scores, curve = stage(label, one_system)
        n_params = student.param_count()
        rows.append(
            SystemResult(
                label=label,
                variant=variant,
                mean_norm=mean_norm,
                parameters=n_params,
                eer_percent=sys_eer,
                min_dcf=sys_dcf,
                size_reduction=1.0 - n_params / TEACHER_BASELINE_PARAMS,
            )
        )
        _write_system_artifacts(out_path, label, trials, scores, curve)

    report = ExperimentReport(rows=rows)
    if out_path is not None:
        (out_path / "report.csv").write_text(report.to_csv_text(), encoding="utf-8")
        (out_path / "report.txt").write_text(report.to_table_text(), encoding="utf-8")
        from .reporting import render_report_figures

        stage("report-figures", render_report_figures, report, out_path / "figures")
    return report


def _fs_label(label: str) -> str:
    return label.replace("+", "_")


def _write_system_artifacts(out_path, label, trials, scores, curve) -> None:
    if out_path is None:
        return
    scores_dir = out_path / "scores"
    det_dir = out_path / "det"
    scores_dir.mkdir(exist_ok=True)
    det_dir.mkdir(exist_ok=True)
    name = _fs_label(label)
    with open(scores_dir / f"{name}.txt", "w", encoding="utf-8", newline="") as fh:
        for t, s in zip(trials, scores):
            fh.write(f"{t.enroll_id} {t.test_id} {float(s)!r}\n")
    det_to_csv(curve, det_dir / f"{name}.csv")
