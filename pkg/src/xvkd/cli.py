"""Command-line interface for the distillation toolkit.

Subcommands cover the pipeline stages individually (gen-data, train-teacher,
extract, distill, train-plda, score, evaluate) plus `report`, which runs the
whole experiment and writes the aligned table, the CSV, and summary figures.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .corpus import gen_corpus, read_trials, write_trials
from .distill import DistillConfig, distill_student, student_embed
from .embeddings import (
    AggregationSpec,
    EmbeddingKind,
    VARIANTS,
    aggregate,
    compose,
    extract_frame_bn,
    extract_utterance,
)
from .features import CmnConfig, apply_cmn, melspec, read_wav
from .metrics import ScoreSet, compute_det, det_to_csv, eer, min_dcf
from .models import teacher_forward
from .pipeline import (
    StageError,
    _backend_subset,
    _labeled_set,
    run_experiment,
    system_kind,
)
from .plda import PldaModel, center_normalize, length_normalize, plda_score_matrix, plda_train
from .serialization import (
    load_checkpoint,
    read_features,
    write_embeddings,
    write_embeddings_csv,
    write_features,
)

def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="config file path")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", type=Path, default=Path("."), help="working directory")


def _kind_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--embedding-kind",
        choices=VARIANTS,
        required=True,
        help="which teacher embedding to use",
    )
    parser.add_argument(
        "--mean-norm",
        action="store_true",
        help="apply windowed mean normalization to frame-level embeddings",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xvkd",
        description="Multi-level x-vector knowledge distillation toolkit",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log stage progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus and trial list")
    _common_flags(p)

    p = sub.add_parser("train-teacher", help="train the TDNN teacher (and LDE layer)")
    _common_flags(p)

    p = sub.add_parser("extract", help="extract teacher embeddings")
    _common_flags(p)
    _kind_flags(p)
    p.add_argument("--wav", type=Path, nargs="+", default=None, help="extract from RIFF files")
    p.add_argument("--csv", action="store_true", help="also write a CSV export")

    p = sub.add_parser("distill", help="train a student for one embedding kind")
    _common_flags(p)
    _kind_flags(p)

    p = sub.add_parser("train-plda", help="train the PLDA backend for one system")
    _common_flags(p)
    _kind_flags(p)

    p = sub.add_parser("score", help="score the trial list with a trained system")
    _common_flags(p)
    _kind_flags(p)

    p = sub.add_parser("evaluate", help="compute EER/minDCF from a score file")
    _common_flags(p)
    p.add_argument("--scores", type=Path, required=True, help="score file (id id value)")
    p.add_argument("--trials", type=Path, required=True, help="trial list file")
    p.add_argument("--det-csv", type=Path, default=None, help="write DET points as CSV")

    p = sub.add_parser("report", help="run the full experiment and write the report")
    _common_flags(p)
    return parser


def _label(args) -> str:
    return system_kind(args.embedding_kind, args.mean_norm).label.replace("+", "_")


def _load_corpora(out: Path):
    train_path = out / "train_features.bin"
    eval_path = out / "eval_features.bin"
    if not train_path.exists() or not eval_path.exists():
        raise FileNotFoundError(f"no corpus in {out}; run `xvkd gen-data` first")
    from .corpus import Corpus

    return Corpus(read_features(train_path)), Corpus(read_features(eval_path))


def _load_teacher(out: Path):
    teacher_path = out / "teacher.ckpt"
    if not teacher_path.exists():
        raise FileNotFoundError(f"{teacher_path} missing; run `xvkd train-teacher` first")
    teacher = load_checkpoint(teacher_path)
    lde_path = out / "lde.ckpt"
    lde = load_checkpoint(lde_path) if lde_path.exists() else None
    return teacher, lde


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, seed=args.seed)
    train, evalc, trials = gen_corpus(cfg.corpus)
    args.out.mkdir(parents=True, exist_ok=True)
    write_features(args.out / "train_features.bin", train)
    write_features(args.out / "eval_features.bin", evalc)
    write_trials(trials, args.out / "trials.txt")
    print(
        f"wrote {len(train)} train and {len(evalc)} eval utterances, "
        f"{len(trials)} trials to {args.out}"
    )
    return 0


def cmd_train_teacher(args) -> int:
    from .pipeline import train_teacher
    from .serialization import save_checkpoint

    cfg = load_config(args.config, seed=args.seed)
    train, _ = _load_corpora(args.out)
    teacher, lde = train_teacher(train, cfg)
    save_checkpoint(teacher, args.out / "teacher.ckpt")
    save_checkpoint(lde, args.out / "lde.ckpt")
    print(f"teacher ({teacher.param_count():,} parameters) written to {args.out}")
    return 0


def _teacher_embedding(teacher, lde, feats, kind: EmbeddingKind, cmn_window: int, utt_id: str):
    from .autodiff import no_grad

    with no_grad():
        out = teacher_forward(teacher, np.asarray(feats, dtype=np.float64), training=False)
        cmn = CmnConfig(window_frames=cmn_window, enabled=kind.mean_norm)
        if kind.variant == "utterance":
            return extract_utterance(out, utterance_id=utt_id)
        if kind.variant == "narrow_bn":
            return extract_frame_bn(out, 4, cmn, utterance_id=utt_id)[1]
        if kind.variant == "wide_bn":
            return extract_frame_bn(out, 5, cmn, utterance_id=utt_id)[1]
        if kind.variant == "sp_aggr":
            return aggregate(out, AggregationSpec("sp"), utterance_id=utt_id)
        if kind.variant == "lde_aggr":
            return aggregate(out, AggregationSpec("lde"), lde=lde, utterance_id=utt_id)
        parts = [
            extract_utterance(out, utterance_id=utt_id),
            extract_frame_bn(out, 4, cmn, utterance_id=utt_id)[1],
            extract_frame_bn(out, 5, cmn, utterance_id=utt_id)[1],
            aggregate(out, AggregationSpec("sp"), utterance_id=utt_id),
            aggregate(out, AggregationSpec("lde"), lde=lde, utterance_id=utt_id),
        ]
        return compose(parts)


def cmd_extract(args) -> int:
    cfg = load_config(args.config, seed=args.seed)
    kind = system_kind(args.embedding_kind, args.mean_norm)
    teacher, lde = _load_teacher(args.out)
    if kind.variant in ("lde_aggr", "composite") and lde is None:
        raise FileNotFoundError("lde.ckpt is required for LDE-based embeddings")
    label = _label(args)
    if args.wav is not None:
        items = []
        for wav_path in args.wav:
            feats = melspec(read_wav(wav_path)).frames
            feats = apply_cmn(feats, CmnConfig(window_frames=cfg.cmn_window, enabled=True))
            emb = _teacher_embedding(teacher, lde, feats, kind, cfg.cmn_window, wav_path.stem)
            items.append((wav_path.stem, emb.vector))
        dest = args.out / f"wav_embeddings_{label}.bin"
        write_embeddings(dest, items)
        if args.csv:
            write_embeddings_csv(dest.with_suffix(".csv"), items)
        print(f"wrote {len(items)} embeddings to {dest}")
        return 0
    train, evalc = _load_corpora(args.out)
    for split, utts in (("train", _backend_subset(train, cfg.backend.n_utterances)),
                        ("eval", list(evalc))):
        items = [
            (
                u.utterance_id,
                _teacher_embedding(
                    teacher, lde, u.features, kind, cfg.cmn_window, u.utterance_id
                ).vector,
            )
            for u in utts
        ]
        dest = args.out / f"teacher_embs_{split}_{label}.bin"
        write_embeddings(dest, items)
        if args.csv:
            write_embeddings_csv(dest.with_suffix(".csv"), items)
        print(f"wrote {len(items)} {split} embeddings to {dest}")
    return 0


def cmd_distill(args) -> int:
    from .serialization import save_checkpoint

    cfg = load_config(args.config, seed=args.seed)
    kind = system_kind(args.embedding_kind, args.mean_norm)
    teacher, lde = _load_teacher(args.out)
    train, _ = _load_corpora(args.out)
    rng = np.random.default_rng(cfg.seed)
    utterances = list(train)
    order = rng.permutation(len(utterances))[: cfg.distill.n_utterances]
    subset = [utterances[i] for i in order]
    dcfg = DistillConfig(
        embedding_kind=kind,
        epochs=cfg.distill.epochs,
        batch_size=cfg.distill.batch_chunks,
        learning_rate=cfg.distill.learning_rate,
        seed=cfg.seed,
        chunk_frames=cfg.distill.chunk_frames,
        cmn_window=cfg.cmn_window,
    )
    student = distill_student(teacher, kind, subset, dcfg, lde=lde)
    students_dir = args.out / "students"
    students_dir.mkdir(parents=True, exist_ok=True)
    dest = students_dir / f"{_label(args)}.ckpt"
    save_checkpoint(student, dest)
    print(f"student ({student.param_count():,} parameters) written to {dest}")
    return 0


def _load_student(out: Path, label: str):
    path = out / "students" / f"{label}.ckpt"
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run `xvkd distill` first")
    return load_checkpoint(path)


def cmd_train_plda(args) -> int:
    cfg = load_config(args.config, seed=args.seed)
    label = _label(args)
    student = _load_student(args.out, label)
    train, _ = _load_corpora(args.out)
    subset = _backend_subset(train, cfg.backend.n_utterances)
    embs = {
        u.utterance_id: student_embed(student, np.asarray(u.features, dtype=np.float64)).vector
        for u in subset
    }
    labeled = _labeled_set(embs, subset)
    centered, mean = center_normalize(labeled, length_norm=cfg.backend.length_norm)
    model = plda_train(centered, iterations=cfg.backend.plda_iterations)
    plda_dir = args.out / "plda"
    plda_dir.mkdir(parents=True, exist_ok=True)
    dest = plda_dir / f"{label}.npz"
    np.savez(
        dest,
        mean=model.mean,
        between=model.between,
        within=model.within,
        preprocessing_mean=mean,
        length_norm=np.asarray(cfg.backend.length_norm),
        log_likelihoods=np.asarray(model.log_likelihoods),
    )
    print(f"PLDA backend written to {dest}")
    return 0


def cmd_score(args) -> int:
    cfg = load_config(args.config, seed=args.seed)
    label = _label(args)
    student = _load_student(args.out, label)
    plda_path = args.out / "plda" / f"{label}.npz"
    if not plda_path.exists():
        raise FileNotFoundError(f"{plda_path} missing; run `xvkd train-plda` first")
    stored = np.load(plda_path)
    model = PldaModel(
        mean=stored["mean"], between=stored["between"], within=stored["within"]
    )
    preprocessing_mean = stored["preprocessing_mean"]
    length_norm = bool(stored["length_norm"])
    _, evalc = _load_corpora(args.out)
    trials = read_trials(args.out / "trials.txt")
    embs = {
        u.utterance_id: student_embed(student, np.asarray(u.features, dtype=np.float64)).vector
        for u in evalc
    }
    mat = {k: v - preprocessing_mean for k, v in embs.items()}
    if length_norm:
        mat = {k: length_normalize(v) for k, v in mat.items()}
    enroll = np.stack([mat[t.enroll_id] for t in trials])
    test = np.stack([mat[t.test_id] for t in trials])
    scores = plda_score_matrix(model, enroll, test)
    scores_dir = args.out / "scores"
    scores_dir.mkdir(parents=True, exist_ok=True)
    dest = scores_dir / f"{label}.txt"
    with open(dest, "w", encoding="utf-8", newline="") as fh:
        for t, s in zip(trials, scores):
            fh.write(f"{t.enroll_id} {t.test_id} {float(s)!r}\n")
    print(f"wrote {len(trials)} scores to {dest}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config, seed=args.seed)
    trials = read_trials(args.trials)
    scored: dict[tuple[str, str], float] = {}
    with open(args.scores, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise ValueError(f"{args.scores}:{line_no}: malformed score line {line!r}")
            scored[(parts[0], parts[1])] = float(parts[2])
    target, nontarget = [], []
    for t in trials:
        key = (t.enroll_id, t.test_id)
        if key not in scored:
            raise ValueError(f"missing score for trial {t.enroll_id} {t.test_id}")
        (target if t.target else nontarget).append(scored[key])
    curve = compute_det(ScoreSet(target_scores=target, nontarget_scores=nontarget))
    if args.det_csv is not None:
        det_to_csv(curve, args.det_csv)
    print(f"EER(%): {eer(curve):.4f}")
    print(f"minDCF(p_target={cfg.dcf.p_target}): {min_dcf(curve, cfg.dcf):.4f}")
    return 0


def cmd_report(args) -> int:
    cfg = load_config(args.config, seed=args.seed)
    report = run_experiment(cfg, outdir=args.out)
    sys.stdout.write(report.to_table_text())
    print(f"report written to {args.out / 'report.csv'} and {args.out / 'report.txt'}")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "extract": cmd_extract,
    "distill": cmd_distill,
    "train-plda": cmd_train_plda,
    "score": cmd_score,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return _COMMANDS[args.command](args)
    except StageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (ConfigError, FileNotFoundError, ValueError, RuntimeError) as err:
        print(f"error: [{args.command}] {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
