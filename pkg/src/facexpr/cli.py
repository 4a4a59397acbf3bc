"""Command line entry point: ``facexpr <group> <command> [options]``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from .classifier import (confusion_matrix, cross_validate, format_confusion, load_classifier, predict_batch,
                         save_classifier, train_ecoc)
from .errors import ConfigError, DataError, FacexprError
from .fitting import LandmarkSequence, PruneStatus
from .io import (atomic_write_text, read_annotation, read_labels_csv, read_matrix_csv, read_sequence,
                 read_tracks, write_annotation, write_labels_csv, write_matrix_csv, write_sequence, write_tracks)
from .model import condition_numbers, load_model, save_model
from .pipeline import (PipelineConfig, PruneStats, annotate_video, regression_pairs, select_primary_track,
                       track_filter, track_from_sequence)
from .regressor import (SplitSpec, default_template, featurize_batch, load_regressor, predict_features,
                        save_regressor, train_regressor)
from .runner import load_run_config, read_manifest, run_pipeline, timing_report
from .synth import gen_emotion_dataset, gen_model, gen_video

MANUAL_FLAGS = "manual_flags.txt"


def _need_file(path, what):
    if not path or not os.path.isfile(path):
        raise ConfigError(f"{what} {path!r} does not exist")
    return path


def _need_dir(path, what):
    if not path or not os.path.isdir(path):
        raise ConfigError(f"{what} {path!r} is not a directory")
    return path


def _need_out(args):
    if not args.out:
        raise ConfigError("--out is required")
    return args.out


def _config(args):
    if args.config:
        _need_file(args.config, "config file")
    return load_run_config(args.config, args.seed)


def _mkdir(path):
    os.makedirs(path, exist_ok=True)
    return path


# model

def cmd_model_inspect(args):
    model = load_model(_need_file(args.model, "model file"))
    print(f"vertices N: {model.num_vertices}")
    print(f"identity n_i: {model.n_identity}")
    print(f"expression n_e: {model.n_expression}")
    print(f"landmarks: {model.landmark_vertex_ids.size}")
    for name, value in condition_numbers(model).items():
        print(f"condition {name}: {value:.6g}")
    problems = model.check_invariants()
    print("invariants: ok" if not problems else "invariants: FAILED")
    for p in problems:
        print(f"  {p}")
    return 0 if not problems else 3


def cmd_model_template(args):
    model = load_model(_need_file(args.model, "model file"))
    out = _need_out(args)
    template = default_template(model)
    write_sequence(out, LandmarkSequence(template[None], np.ones(1, dtype=bool), "template"))
    print(f"wrote {out}")
    return 0


# synth

def cmd_synth_model(args):
    config = _config(args)
    out = _mkdir(_need_out(args))
    model = gen_model(config.synth, config.run.seed)
    save_model(model, os.path.join(out, "model.fxb"))
    print(f"wrote {os.path.join(out, 'model.fxb')}")
    return 0


def cmd_synth_videos(args):
    config = _config(args)
    out = _mkdir(_need_out(args))
    synth = dataclasses.replace(config.synth, seed=config.run.seed)
    if args.model:
        model = load_model(_need_file(args.model, "model file"))
    else:
        model = gen_model(synth, config.run.seed)
        save_model(model, os.path.join(out, "model.fxb"))
    _mkdir(os.path.join(out, "truth"))
    for k in range(synth.num_videos):
        vid = f"video{k:04d}"
        seq, truth = gen_video(model, synth, config.run.seed * 100_003 + k)
        truth.source_id = vid
        write_tracks(os.path.join(out, f"{vid}.trk"), [track_from_sequence(seq, config.track)], vid)
        write_annotation(os.path.join(out, "truth", f"{vid}.json"), truth)
    print(f"wrote {synth.num_videos} track files to {out}")
    return 0


def cmd_synth_emotions(args):
    config = _config(args)
    out = _mkdir(_need_out(args))
    ds = gen_emotion_dataset(config.synth, config.run.seed)
    write_matrix_csv(os.path.join(out, "features.csv"), ds.features)
    write_labels_csv(os.path.join(out, "labels.csv"), ds.labels, ds.subject_ids)
    print(f"wrote {ds.labels.size} labelled expression vectors to {out}")
    return 0


# pipeline

def _read_flags(out):
    path = os.path.join(out, MANUAL_FLAGS)
    if not os.path.isfile(path):
        return []
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip() and not line.startswith("#")]


def _write_stats(out):
    stats = PruneStats()
    adir = os.path.join(out, "annotations")
    for name in sorted(os.listdir(adir)):
        if name.endswith(".json"):
            stats.add(read_annotation(os.path.join(adir, name)).prune_status)
    atomic_write_text(os.path.join(out, "prune_stats.txt"), stats.summary() + "\n")
    return stats


def cmd_pipeline_annotate(args):
    config = _config(args)
    model = load_model(_need_file(args.model, "model file"))
    tracks = _need_dir(args.tracks, "tracks directory")
    out = _need_out(args)
    percentile = config.annotate.percentile if args.percentile is None else args.percentile
    flags = frozenset(_read_flags(out)) | config.manual_flags
    pconf = PipelineConfig(config.fit, percentile, config.annotate.smoothing, flags)
    names = sorted(n for n in os.listdir(tracks) if n.endswith(".trk"))
    if not names:
        raise ConfigError(f"no .trk files in {tracks}")
    _mkdir(os.path.join(out, "annotations"))
    _mkdir(os.path.join(out, "sequences"))
    for name in names:
        track = select_primary_track(read_tracks(os.path.join(tracks, name), config.track))
        annotation = annotate_video(model, track, pconf)
        vid = track.source_id
        write_annotation(os.path.join(out, "annotations", f"{vid}.json"), annotation)
        write_sequence(os.path.join(out, "sequences", f"{vid}.lms"), track_filter(track)[1].to_sequence())
        print(f"{vid}: {annotation.prune_status.value} {annotation.prune_reason}".rstrip())
    print(_write_stats(out).summary())
    return 0


def cmd_pipeline_flag(args):
    out = _need_dir(_need_out(args), "annotation directory")
    if not args.manual_prune:
        raise ConfigError("pipeline flag needs --manual-prune")
    path = os.path.join(out, "annotations", f"{args.video}.json")
    _need_file(path, "annotation")
    flags = _read_flags(out)
    if args.video not in flags:
        flags.append(args.video)
        atomic_write_text(os.path.join(out, MANUAL_FLAGS), "\n".join(flags) + "\n")
    annotation = read_annotation(path)
    if annotation.prune_status == PruneStatus.KEPT:
        annotation.prune_status = PruneStatus.MANUALLY_PRUNED
        annotation.prune_reason = "manual flag"
        write_annotation(path, annotation)
    print(f"{args.video}: {annotation.prune_status.value}")
    print(_write_stats(out).summary())
    return 0


def cmd_pipeline_run(args):
    config = _config(args)
    manifest = run_pipeline(config, _need_out(args), sys.argv)
    for stage in manifest.stages:
        print(f"{stage.name}: {stage.status} ({stage.seconds:.2f} s) {stage.detail}")
    print(f"output digest: {manifest.output_digest()}")
    print(timing_report([manifest]))
    return 0


# regressor

def _load_pairs(directory, template):
    adir = _need_dir(os.path.join(directory, "annotations"), "annotations directory")
    sdir = os.path.join(directory, "sequences")
    annotations, sequences = [], []
    for name in sorted(os.listdir(adir)):
        if not name.endswith(".json"):
            continue
        vid = name[:-len(".json")]
        annotations.append(read_annotation(os.path.join(adir, name)))
        sequences.append(read_sequence(_need_file(os.path.join(sdir, f"{vid}.lms"), "landmark sequence")))
    return regression_pairs(annotations, sequences, template)


def cmd_regressor_train(args):
    config = _config(args)
    model = load_model(_need_file(args.model, "model file"))
    out = _need_out(args)
    template = default_template(model)
    x, y, groups = _load_pairs(args.annotations, template)
    rs = config.regressor
    backend = args.backend or rs.backend
    lam = rs.ridge_lambda if args.ridge_lambda is None else args.ridge_lambda
    reg = train_regressor(x, y, SplitSpec(rs.train, rs.val, config.run.seed), lam, backend,
                          template=template, template_3d=model.landmark_mean, groups=groups)
    save_regressor(reg, out)
    for key, value in sorted(reg.training_report.items()):
        print(f"{key}: {value}")
    return 0


def cmd_regressor_eval(args):
    reg = load_regressor(_need_file(args.regressor, "regressor file"))
    x, y, _ = _load_pairs(args.annotations, reg.template)
    pred = predict_features(reg, x)
    print(f"frames: {x.shape[0]}")
    print(f"mse: {float(np.mean((pred - y) ** 2)):.6g}")
    return 0


def cmd_regressor_predict(args):
    reg = load_regressor(_need_file(args.regressor, "regressor file"))
    seq = read_sequence(_need_file(args.landmarks, "landmark file"))
    idx = np.flatnonzero(seq.valid)
    pred = np.full((seq.num_frames, reg.output_dim), np.nan)
    if idx.size:
        pred[idx] = predict_features(reg, featurize_batch(seq.frames[idx], reg.template))
    out = _need_out(args)
    write_matrix_csv(out, pred, header=[f"e{k}" for k in range(reg.output_dim)])
    print(f"wrote {idx.size} predictions to {out}")
    return 0


# classify

def _examples(args):
    x = read_matrix_csv(_need_file(args.features, "features file"))
    labels, subjects = read_labels_csv(_need_file(args.labels, "labels file"))
    if labels.size != x.shape[0]:
        raise DataError(f"{x.shape[0]} feature rows but {labels.size} labels")
    return x, labels, subjects


def _emit_confusion(confusion, out):
    print(format_confusion(confusion))
    n = confusion.shape[0]
    records = [[t, p, confusion[t, p]] for t in range(n) for p in range(n)]
    if out:
        _mkdir(out)
        write_matrix_csv(os.path.join(out, "confusion.csv"), records, header=["true", "predicted", "count"])
    else:
        print("true,predicted,count")
        for r in records:
            print(",".join(str(int(v)) for v in r))


def cmd_classify_train(args):
    x, labels, _ = _examples(args)
    model = train_ecoc(x, labels, args.C)
    out = _need_out(args)
    save_classifier(model, out)
    acc = float(np.mean(predict_batch(model, x) == labels))
    print(f"trained {model.num_classes}-class one-vs-all model, C={args.C:g}, training accuracy {acc:.4f}")
    return 0


def cmd_classify_eval(args):
    x, labels, _ = _examples(args)
    model = load_classifier(_need_file(args.classifier, "classifier file"))
    if x.shape[1] != model.weights.shape[1]:
        raise DataError(f"features have {x.shape[1]} columns, classifier expects {model.weights.shape[1]}")
    pred = predict_batch(model, x)
    print(f"accuracy: {float(np.mean(pred == labels)):.4f}")
    n = max(model.num_classes, int(labels.max()) + 1)
    _emit_confusion(confusion_matrix(labels, pred, n), args.out)
    return 0


def cmd_classify_cv(args):
    x, labels, subjects = _examples(args)
    if args.grouped and not all(subjects):
        raise DataError("grouped cross-validation needs a subject_id for every example")
    result = cross_validate(x, labels, args.k, args.grouped, args.repeats, args.seed or 0,
                            subjects=subjects if args.grouped else None)
    print(result.summary())
    print("chosen C per fold: " + " ".join(f"{c:g}" for c in result.chosen_C))
    _emit_confusion(result.confusion, args.out)
    if args.out:
        lines = [result.summary(), "fold accuracies: " + " ".join(f"{a:.4f}" for a in result.fold_accuracies)]
        atomic_write_text(os.path.join(args.out, "cv_report.txt"), "\n".join(lines) + "\n")
    return 0


def cmd_report(args):
    manifests = [read_manifest(_need_file(p, "manifest")) for p in args.manifests]
    table = timing_report(manifests)
    print(table if table else "(nothing to report)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("--config", default=None, help="key-value config file")
    common.add_argument("--out", default=None, help="output file or directory")

    parser = argparse.ArgumentParser(prog="facexpr", description=__doc__.splitlines()[0])
    groups = parser.add_subparsers(dest="group", required=True)

    def command(group_parsers, name, fn, help_text):
        p = group_parsers.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(fn=fn)
        return p

    model = groups.add_parser("model", help="shape model tools").add_subparsers(dest="command", required=True)
    p = command(model, "inspect", cmd_model_inspect, "dimensions, condition numbers and invariant checks")
    p.add_argument("model")
    p = command(model, "template", cmd_model_template, "write the 2D registration template as a landmark file")
    p.add_argument("--model", required=True)

    synth = groups.add_parser("synth", help="synthetic data").add_subparsers(dest="command", required=True)
    command(synth, "model", cmd_synth_model, "random shape model")
    p = command(synth, "videos", cmd_synth_videos, "landmark videos as track files plus truth")
    p.add_argument("--model", default=None)
    command(synth, "emotions", cmd_synth_emotions, "labelled expression vectors")

    pipe = groups.add_parser("pipeline", help="annotation pipeline").add_subparsers(dest="command", required=True)
    p = command(pipe, "annotate", cmd_pipeline_annotate, "filter, smooth, fit and prune a track corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--tracks", required=True)
    p.add_argument("--percentile", type=float, default=None)
    p = command(pipe, "flag", cmd_pipeline_flag, "manually prune one annotated video")
    p.add_argument("--video", required=True)
    p.add_argument("--manual-prune", action="store_true")
    command(pipe, "run", cmd_pipeline_run, "full run with manifest")

    reg = groups.add_parser("regressor", help="expression regressor").add_subparsers(dest="command", required=True)
    p = command(reg, "train", cmd_regressor_train, "train from an annotated corpus")
    p.add_argument("--annotations", required=True, help="output directory of pipeline annotate")
    p.add_argument("--model", required=True)
    p.add_argument("--backend", choices=("ridge", "view_ridge"), default=None)
    p.add_argument("--lambda", dest="ridge_lambda", type=float, default=None)
    p = command(reg, "eval", cmd_regressor_eval, "MSE against fitted expressions")
    p.add_argument("--regressor", required=True)
    p.add_argument("--annotations", required=True)
    p = command(reg, "predict", cmd_regressor_predict, "expressions for a landmark file")
    p.add_argument("--regressor", required=True)
    p.add_argument("--landmarks", required=True)

    cls = groups.add_parser("classify", help="emotion classifier").add_subparsers(dest="command", required=True)
    for name, fn, text in (("train", cmd_classify_train, "train a one-vs-all SVM model"),
                           ("eval", cmd_classify_eval, "accuracy and confusion on labelled data"),
                           ("cv", cmd_classify_cv, "repeated stratified cross-validation")):
        p = command(cls, name, fn, text)
        p.add_argument("--features", required=True)
        p.add_argument("--labels", required=True)
        if name == "train":
            p.add_argument("--C", type=float, default=1.0)
        if name == "eval":
            p.add_argument("--classifier", required=True)
        if name == "cv":
            p.add_argument("--grouped", action="store_true")
            p.add_argument("--k", type=int, default=10)
            p.add_argument("--repeats", type=int, default=10)

    p = groups.add_parser("report", parents=[common], help="timing table from run manifests")
    p.add_argument("manifests", nargs="*")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FacexprError as exc:
        print(f"facexpr: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"facexpr: error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
