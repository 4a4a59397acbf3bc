"""End-to-end runs: synth, annotate, train the regressor, train and evaluate the classifier.

Every artifact lands under one output directory and is recorded with its
SHA-256 digest in ``manifest.json``. Timings live only in the manifest, so
two runs with the same config and seeds produce the same output digests.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import platform
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .classifier import C_GRID, cross_validate, format_confusion, predict, save_classifier, train_ecoc
from .config import check_sections, from_mapping, read_config
from .errors import ConfigError, FacexprError
from .fitting import FitConfig, PruneStatus
from .io import (atomic_write_text, read_matrix_csv, read_tracks, write_annotation, write_labels_csv,
                 write_matrix_csv, write_sequence, write_tracks)
from .model import load_model, save_model
from .pipeline import (PipelineConfig, PruneStats, TrackParams, annotate_video, regression_pairs,
                       select_primary_track, track_filter, track_from_sequence)
from .regressor import (SplitSpec, default_template, featurize_batch, predict_features, regress_expression,
                        save_regressor, train_regressor)
from .synth import SynthConfig, gen_emotion_frames, gen_model, gen_video

LATENCY_BUDGET_MS = 20.0
MANIFEST_NAME = "manifest.json"


@dataclass
class RunSettings:
    seed: int = 0
    model: str = ""          # existing model container; generated when empty
    tracks: str = ""         # directory of *.trk files; synthesized when empty
    manual_flags: str = ""   # comma-separated video ids
    latency_frames: int = 1000


@dataclass
class AnnotateSettings:
    percentile: float = 0.99
    smoothing: float = None  # GCV when unset


@dataclass
class RegressorSettings:
    backend: str = "view_ridge"
    ridge_lambda: float = 0.03
    train: float = 0.70
    val: float = 0.15


@dataclass
class ClassifySettings:
    k: int = 10
    repeats: int = 1
    grouped: bool = False
    inner_k: int = 3


@dataclass
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    synth: SynthConfig = field(default_factory=SynthConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    track: TrackParams = field(default_factory=TrackParams)
    annotate: AnnotateSettings = field(default_factory=AnnotateSettings)
    regressor: RegressorSettings = field(default_factory=RegressorSettings)
    classify: ClassifySettings = field(default_factory=ClassifySettings)

    def snapshot(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}

    @property
    def manual_flags(self) -> frozenset:
        return frozenset(v.strip() for v in self.run.manual_flags.split(",") if v.strip())


_SECTIONS = {"run": RunSettings, "synth": SynthConfig, "fit": FitConfig, "track": TrackParams,
             "annotate": AnnotateSettings, "regressor": RegressorSettings, "classify": ClassifySettings}


def load_run_config(path=None, seed: int | None = None) -> RunConfig:
    """Config from an optional file; ``seed`` overrides ``[run] seed``."""
    sections = read_config(path) if path else {}
    check_sections(sections, _SECTIONS)
    parts = {name: from_mapping(cls, sections.get(name, {}), name) for name, cls in _SECTIONS.items()}
    config = RunConfig(**parts)
    if seed is not None:
        config.run.seed = int(seed)
    return config


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class StageRecord:
    name: str
    inputs: list
    outputs: list
    seconds: float = 0.0
    status: str = "pending"
    detail: str = ""


@dataclass
class RunManifest:
    command: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    versions: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    stages: list = field(default_factory=list)
    latency: dict = field(default_factory=dict)
    status: str = "ok"
    error: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, record: dict) -> "RunManifest":
        known = {f.name for f in dataclasses.fields(cls)}
        m = cls(**{k: v for k, v in record.items() if k in known})
        m.stages = [s if isinstance(s, StageRecord) else StageRecord(**s) for s in m.stages]
        return m

    def output_digest(self) -> str:
        """One digest over all output names and digests."""
        h = hashlib.sha256()
        for name in sorted(self.outputs):
            h.update(f"{name}\0{self.outputs[name]}\n".encode())
        return h.hexdigest()


def write_manifest(path, manifest: RunManifest) -> None:
    atomic_write_text(path, json.dumps(manifest.to_dict(), indent=1, sort_keys=True) + "\n")


def read_manifest(path) -> RunManifest:
    try:
        with open(path, encoding="utf-8") as fh:
            return RunManifest.from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        raise ConfigError(f"{path}: cannot read manifest ({exc})") from exc


def check_dataflow(stages, external=()) -> None:
    """Each stage may only read external inputs or outputs of earlier stages, never its own."""
    produced = set()
    external = set(external)
    for stage in stages:
        own = set(stage.outputs)
        clash = own & set(stage.inputs)
        if clash:
            raise ConfigError(f"stage {stage.name!r} reads its own outputs {sorted(clash)}")
        unknown = set(stage.inputs) - produced - external
        if unknown:
            raise ConfigError(f"stage {stage.name!r} reads {sorted(unknown)} before anything produced them")
        rewritten = own & produced
        if rewritten:
            raise ConfigError(f"stage {stage.name!r} overwrites {sorted(rewritten)}")
        produced |= own


def _versions() -> dict:
    import numba
    import scipy

    return {"facexpr": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def _video_seeds(seed: int, count: int) -> list:
    return [int(seed) * 100_003 + k for k in range(count)]


class _Run:
    """Bookkeeping for one run; paths in records are relative to ``out``."""

    def __init__(self, out: str, manifest: RunManifest):
        self.out = out
        self.manifest = manifest

    def path(self, rel: str) -> str:
        full = os.path.join(self.out, rel)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        return full

    def stage(self, name: str, inputs: list, fn):
        record = StageRecord(name, sorted(inputs), [])
        self.manifest.stages.append(record)
        start = time.perf_counter()
        try:
            outputs, detail = fn()
        except FacexprError as exc:
            record.status = "failed"
            record.detail = f"{type(exc).__name__}: {exc}"
            record.seconds = time.perf_counter() - start
            exc.args = (f"stage {name!r} failed: {exc}",) + exc.args[1:]
            raise
        record.seconds = time.perf_counter() - start
        record.outputs = sorted(outputs)
        record.status = "ok"
        record.detail = detail
        for rel in outputs:
            self.manifest.outputs[rel] = sha256_file(os.path.join(self.out, rel))
        check_dataflow(self.manifest.stages, self.manifest.inputs)
        return outputs


def _check_inputs(config: RunConfig) -> dict:
    inputs = {}
    if config.run.model:
        if not os.path.isfile(config.run.model):
            raise ConfigError(f"model file {config.run.model} does not exist")
        inputs[os.path.abspath(config.run.model)] = sha256_file(config.run.model)
    if config.run.tracks:
        if not os.path.isdir(config.run.tracks):
            raise ConfigError(f"tracks directory {config.run.tracks} does not exist")
        names = sorted(n for n in os.listdir(config.run.tracks) if n.endswith(".trk"))
        if not names:
            raise ConfigError(f"no .trk files in {config.run.tracks}")
        for n in names:
            full = os.path.abspath(os.path.join(config.run.tracks, n))
            inputs[full] = sha256_file(full)
    return inputs


def run_pipeline(config: RunConfig, out_dir, command=None) -> RunManifest:
    """Run every stage, write artifacts and the manifest under ``out_dir``.

    Inputs are validated before anything is written, so a bad config leaves
    no partial outputs. A stage failure is recorded in the manifest and
    re-raised with the stage name.
    """
    inputs = _check_inputs(config)
    seed = config.run.seed
    synth = dataclasses.replace(config.synth, seed=seed)
    manifest = RunManifest(command=list(command if command is not None else sys.argv),
                           config=config.snapshot(), versions=_versions(), inputs=inputs)
    manifest.seeds = {"run": seed, "model": seed, "emotions": seed,
                      "videos": [] if config.run.tracks else _video_seeds(seed, synth.num_videos)}
    os.makedirs(out_dir, exist_ok=True)
    run = _Run(os.fspath(out_dir), manifest)
    state = {}
    try:
        _stages(run, config, synth, state)
        manifest.latency = _latency(state, config.run.latency_frames)
    except FacexprError as exc:
        manifest.status = "failed"
        manifest.error = f"{type(exc).__name__}: {exc}"
        write_manifest(os.path.join(run.out, MANIFEST_NAME), manifest)
        raise
    write_manifest(os.path.join(run.out, MANIFEST_NAME), manifest)
    return manifest


def _stages(run: _Run, config: RunConfig, synth: SynthConfig, state: dict) -> None:
    seed = config.run.seed
    model_inputs = [os.path.abspath(config.run.model)] if config.run.model else []

    def model_stage():
        model = load_model(config.run.model) if config.run.model else gen_model(synth, seed)
        save_model(model, run.path("model.fxb"))
        state["model"] = model
        return ["model.fxb"], f"N={model.num_vertices} n_i={model.n_identity} n_e={model.n_expression}"

    run.stage("model", model_inputs, model_stage)
    model = state["model"]

    if config.run.tracks:
        track_inputs = [p for p in run.manifest.inputs if p.endswith(".trk")]
        track_files = track_inputs
    else:
        def synth_stage():
            outs = []
            for k, s in enumerate(_video_seeds(seed, synth.num_videos)):
                seq, truth = gen_video(model, synth, s)
                rel = f"tracks/video{k:04d}.trk"
                write_tracks(run.path(rel), [track_from_sequence(seq, config.track)], f"video{k:04d}")
                outs.append(rel)
                rel = f"truth/video{k:04d}.json"
                truth.source_id = f"video{k:04d}"
                write_annotation(run.path(rel), truth)
                outs.append(rel)
            return outs, f"{synth.num_videos} videos"

        outs = run.stage("synth_videos", ["model.fxb"], synth_stage)
        track_inputs = [p for p in outs if p.endswith(".trk")]
        track_files = [os.path.join(run.out, p) for p in track_inputs]

    def annotate_stage():
        pconf = PipelineConfig(config.fit, config.annotate.percentile, config.annotate.smoothing,
                               config.manual_flags)
        stats = PruneStats()
        outs, annotations, sequences, lost = [], [], [], []
        for path in track_files:
            track = select_primary_track(read_tracks(path, config.track))
            annotation = annotate_video(model, track, pconf)
            vid = track.source_id
            stats.add(annotation.prune_status)
            if annotation.prune_status == PruneStatus.TRACK_LOST:
                lost.append(f"{vid}: {annotation.prune_reason}")
            _, trimmed, _ = track_filter(track)
            seq = trimmed.to_sequence()
            write_annotation(run.path(f"annotations/{vid}.json"), annotation)
            write_sequence(run.path(f"sequences/{vid}.lms"), seq)
            outs += [f"annotations/{vid}.json", f"sequences/{vid}.lms"]
            annotations.append(annotation)
            sequences.append(seq)
        atomic_write_text(run.path("prune_stats.txt"), stats.summary() + "\n")
        state.update(annotations=annotations, sequences=sequences, stats=stats)
        detail = stats.summary().replace("\n", "; ")
        if lost:
            detail += " | lost: " + "; ".join(lost)
        return outs + ["prune_stats.txt"], detail

    annotate_outputs = run.stage("annotate", ["model.fxb"] + track_inputs, annotate_stage)

    def regressor_stage():
        template = default_template(model)
        x, y, groups = regression_pairs(state["annotations"], state["sequences"], template)
        rs = config.regressor
        reg = train_regressor(x, y, SplitSpec(rs.train, rs.val, seed), rs.ridge_lambda, rs.backend,
                              template=template, template_3d=model.landmark_mean, groups=groups)
        save_regressor(reg, run.path("regressor.fxb"))
        report = "\n".join(f"{k}: {v}" for k, v in sorted(reg.training_report.items()))
        atomic_write_text(run.path("regressor_report.txt"), report + "\n")
        state["regressor"] = reg
        return ["regressor.fxb", "regressor_report.txt"], f"test_mse={reg.training_report['test_mse']:.4g}"

    run.stage("train_regressor", ["model.fxb"] + annotate_outputs, regressor_stage)

    def emotions_stage():
        frames = gen_emotion_frames(model, synth, seed)
        write_matrix_csv(run.path("emotions/landmarks.csv"), frames.landmarks.reshape(len(frames.labels), -1))
        write_labels_csv(run.path("emotions/labels.csv"), frames.labels, frames.subject_ids)
        state["frames"] = frames
        return ["emotions/landmarks.csv", "emotions/labels.csv"], f"{frames.labels.size} images"

    run.stage("synth_emotions", ["model.fxb"], emotions_stage)

    def regress_stage():
        landmarks = read_matrix_csv(os.path.join(run.out, "emotions/landmarks.csv")).reshape(-1, 68, 2)
        reg = state["regressor"]
        feats = predict_features(reg, featurize_batch(landmarks, reg.template))
        write_matrix_csv(run.path("emotions/features.csv"), feats)
        state["features"] = feats
        return ["emotions/features.csv"], f"{feats.shape[0]} x {feats.shape[1]}"

    run.stage("regress_emotions", ["regressor.fxb", "emotions/landmarks.csv"], regress_stage)

    def classify_stage():
        cs = config.classify
        frames = state["frames"]
        feats = state["features"]
        cv = cross_validate(feats, frames.labels, cs.k, cs.grouped, cs.repeats, seed,
                            subjects=frames.subject_ids, grid=C_GRID, inner_k=cs.inner_k)
        chosen = float(np.median(cv.chosen_C))
        clf = train_ecoc(feats, frames.labels, chosen)
        save_classifier(clf, run.path("classifier.fxb"))
        lines = [cv.summary(), "fold accuracies: " + " ".join(f"{a:.4f}" for a in cv.fold_accuracies),
                 "chosen C per fold: " + " ".join(f"{c:g}" for c in cv.chosen_C),
                 f"final C: {chosen:g}", "", format_confusion(cv.confusion)]
        atomic_write_text(run.path("cv_report.txt"), "\n".join(lines) + "\n")
        n = cv.confusion.shape[0]
        write_matrix_csv(run.path("confusion.csv"),
                         [[t, p, cv.confusion[t, p]] for t in range(n) for p in range(n)],
                         header=["true", "predicted", "count"])
        state["classifier"] = clf
        return ["classifier.fxb", "cv_report.txt", "confusion.csv"], f"cv mean accuracy {cv.mean:.4f}"

    run.stage("classify", ["emotions/features.csv", "emotions/labels.csv"], classify_stage)


def measure_latency(regressor, classifier, landmarks, frames: int = 1000) -> dict:
    """Wall-clock regress + classify per single frame, cycling through ``landmarks``."""
    landmarks = np.asarray(landmarks)
    if frames < 1 or landmarks.shape[0] == 0:
        return {}
    start = time.perf_counter()
    for k in range(frames):
        predict(classifier, regress_expression(regressor, landmarks[k % landmarks.shape[0]]))
    per_frame = (time.perf_counter() - start) / frames * 1e3
    return {"frames": frames, "per_frame_ms": per_frame, "budget_ms": LATENCY_BUDGET_MS,
            "within_budget": bool(per_frame <= LATENCY_BUDGET_MS)}


def _latency(state: dict, frames: int) -> dict:
    return measure_latency(state["regressor"], state["classifier"], state["frames"].landmarks, frames)


def timing_report(manifests) -> str:
    """Per-stage seconds and per-frame latency, one column per manifest.

    Returns an empty string when no manifest has anything to report.
    """
    manifests = list(manifests)
    names = []
    for m in manifests:
        for s in m.stages:
            if s.name not in names:
                names.append(s.name)
    has_latency = any(m.latency for m in manifests)
    if not names and not has_latency:
        return ""
    heads = [f"run{k + 1}" for k in range(len(manifests))]
    width = 14
    lines = ["stage".ljust(22) + "".join(h.rjust(width) for h in heads)]
    for name in names:
        cells = []
        for m in manifests:
            match = [s for s in m.stages if s.name == name]
            cells.append(f"{match[0].seconds:.3f} s" if match else "-")
        lines.append(name.ljust(22) + "".join(c.rjust(width) for c in cells))
    if has_latency:
        cells, flags = [], []
        for m in manifests:
            lat = m.latency
            cells.append(f"{lat['per_frame_ms']:.3f} ms" if lat else "-")
            flags.append(("ok" if lat["within_budget"] else "OVER") if lat else "-")
        lines.append("per-frame latency".ljust(22) + "".join(c.rjust(width) for c in cells))
        lines.append(f"budget {LATENCY_BUDGET_MS:g} ms".ljust(22) + "".join(f.rjust(width) for f in flags))
    return "\n".join(lines)

