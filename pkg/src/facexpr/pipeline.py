"""Pseudo-ground-truth factory: track filtering, smoothing, fitting and pruning."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import ContractError, FacexprError, InsufficientDataError
from .fitting import FitConfig, LandmarkSequence, PruneStatus, VideoAnnotation, fit_video
from .model import NUM_LANDMARKS, ShapeModel
from .regressor import featurize_batch
from .splines import MIN_POINTS, short_gap_mask, smooth_traces

log = logging.getLogger(__name__)


@dataclass
class TrackParams:
    margin_fraction: float = 0.5
    max_gap_K: int = 5
    target_frames_F: int = 2000

    def __post_init__(self):
        if not 0 < self.margin_fraction <= 1:
            raise ContractError("margin_fraction must lie in (0, 1]")
        if int(self.max_gap_K) < 1:
            raise ContractError("max_gap_K must be at least 1")
        if int(self.target_frames_F) < 1:
            raise ContractError("target_frames_F must be at least 1")


@dataclass
class DetectionTrack:
    """Per-frame detections of one face; ``None`` marks a frame without one.

    A present frame is ``(bbox, landmarks)`` with bbox ``(x, y, w, h)`` and
    68 x 2 landmarks.
    """

    frames: list
    params: TrackParams = field(default_factory=TrackParams)
    source_id: str = ""

    def __post_init__(self):
        cleaned = []
        for item in self.frames:
            if item is None:
                cleaned.append(None)
                continue
            bbox, landmarks = item
            bbox = np.asarray(bbox, dtype=np.float64).reshape(4)
            landmarks = np.asarray(landmarks, dtype=np.float64)
            if landmarks.shape != (NUM_LANDMARKS, 2):
                raise ContractError(f"landmarks must be 68 x 2, got {landmarks.shape}")
            if not (np.all(np.isfinite(bbox)) and np.all(np.isfinite(landmarks))) or bbox[2] <= 0:
                raise ContractError("detections must be finite with positive bbox width")
            cleaned.append((bbox, landmarks))
        self.frames = cleaned

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def present(self) -> np.ndarray:
        return np.array([f is not None for f in self.frames], dtype=bool)

    def to_sequence(self) -> LandmarkSequence:
        coords = np.full((len(self.frames), NUM_LANDMARKS, 2), np.nan)
        for k, item in enumerate(self.frames):
            if item is not None:
                coords[k] = item[1]
        return LandmarkSequence(coords, self.present, self.source_id)


def bbox_of(landmarks) -> np.ndarray:
    pts = np.asarray(landmarks, dtype=np.float64)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    return np.array([lo[0], lo[1], hi[0] - lo[0], hi[1] - lo[1]])


def track_from_sequence(seq: LandmarkSequence, params: TrackParams | None = None) -> DetectionTrack:
    """Detection track whose boxes are the landmark bounding boxes."""
    frames = [(bbox_of(seq.frames[f]), seq.frames[f]) if seq.valid[f] else None
              for f in range(seq.num_frames)]
    return DetectionTrack(frames, params or TrackParams(), seq.source_id)


def select_primary_track(tracks: list) -> DetectionTrack:
    """Among faces of one video, the one with the largest box in the first frame."""
    if not tracks:
        raise ContractError("no face tracks to choose from")

    def first_area(track):
        first = track.frames[0] if len(track) else None
        return 0.0 if first is None else float(first[0][2] * first[0][3])

    areas = [first_area(t) for t in tracks]
    return tracks[int(np.argmax(areas))]


def track_filter(track: DetectionTrack):
    """Scan the track forward and keep it while it stays well behaved.

    A track is dropped when the box center moves by more than
    ``margin_fraction`` of the current box width between consecutive present
    frames, or when ``max_gap_K`` consecutive frames are missing before
    ``target_frames_F`` frames have been collected. Returns
    ``(kept, trimmed, reason)``; ``trimmed`` holds the accepted prefix
    (ending at the last accepted detection) and ``reason`` is ``""``,
    ``"margin"`` or ``"gap"``.
    """
    p = track.params
    if len(track) == 0:
        raise ContractError("track is empty")
    accepted_end = 0  # exclusive end of the accepted prefix
    count = 0
    gap = 0
    prev_center = None
    reason = ""
    for k, item in enumerate(track.frames):
        if count >= p.target_frames_F:
            break
        if item is None:
            gap += 1
            if gap >= p.max_gap_K:
                reason = "gap"
                break
            continue
        bbox = item[0]
        center = bbox[:2] + bbox[2:] / 2
        if prev_center is not None and np.hypot(*(center - prev_center)) > p.margin_fraction * bbox[2]:
            reason = "margin"
            break
        prev_center = center
        gap = 0
        count += 1
        accepted_end = k + 1
    trimmed = DetectionTrack(track.frames[:accepted_end], p, track.source_id)
    kept = reason == "" and count > 0
    if count == 0 and not reason:
        reason = "gap"
    return kept, trimmed, reason


def smooth_landmarks(seq: LandmarkSequence, max_gap_K: int = 5, smoothing=None) -> LandmarkSequence:
    """Smooth all 136 coordinate traces and fill interior gaps shorter than ``max_gap_K``.

    Frames in longer gaps (and before the first or after the last valid
    frame) stay invalid and hold NaN.
    """
    valid = seq.valid
    if np.count_nonzero(valid) < MIN_POINTS:
        raise InsufficientDataError(
            f"smoothing needs at least {MIN_POINTS} valid frames, sequence {seq.source_id!r} has "
            f"{np.count_nonzero(valid)}")
    traces = np.where(valid[:, None], seq.frames.reshape(seq.num_frames, -1), 0.0)
    fitted, _ = smooth_traces(traces, valid, smoothing)
    new_valid = valid | short_gap_mask(valid, max_gap_K)
    frames = fitted.reshape(seq.frames.shape)
    frames[~new_valid] = np.nan
    return LandmarkSequence(frames, new_valid, seq.source_id)


def prune_threshold(n_identity: int, percentile: float = 0.99) -> float:
    if not 0 < percentile < 1:
        raise ContractError(f"percentile must lie in (0, 1), got {percentile}")
    return float(stats.chi2.ppf(percentile, n_identity))


def auto_prune(annotation: VideoAnnotation, percentile: float = 0.99):
    """Chi-square test on the squared identity norm.

    Identity coefficients are standard normal under the model, so ``|i|^2``
    follows chi-square with ``n_i`` degrees of freedom. Returns
    ``(pruned, statistic, threshold)`` and marks the annotation.
    """
    threshold = prune_threshold(annotation.identity.size, percentile)
    if annotation.prune_status != PruneStatus.KEPT:
        raise ContractError(f"annotation already {annotation.prune_status.value}")
    statistic = float(annotation.identity @ annotation.identity)
    pruned = statistic > threshold
    if pruned:
        annotation.prune_status = PruneStatus.AUTO_PRUNED
        annotation.prune_reason = f"identity chi2 {statistic:.3f} > {threshold:.3f} (percentile {percentile})"
    return pruned, statistic, threshold


@dataclass
class PruneStats:
    total: int = 0
    track_pruned: int = 0
    auto_pruned: int = 0
    manual_pruned: int = 0
    kept: int = 0

    def add(self, status: PruneStatus) -> None:
        self.total += 1
        if status == PruneStatus.KEPT:
            self.kept += 1
        elif status == PruneStatus.AUTO_PRUNED:
            self.auto_pruned += 1
        elif status == PruneStatus.MANUALLY_PRUNED:
            self.manual_pruned += 1
        else:
            self.track_pruned += 1

    def is_partition(self) -> bool:
        return self.kept + self.track_pruned + self.auto_pruned + self.manual_pruned == self.total

    def summary(self) -> str:
        return "\n".join(f"{name}: {getattr(self, name)}"
                         for name in ("total", "kept", "track_pruned", "auto_pruned", "manual_pruned"))


@dataclass
class PipelineConfig:
    fit: FitConfig = field(default_factory=FitConfig)
    percentile: float = 0.99
    smoothing: float | None = None
    manual_flags: frozenset = frozenset()

    def __post_init__(self):
        prune_threshold(1, self.percentile)


def _lost(track: DetectionTrack, model: ShapeModel, reason: str) -> VideoAnnotation:
    n_f = len(track)
    return VideoAnnotation(
        identity=np.zeros(model.n_identity),
        expressions=np.zeros((n_f, model.n_expression)),
        poses=[],
        mean_reprojection_px=float("nan"),
        prune_status=PruneStatus.TRACK_LOST,
        prune_reason=reason,
        source_id=track.source_id,
        valid=np.zeros(n_f, dtype=bool),
    )


def annotate_video(model: ShapeModel, track: DetectionTrack, config: PipelineConfig) -> VideoAnnotation:
    """One video through filter, smoothing, fit and pruning; never raises on bad data."""
    kept, trimmed, reason = track_filter(track)
    if not kept:
        return _lost(trimmed, model, f"track filter: {reason}")
    try:
        seq = smooth_landmarks(trimmed.to_sequence(), trimmed.params.max_gap_K, config.smoothing)
        annotation = fit_video(model, seq, config.fit)
    except FacexprError as exc:
        log.warning("video %s lost: %s", track.source_id, exc)
        return _lost(trimmed, model, f"{type(exc).__name__}: {exc}")
    auto_prune(annotation, config.percentile)
    if annotation.prune_status == PruneStatus.KEPT and track.source_id in config.manual_flags:
        annotation.prune_status = PruneStatus.MANUALLY_PRUNED
        annotation.prune_reason = "manual flag"
    return annotation


def annotate_corpus(model: ShapeModel, tracks, config: PipelineConfig | None = None):
    """Annotate every track; returns ``(annotations, PruneStats)`` in input order."""
    config = config or PipelineConfig()
    annotations = []
    summary = PruneStats()
    for track in tracks:
        annotation = annotate_video(model, track, config)
        annotations.append(annotation)
        summary.add(annotation.prune_status)
    return annotations, summary


def regression_pairs(annotations, sequences, template):
    """Training pairs for the single-frame regressor from kept videos.

    Inputs are the detected (unsmoothed) landmarks of each frame that was
    both detected and fitted; targets are the fitted expressions. Returns
    ``(features, targets, groups)`` where ``groups`` names the source video so
    splits can keep videos whole.
    """
    if len(annotations) != len(sequences):
        raise ContractError("need one landmark sequence per annotation")
    feats, targets, groups = [], [], []
    for annotation, seq in zip(annotations, sequences):
        if annotation.prune_status != PruneStatus.KEPT:
            continue
        n = annotation.expressions.shape[0]
        if seq.num_frames < n:
            raise ContractError(f"sequence {seq.source_id!r} is shorter than its annotation")
        use = seq.valid[:n] & (annotation.valid if annotation.valid is not None and annotation.valid.size
                               else np.ones(n, dtype=bool))
        idx = np.flatnonzero(use)
        if idx.size == 0:
            continue
        feats.append(featurize_batch(seq.frames[idx], template))
        targets.append(annotation.expressions[idx])
        groups.extend([annotation.source_id] * idx.size)
    if not feats:
        raise InsufficientDataError("no kept frames to train on")
    return np.vstack(feats), np.vstack(targets), np.array(groups)
