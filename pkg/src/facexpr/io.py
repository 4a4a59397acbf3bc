"""Line-oriented text formats.

Landmark sequence (``*.lms``)::

    # facexpr landmark sequence v1
    # source_id=<id>
    # columns: frame valid x0 y0 x1 y1 ... x67 y67
    0 1 312.5 201.25 ...

Detection track (``*.trk``), possibly several faces per video::

    # facexpr detection track v1
    # source_id=<id>
    # columns: frame face present bx by bw bh x0 y0 ... x67 y67

Missing detections have ``present`` 0 and ``nan`` coordinates. Annotations
are JSON objects (one file per video), features and labels are CSV.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile

import numpy as np

from .camera import CameraPose
from .errors import DataError
from .fitting import LandmarkSequence, PruneStatus, VideoAnnotation
from .model import NUM_LANDMARKS
from .pipeline import DetectionTrack, TrackParams

SEQUENCE_HEADER = "# facexpr landmark sequence v1"
TRACK_HEADER = "# facexpr detection track v1"
_COORD_COLUMNS = " ".join(f"x{k} y{k}" for k in range(NUM_LANDMARKS))


def atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x: float) -> str:
    return repr(float(x))


def _read_records(path, header: str, width: int):
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc})") from exc
    if not lines or lines[0].strip() != header:
        raise DataError(f"{path}:1: expected header {header!r}")
    meta, rows = {}, []
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, sep, value = line[1:].strip().partition("=")
            if sep:
                meta[key.strip()] = value.strip()
            continue
        parts = line.split()
        if len(parts) != width:
            raise DataError(f"{path}:{lineno}: expected {width} fields, got {len(parts)}")
        try:
            rows.append([float(v) for v in parts])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return meta, np.array(rows, dtype=np.float64).reshape(-1, width)


def write_sequence(path, seq: LandmarkSequence) -> None:
    lines = [SEQUENCE_HEADER, f"# source_id={seq.source_id}", f"# columns: frame valid {_COORD_COLUMNS}"]
    for f in range(seq.num_frames):
        coords = seq.frames[f].ravel() if seq.valid[f] else np.full(2 * NUM_LANDMARKS, np.nan)
        lines.append(f"{f} {int(seq.valid[f])} " + " ".join(_fmt(v) for v in coords))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_sequence(path) -> LandmarkSequence:
    meta, rows = _read_records(path, SEQUENCE_HEADER, 2 + 2 * NUM_LANDMARKS)
    if rows.shape[0] == 0:
        raise DataError(f"{path}: no frames")
    if not np.array_equal(rows[:, 0], np.arange(rows.shape[0])):
        raise DataError(f"{path}: frame indices must run 0, 1, 2, ...")
    valid = rows[:, 1] != 0
    frames = rows[:, 2:].reshape(-1, NUM_LANDMARKS, 2)
    try:
        return LandmarkSequence(frames, valid, meta.get("source_id", os.path.basename(path)))
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def write_tracks(path, tracks: list, source_id: str) -> None:
    lines = [TRACK_HEADER, f"# source_id={source_id}",
             f"# columns: frame face present bx by bw bh {_COORD_COLUMNS}"]
    blank = " ".join(["nan"] * (4 + 2 * NUM_LANDMARKS))
    num_frames = max((len(t) for t in tracks), default=0)
    for f in range(num_frames):
        for face, track in enumerate(tracks):
            item = track.frames[f] if f < len(track) else None
            if item is None:
                lines.append(f"{f} {face} 0 {blank}")
            else:
                values = np.concatenate([item[0], item[1].ravel()])
                lines.append(f"{f} {face} 1 " + " ".join(_fmt(v) for v in values))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_tracks(path, params: TrackParams | None = None) -> list:
    """All face tracks in a track file, ordered by face id."""
    meta, rows = _read_records(path, TRACK_HEADER, 7 + 2 * NUM_LANDMARKS)
    source_id = meta.get("source_id", os.path.splitext(os.path.basename(path))[0])
    if rows.shape[0] == 0:
        raise DataError(f"{path}: no records")
    num_frames = int(rows[:, 0].max()) + 1
    faces = {}
    for row in rows:
        f, face = int(row[0]), int(row[1])
        frames = faces.setdefault(face, [None] * num_frames)
        if row[2] != 0:
            frames[f] = (row[3:7], row[7:].reshape(NUM_LANDMARKS, 2))
    try:
        return [DetectionTrack(faces[k], params or TrackParams(), source_id) for k in sorted(faces)]
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def annotation_to_dict(a: VideoAnnotation) -> dict:
    return {
        "source_id": a.source_id,
        "prune_status": a.prune_status.value,
        "prune_reason": a.prune_reason,
        "mean_reprojection_px": None if not np.isfinite(a.mean_reprojection_px) else a.mean_reprojection_px,
        "identity": a.identity.tolist(),
        "expressions": a.expressions.tolist(),
        "valid": [] if a.valid is None else [bool(v) for v in a.valid],
        "poses": [p.as_vector().tolist() for p in a.poses],
    }


def annotation_from_dict(d: dict) -> VideoAnnotation:
    try:
        expressions = np.array(d["expressions"], dtype=np.float64)
        n_e = expressions.shape[1] if expressions.ndim == 2 else 0
        return VideoAnnotation(
            identity=np.array(d["identity"], dtype=np.float64),
            expressions=expressions.reshape(-1, n_e),
            poses=[CameraPose.from_vector(v) for v in d["poses"]],
            mean_reprojection_px=float("nan") if d["mean_reprojection_px"] is None else d["mean_reprojection_px"],
            prune_status=PruneStatus(d["prune_status"]),
            prune_reason=d.get("prune_reason", ""),
            source_id=d.get("source_id", ""),
            valid=np.array(d.get("valid", []), dtype=bool),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed annotation record: {exc}") from exc


def write_annotation(path, annotation: VideoAnnotation) -> None:
    text = json.dumps(annotation_to_dict(annotation), sort_keys=True, indent=1)
    atomic_write_text(path, text + "\n")


def read_annotation(path) -> VideoAnnotation:
    try:
        with open(path, encoding="utf-8") as fh:
            record = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read annotation ({exc})") from exc
    return annotation_from_dict(record)


def write_matrix_csv(path, matrix, header=None) -> None:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    lines = [",".join(header)] if header else []
    lines += [",".join(_fmt(v) for v in row) for row in matrix]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_matrix_csv(path) -> np.ndarray:
    """Numeric CSV; a first row that does not parse as numbers is taken as a header."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc})") from exc
    if rows:
        try:
            [float(v) for v in rows[0]]
        except ValueError:
            rows = rows[1:]
    try:
        out = np.array([[float(v) for v in r] for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric value ({exc})") from exc
    if out.ndim != 2 or out.shape[0] == 0:
        raise DataError(f"{path}: expected a non-empty rectangular table")
    return out


def write_labels_csv(path, labels, subject_ids=None) -> None:
    lines = ["label,subject_id"]
    subjects = subject_ids if subject_ids is not None else [""] * len(labels)
    lines += [f"{int(y)},{s}" for y, s in zip(labels, subjects)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_labels_csv(path):
    """Returns ``(labels, subject_ids)``; a second column is optional."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc})") from exc
    if rows and not rows[0][0].strip().lstrip("-").isdigit():
        rows = rows[1:]
    try:
        labels = np.array([int(r[0]) for r in rows], dtype=np.int64)
    except ValueError as exc:
        raise DataError(f"{path}: labels must be integers ({exc})") from exc
    subjects = np.array([r[1] if len(r) > 1 else "" for r in rows], dtype=object)
    return labels, subjects
