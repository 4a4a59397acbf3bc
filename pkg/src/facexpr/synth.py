"""Synthetic ground truth: shape models, landmark videos and labelled expressions.

Everything here is a pure function of a config and an integer seed, so the
same seed always yields byte-identical data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import FRONTAL_ROTATION, CameraPose, project
from .config import from_mapping
from .errors import ConfigError, ContractError
from .fitting import LandmarkSequence, VideoAnnotation
from .model import NUM_LANDMARKS, ShapeCoefficients, ShapeModel, landmarks_3d


@dataclass
class SynthConfig:
    """Generator settings. Lengths are model units, angles degrees, noise pixels."""

    num_vertices: int = 500
    n_i: int = 157
    n_e: int = 28
    identity_scale: float = 1.0
    identity_decay: float = 0.75
    expression_scale: float = 3.0
    expression_decay: float = 0.25

    num_videos: int = 20
    frames_per_video: int = 100
    pixel_noise_sigma: float = 1.0
    gap_count: int = 0
    gap_length_min: int = 1
    gap_length_max: int = 3

    ou_theta: float = 0.05
    ou_sigma: float = 0.08
    yaw_range: float = 45.0
    yaw_offset_range: float = 0.0
    pitch_range: float = 15.0
    roll_range: float = 10.0
    camera_scale: float = 90.0
    image_center: tuple = (320.0, 240.0)

    video_margin: float = 3.0
    num_classes: int = 7
    margin: float = 6.0
    class_sigma: float = 1.0
    samples_per_class: int = 40
    num_subjects: int = 20
    seed: int = 0

    def __post_init__(self):
        positive = ("num_vertices", "n_i", "n_e", "identity_scale", "expression_scale",
                    "num_videos", "frames_per_video", "camera_scale", "class_sigma",
                    "samples_per_class", "num_subjects")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        nonneg = ("identity_decay", "expression_decay", "pixel_noise_sigma", "gap_count", "yaw_offset_range",
                  "ou_theta", "ou_sigma", "margin", "video_margin")
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)!r}")
        if not 1 <= self.gap_length_min <= self.gap_length_max:
            raise ConfigError("need 1 <= gap_length_min <= gap_length_max")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if not 0 <= self.ou_theta <= 1:
            raise ConfigError("ou_theta must lie in [0, 1]")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "SynthConfig":
        """Build from string values (as read from a key-value config file)."""
        return from_mapping(cls, mapping, "synth")


def _rng(seed, *stream) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), *stream]))


def gen_model(config: SynthConfig | None = None, seed: int | None = None) -> ShapeModel:
    """Random shape model with orthonormal bases (QR of Gaussians) and decaying scales."""
    config = config or SynthConfig()
    seed = config.seed if seed is None else seed
    n = config.num_vertices
    if config.n_i + config.n_e > 3 * n:
        raise ConfigError(f"n_i + n_e = {config.n_i + config.n_e} exceeds 3N = {3 * n}")
    if n < NUM_LANDMARKS:
        raise ConfigError(f"need at least {NUM_LANDMARKS} vertices")
    rng = _rng(seed, 1)

    # Front half of an ellipsoid, roughly face sized.
    direction = rng.normal(size=(n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    direction[:, 2] = np.abs(direction[:, 2])
    vertices = direction * np.array([0.8, 1.0, 0.6])
    mean = vertices.ravel()

    def basis(k):
        q, r = np.linalg.qr(rng.normal(size=(3 * n, k)))
        return q * np.sign(np.diag(r))

    u_id = basis(config.n_i)
    u_exp = basis(config.n_e)
    sig_id = config.identity_scale * (1.0 + np.arange(config.n_i)) ** -config.identity_decay
    sig_exp = config.expression_scale * (1.0 + np.arange(config.n_e)) ** -config.expression_decay
    ids = np.sort(rng.choice(n, size=NUM_LANDMARKS, replace=False))
    return ShapeModel(mean, u_id, sig_id, u_exp, sig_exp, ids).validate()


def make_prototypes(num_classes: int, dim: int, margin: float, sigma: float = 1.0, seed: int = 0):
    """Class means whose pairwise bisecting hyperplanes lie ``margin * sigma`` away.

    Prototypes are ``sqrt(2) * margin * sigma`` times orthonormal directions,
    so every pair is ``2 * margin * sigma`` apart.
    """
    if num_classes > dim:
        raise ConfigError(f"cannot place {num_classes} orthogonal prototypes in {dim} dimensions")
    q, r = np.linalg.qr(_rng(seed, 7).normal(size=(dim, num_classes)))
    q = q * np.sign(np.diag(r))
    return np.sqrt(2.0) * margin * sigma * q.T


def rotation_from_angles(yaw, pitch, roll) -> np.ndarray:
    """Head rotation (degrees) composed with the frontal view."""
    y, p, r = np.deg2rad([yaw, pitch, roll])
    ry = np.array([[np.cos(y), 0, np.sin(y)], [0, 1, 0], [-np.sin(y), 0, np.cos(y)]])
    rx = np.array([[1, 0, 0], [0, np.cos(p), -np.sin(p)], [0, np.sin(p), np.cos(p)]])
    rz = np.array([[np.cos(r), -np.sin(r), 0], [np.sin(r), np.cos(r), 0], [0, 0, 1]])
    return rz @ FRONTAL_ROTATION @ rx @ ry


def _smooth_path(rng, frames: int, amplitude: float, components: int = 3) -> np.ndarray:
    t = np.arange(frames) / max(frames, 1)
    out = np.zeros(frames)
    for _ in range(components):
        freq = rng.uniform(0.3, 2.0)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.sin(2 * np.pi * freq * t + phase)
    return amplitude * out / components


def camera_path(config: SynthConfig, frames: int, rng) -> list:
    yaw = _smooth_path(rng, frames, config.yaw_range)
    if config.yaw_offset_range > 0:
        yaw = yaw + rng.uniform(-config.yaw_offset_range, config.yaw_offset_range)
    pitch = _smooth_path(rng, frames, config.pitch_range)
    roll = _smooth_path(rng, frames, config.roll_range)
    scale = config.camera_scale * (1 + _smooth_path(rng, frames, 0.05))
    tx = config.image_center[0] + _smooth_path(rng, frames, 20.0)
    ty = config.image_center[1] + _smooth_path(rng, frames, 20.0)
    return [CameraPose(rotation_from_angles(yaw[f], pitch[f], roll[f]), scale[f], (tx[f], ty[f]))
            for f in range(frames)]


def stationary_std(config: SynthConfig) -> float:
    """Per-coefficient spread of the expression process around its mean."""
    theta = config.ou_theta
    return config.ou_sigma / np.sqrt(max(2 * theta - theta * theta, 1e-12)) if theta > 0 else 0.0


def expression_trajectory(config: SynthConfig, frames: int, mean, rng) -> np.ndarray:
    """Discrete Ornstein-Uhlenbeck path around ``mean`` started in stationarity."""
    theta, sigma = config.ou_theta, config.ou_sigma
    dim = mean.shape[0]
    stationary = stationary_std(config)
    e = np.empty((frames, dim))
    e[0] = mean + stationary * rng.normal(size=dim)
    for f in range(1, frames):
        e[f] = e[f - 1] + theta * (mean - e[f - 1]) + sigma * rng.normal(size=dim)
    return e


def _gap_mask(config: SynthConfig, frames: int, rng) -> np.ndarray:
    valid = np.ones(frames, dtype=bool)
    for _ in range(config.gap_count):
        length = int(rng.integers(config.gap_length_min, config.gap_length_max + 1))
        if frames - length - 2 < 1:
            continue
        start = int(rng.integers(1, frames - length - 1))
        valid[start:start + length] = False
    return valid


def render_landmarks(model: ShapeModel, identity, expression, pose: CameraPose) -> np.ndarray:
    return project(pose, landmarks_3d(model, ShapeCoefficients(identity, expression)))


def gen_video(model: ShapeModel, config: SynthConfig | None = None, seed: int | None = None,
              identity_inflation: float = 1.0, prototype=None, rigid: bool = False):
    """Render a noisy landmark video and return ``(sequence, truth)``.

    ``identity_inflation`` multiplies the standard-normal identity (used to
    fabricate off-model videos); ``rigid`` freezes the expression at zero.
    """
    config = config or SynthConfig()
    seed = config.seed if seed is None else seed
    rng = _rng(seed, 2)
    frames = config.frames_per_video
    identity = identity_inflation * rng.normal(size=model.n_identity)
    if rigid:
        expressions = np.zeros((frames, model.n_expression))
    else:
        if prototype is None:
            protos = video_prototypes(model, config)
            prototype = protos[rng.integers(protos.shape[0])]
        expressions = expression_trajectory(config, frames, np.asarray(prototype, dtype=float), rng)
    poses = camera_path(config, frames, rng)

    shapes = (model.landmark_mean + model.landmark_identity_basis @ identity)[None] + np.einsum(
        "kdn,fn->fkd", model.landmark_expression_basis, expressions)
    clean = np.stack([project(poses[f], shapes[f]) for f in range(frames)])
    noisy = clean + config.pixel_noise_sigma * rng.normal(size=clean.shape)
    valid = _gap_mask(config, frames, rng)
    noisy[~valid] = np.nan

    source_id = f"synth-{seed}"
    truth = VideoAnnotation(identity=identity, expressions=expressions, poses=poses,
                            mean_reprojection_px=0.0, source_id=source_id, valid=valid)
    return LandmarkSequence(noisy, valid, source_id), truth


@dataclass
class EmotionDataset:
    features: np.ndarray
    labels: np.ndarray
    subject_ids: np.ndarray
    prototypes: np.ndarray = field(default=None)


def gen_emotion_dataset(config: SynthConfig | None = None, seed: int | None = None) -> EmotionDataset:
    """Gaussian clusters around class prototypes, one subject id per example.

    Subjects are assigned round-robin within each class so every subject
    contributes to every class.
    """
    config = config or SynthConfig()
    seed = config.seed if seed is None else seed
    rng = _rng(seed, 3)
    protos = make_prototypes(config.num_classes, config.n_e, config.margin, config.class_sigma, seed)
    n = config.samples_per_class
    labels = np.repeat(np.arange(config.num_classes), n)
    features = protos[labels] + config.class_sigma * rng.normal(size=(labels.size, config.n_e))
    subjects = np.array([f"s{j % config.num_subjects:03d}" for j in range(labels.size)])
    order = rng.permutation(labels.size)
    return EmotionDataset(features[order], labels[order], subjects[order], protos)


@dataclass
class EmotionFrames:
    """Labelled single images: landmarks plus the expressions that produced them."""

    landmarks: np.ndarray    # N x 68 x 2
    labels: np.ndarray
    subject_ids: np.ndarray
    expressions: np.ndarray  # N x n_e


def video_prototypes(model: ShapeModel, config: SynthConfig) -> np.ndarray:
    """The emotion prototypes videos are generated around."""
    return make_prototypes(min(config.num_classes, model.n_expression), model.n_expression,
                           margin=config.video_margin, sigma=1.0, seed=config.seed)


def gen_emotion_frames(model: ShapeModel, config: SynthConfig | None = None, seed: int | None = None) -> EmotionFrames:
    """Rendered still images for the landmarks-to-label path.

    Expressions are drawn from the same prototypes and spread as the videos,
    each subject has one identity, and every image gets an independent
    head pose inside the video pose ranges.
    """
    config = config or SynthConfig()
    seed = config.seed if seed is None else seed
    rng = _rng(seed, 5)
    protos = video_prototypes(model, config)
    n = config.samples_per_class
    labels = np.repeat(np.arange(protos.shape[0]), n)
    subjects = np.arange(labels.size) % config.num_subjects
    identities = rng.normal(size=(config.num_subjects, model.n_identity))
    expressions = protos[labels] + stationary_std(config) * rng.normal(size=(labels.size, model.n_expression))
    cx, cy = config.image_center
    landmarks = np.empty((labels.size, NUM_LANDMARKS, 2))
    for k in range(labels.size):
        yaw = rng.uniform(-1, 1) * (config.yaw_range + config.yaw_offset_range)
        pitch = rng.uniform(-1, 1) * config.pitch_range
        roll = rng.uniform(-1, 1) * config.roll_range
        pose = CameraPose(rotation_from_angles(yaw, pitch, roll), config.camera_scale, (cx, cy))
        landmarks[k] = render_landmarks(model, identities[subjects[k]], expressions[k], pose)
    landmarks += config.pixel_noise_sigma * rng.normal(size=landmarks.shape)
    order = rng.permutation(labels.size)
    ids = np.array([f"s{j:03d}" for j in subjects])
    return EmotionFrames(landmarks[order], labels[order], ids[order], expressions[order])


def gen_confounded_dataset(num_subjects: int, frames_per_subject: int, dim: int, num_classes: int,
                           seed: int, noise: float = 0.1) -> EmotionDataset:
    """Features that identify the subject but carry no label information.

    Each subject gets a random embedding and a random label; frames are the
    embedding plus small noise. Any accuracy above chance on held-out
    subjects would be leakage.
    """
    if num_subjects < num_classes:
        raise ContractError("need at least as many subjects as classes")
    rng = _rng(seed, 4)
    emb = rng.normal(size=(num_subjects, dim))
    subject_labels = np.arange(num_subjects) % num_classes
    rng.shuffle(subject_labels)
    subj = np.repeat(np.arange(num_subjects), frames_per_subject)
    features = emb[subj] + noise * rng.normal(size=(subj.size, dim))
    ids = np.array([f"s{j:03d}" for j in subj])
    return EmotionDataset(features, subject_labels[subj], ids, None)
