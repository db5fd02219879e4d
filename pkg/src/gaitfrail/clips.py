"""Frame clip sampling (train/eval budgets) and the silhouette augmentation suite.

Training clips take a random strided window with wrap-around; eval clips are a
deterministic prefix.  All spatial augmentations share one parameter draw per
clip so the gait pattern stays coherent across frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .data import FrailtyLabel, GaitSequence

DEFAULT_TRAIN_CLIP_LENGTH = 60
DEFAULT_TRAIN_FRAME_SKIP = 3
DEFAULT_EVAL_CLIP_LENGTH = 80


class ClipError(Exception):
    pass


@dataclass
class Clip:
    frames: np.ndarray  # (T, H, W) float32 in [0, 1]
    participant_id: str
    label: FrailtyLabel

    def __post_init__(self) -> None:
        if self.frames.ndim != 3 or self.frames.shape[0] == 0:
            raise ClipError(f"clip frames must be (T, H, W) with T > 0, got {self.frames.shape}")

    @property
    def length(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class AugmentPolicy:
    """Per-transform enable flags and ranges. Defaults are documented artifact choices."""

    affine: bool = True
    affine_rotation_deg: float = 10.0
    affine_translate_frac: float = 0.10
    affine_scale_range: tuple[float, float] = (0.9, 1.1)
    flip: bool = True
    flip_probability: float = 0.5
    perspective: bool = True
    perspective_scale: float = 0.2
    cutting: bool = True
    cut_max_height_frac: float = 0.25
    rotation: bool = True
    rotation_deg: float = 10.0
    dropout: bool = True
    dropout_probability: float = 0.1

    def __post_init__(self) -> None:
        for name in ("flip_probability", "dropout_probability"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        lo, hi = self.affine_scale_range
        if lo > hi:
            raise ValueError(f"affine_scale_range must be nonempty, got ({lo}, {hi})")
        for name in ("affine_rotation_deg", "affine_translate_frac", "perspective_scale",
                     "cut_max_height_frac", "rotation_deg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(affine=False, flip=False, perspective=False, cutting=False,
                   rotation=False, dropout=False)


def training_clip_indices(n_frames: int, length: int, skip: int, start: int) -> np.ndarray:
    """Arithmetic progression start, start+skip, ... modulo the sequence length."""
    if length <= 0:
        raise ClipError(f"clip length must be > 0, got {length}")
    if skip <= 0:
        raise ClipError(f"frame skip must be > 0, got {skip}")
    return (start + skip * np.arange(length)) % n_frames


def sample_training_clip(
    seq: GaitSequence,
    length: int = DEFAULT_TRAIN_CLIP_LENGTH,
    skip: int = DEFAULT_TRAIN_FRAME_SKIP,
    rng: np.random.Generator | None = None,
) -> Clip:
    """Strided window from a uniformly random start, wrapping modulo the frame count."""
    rng = rng if rng is not None else np.random.default_rng()
    n = len(seq.frames)
    start = int(rng.integers(n))
    idx = training_clip_indices(n, length, skip, start)
    arr = seq.as_array()[idx]
    return Clip(frames=arr, participant_id=seq.participant_id, label=seq.label)


def sample_eval_clip(seq: GaitSequence, length: int = DEFAULT_EVAL_CLIP_LENGTH) -> Clip:
    """Deterministic prefix at stride 1, wrapping if the sequence is short."""
    if length <= 0:
        raise ClipError(f"clip length must be > 0, got {length}")
    n = len(seq.frames)
    idx = np.arange(length) % n
    arr = seq.as_array()[idx]
    return Clip(frames=arr, participant_id=seq.participant_id, label=seq.label)


def _warp_all(frames: np.ndarray, apply_one) -> np.ndarray:
    return np.stack([apply_one(frames[t]) for t in range(frames.shape[0])])


def augment(clip: Clip, policy: AugmentPolicy, rng: np.random.Generator | None = None) -> Clip:
    """Apply the policy's transforms with one shared spatial parameter draw per clip.

    Order: affine, perspective, standalone rotation, horizontal flip, silhouette
    cutting, frame dropout.  Frame dropout is the only per-frame random draw.
    Output shape equals input shape; values stay in [0, 1] (linear resampling).
    """
    rng = rng if rng is not None else np.random.default_rng()
    frames = clip.frames.copy()
    t_count, h, w = frames.shape

    if policy.affine:
        angle = float(rng.uniform(-policy.affine_rotation_deg, policy.affine_rotation_deg))
        tx = float(rng.uniform(-policy.affine_translate_frac, policy.affine_translate_frac)) * w
        ty = float(rng.uniform(-policy.affine_translate_frac, policy.affine_translate_frac)) * h
        scale = float(rng.uniform(*policy.affine_scale_range))
        mat = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), angle, scale)
        mat[0, 2] += tx
        mat[1, 2] += ty
        frames = _warp_all(frames, lambda f: cv2.warpAffine(
            f, mat, (w, h), flags=cv2.INTER_LINEAR, borderValue=0.0))

    if policy.perspective:
        dx, dy = policy.perspective_scale * w / 2.0, policy.perspective_scale * h / 2.0
        src = np.float32([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]])
        jitter = [(1, 1), (-1, 1), (-1, -1), (1, -1)]  # interior-pointing signs per corner
        dst = np.float32([
            [x + sx * rng.uniform(0, dx), y + sy * rng.uniform(0, dy)]
            for (x, y), (sx, sy) in zip(src, jitter)
        ])
        mat = cv2.getPerspectiveTransform(src, dst)
        frames = _warp_all(frames, lambda f: cv2.warpPerspective(
            f, mat, (w, h), flags=cv2.INTER_LINEAR, borderValue=0.0))

    if policy.rotation:
        angle = float(rng.uniform(-policy.rotation_deg, policy.rotation_deg))
        mat = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), angle, 1.0)
        frames = _warp_all(frames, lambda f: cv2.warpAffine(
            f, mat, (w, h), flags=cv2.INTER_LINEAR, borderValue=0.0))

    if policy.flip and rng.random() < policy.flip_probability:
        frames = frames[:, :, ::-1].copy()

    if policy.cutting:
        band = int(round(float(rng.uniform(0, policy.cut_max_height_frac)) * h))
        if band > 0:
            y0 = int(rng.integers(0, h - band + 1))
            frames[:, y0 : y0 + band, :] = 0.0

    if policy.dropout:
        drop = rng.random(t_count) < policy.dropout_probability
        frames[drop] = 0.0

    frames = np.clip(frames, 0.0, 1.0).astype(np.float32)
    if frames.shape != clip.frames.shape:
        raise ClipError("augmentation must preserve clip shape")
    return Clip(frames=frames, participant_id=clip.participant_id, label=clip.label)


def pad_width(frames: np.ndarray, target_w: int) -> np.ndarray:
    """Center-pad the width axis with background zeros up to target_w."""
    w = frames.shape[-1]
    if w == target_w:
        return frames
    if w > target_w:
        raise ClipError(f"cannot pad width {w} down to {target_w}")
    left = (target_w - w) // 2
    right = target_w - w - left
    pad = [(0, 0)] * (frames.ndim - 1) + [(left, right)]
    return np.pad(frames, pad, mode="constant")
