"""Procedural synthetic gait cohort: class-separable articulated stick-blob walkers.

Frail walkers swing their legs through smaller arcs at a lower cadence and lean
further forward than non-frail walkers; prefrail parameter bands overlap both
neighbours, so the intermediate class is deliberately the hardest to separate.
Rendering is analytic (distance fields), which keeps frames exactly mirror
symmetric at zero leg swing and makes foreground area predictable.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data import (
    DatasetManifest,
    FrailtyLabel,
    FriedScore,
    SilhouetteFrame,
    load_manifest,
)

DEFAULT_HEIGHT = 64
DEFAULT_WIDTH = 44
DEFAULT_FRAMES = 300

# Parameter bands per class, as fractions of body geometry.  FRAIL bands sit
# strictly below NONFRAIL for stride and cadence; PREFRAIL straddles both.
STRIDE_BANDS = {
    FrailtyLabel.NONFRAIL: (0.55, 0.75),  # fraction of leg length swept sideways
    FrailtyLabel.PREFRAIL: (0.35, 0.60),
    FrailtyLabel.FRAIL: (0.18, 0.38),
}
CADENCE_BANDS = {
    FrailtyLabel.NONFRAIL: (0.42, 0.55),  # radians per frame
    FrailtyLabel.PREFRAIL: (0.30, 0.46),
    FrailtyLabel.FRAIL: (0.18, 0.32),
}
LEAN_BANDS = {
    FrailtyLabel.NONFRAIL: (0.00, 0.05),  # radians forward
    FrailtyLabel.PREFRAIL: (0.02, 0.10),
    FrailtyLabel.FRAIL: (0.06, 0.16),
}
HEIGHT_BAND = (0.82, 0.92)  # body height as a fraction of the frame height

FRIED_RANGE = {
    FrailtyLabel.NONFRAIL: (0, 0),
    FrailtyLabel.PREFRAIL: (1, 2),
    FrailtyLabel.FRAIL: (3, 5),
}


@dataclass(frozen=True)
class WalkerParams:
    stride_amplitude: float  # max sideways foot displacement, pixels
    cadence: float  # radians per frame
    torso_lean: float  # radians
    height: float  # body height, pixels
    noise: float  # per-pixel flip probability

    def __post_init__(self) -> None:
        for name in ("stride_amplitude", "cadence", "torso_lean", "height", "noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def class_params(
    label: FrailtyLabel,
    rng: np.random.Generator,
    frame_height: int = DEFAULT_HEIGHT,
    noise: float = 0.0,
) -> WalkerParams:
    """Draw per-participant walker parameters from label-conditioned bands."""
    body_h = float(rng.uniform(*HEIGHT_BAND)) * frame_height
    leg_len = 0.45 * body_h
    stride = float(rng.uniform(*STRIDE_BANDS[label])) * leg_len
    cadence = float(rng.uniform(*CADENCE_BANDS[label]))
    lean = float(rng.uniform(*LEAN_BANDS[label]))
    return WalkerParams(
        stride_amplitude=stride, cadence=cadence, torso_lean=lean, height=body_h, noise=noise
    )


def _capsule(xs: np.ndarray, ys: np.ndarray, p0: tuple[float, float],
             p1: tuple[float, float], radius: float) -> np.ndarray:
    """Mask of points within `radius` of the segment p0-p1."""
    vx, vy = p1[0] - p0[0], p1[1] - p0[1]
    norm_sq = vx * vx + vy * vy
    if norm_sq == 0:
        return (xs - p0[0]) ** 2 + (ys - p0[1]) ** 2 <= radius**2
    t = ((xs - p0[0]) * vx + (ys - p0[1]) * vy) / norm_sq
    t = np.clip(t, 0.0, 1.0)
    dx = xs - (p0[0] + t * vx)
    dy = ys - (p0[1] + t * vy)
    return dx * dx + dy * dy <= radius**2


def _ellipse(xs: np.ndarray, ys: np.ndarray, center: tuple[float, float],
             semi: tuple[float, float], angle: float) -> np.ndarray:
    """Mask of a filled ellipse rotated by `angle` radians."""
    ca, sa = math.cos(angle), math.sin(angle)
    x = xs - center[0]
    y = ys - center[1]
    xr = ca * x + sa * y
    yr = -sa * x + ca * y
    return (xr / semi[0]) ** 2 + (yr / semi[1]) ** 2 <= 1.0


def body_component_areas(params: WalkerParams) -> dict[str, float]:
    """Analytic areas of the walker's component shapes (overlap not subtracted)."""
    h = params.height
    leg_len, torso_len, head_r = 0.45 * h, 0.38 * h, 0.085 * h
    leg_r, arm_r = 0.050 * h, 0.035 * h
    torso_a, torso_b = 0.11 * h, torso_len / 2.0
    arm_len = 0.33 * h
    return {
        "torso": math.pi * torso_a * torso_b,
        "head": math.pi * head_r**2,
        "leg": 2.0 * leg_r * leg_len + math.pi * leg_r**2,
        "arm": 2.0 * arm_r * arm_len + math.pi * arm_r**2,
    }


def generate_walker_frame(
    phase: float, params: WalkerParams, h: int, w: int,
    rng: np.random.Generator | None = None,
) -> SilhouetteFrame:
    """Render one binary walker frame at the given gait phase.

    Hip angle is +-A*sin(phase) with A chosen so the foot sweeps
    `stride_amplitude` pixels sideways; arms counter-swing; the hip height
    follows the stance leg so the feet stay on the floor line.
    """
    body_h = params.height
    leg_len = 0.45 * body_h
    torso_len = 0.38 * body_h
    head_r = 0.085 * body_h
    leg_r = 0.050 * body_h
    arm_r = 0.035 * body_h
    arm_len = 0.33 * body_h

    swing = min(0.95, params.stride_amplitude / leg_len)
    max_angle = math.asin(swing)
    # rounding kills sub-ulp phase drift so frame(phase) == frame(phase + 2*pi)
    osc = round(math.sin(phase), 12)
    theta = max_angle * osc

    cx = (w - 1) / 2.0
    floor_y = h - 2.0
    hip = (cx, floor_y - leg_len * math.cos(theta))
    lean = params.torso_lean
    shoulder = (hip[0] + torso_len * math.sin(lean), hip[1] - torso_len * math.cos(lean))
    head_center = (
        shoulder[0] + (head_r + 0.02 * body_h) * math.sin(lean),
        shoulder[1] - (head_r + 0.02 * body_h) * math.cos(lean),
    )
    torso_center = ((hip[0] + shoulder[0]) / 2.0, (hip[1] + shoulder[1]) / 2.0)

    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    mask = np.zeros((h, w), dtype=bool)
    for sign in (+1.0, -1.0):
        ang = sign * theta
        foot = (hip[0] + leg_len * math.sin(ang), hip[1] + leg_len * math.cos(ang))
        mask |= _capsule(xs, ys, hip, foot, leg_r)
        arm_ang = -sign * 0.7 * theta  # arms counter-phase to legs
        hand = (shoulder[0] + arm_len * math.sin(arm_ang), shoulder[1] + arm_len * math.cos(arm_ang))
        mask |= _capsule(xs, ys, shoulder, hand, arm_r)
    mask |= _ellipse(xs, ys, torso_center, (0.11 * body_h, torso_len / 2.0), lean)
    mask |= (xs - head_center[0]) ** 2 + (ys - head_center[1]) ** 2 <= head_r**2

    if params.noise > 0:
        if rng is None:
            raise ValueError("noise > 0 requires an rng")
        mask = mask ^ (rng.random((h, w)) < params.noise)
    return SilhouetteFrame(mask=mask.astype(np.uint8), timestamp_index=0)


def generate_walker_sequence(
    params: WalkerParams, n_frames: int, h: int, w: int, rng: np.random.Generator,
) -> list[np.ndarray]:
    """Render a full sequence; the starting phase is drawn once per walker."""
    phase0 = float(rng.uniform(0.0, 2.0 * math.pi))
    masks = []
    for t in range(n_frames):
        frame = generate_walker_frame(phase0 + params.cadence * t, params, h, w, rng=rng)
        masks.append(frame.mask)
    return masks


def generate_cohort(
    n_per_class: int,
    frames: int = DEFAULT_FRAMES,
    h: int = DEFAULT_HEIGHT,
    w: int = DEFAULT_WIDTH,
    seed: int = 0,
    out_dir: str | Path = "cohort",
    noise: float = 0.01,
) -> DatasetManifest:
    """Write a PNG-frame cohort with a manifest; deterministic given the seed."""
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(3 * n_per_class)

    rows = []
    walker_idx = 0
    for label in sorted(FrailtyLabel):
        for i in range(n_per_class):
            rng = np.random.Generator(np.random.PCG64(children[walker_idx]))
            walker_idx += 1
            pid = f"{label.canonical_name}_{i:03d}"
            params = class_params(label, rng, frame_height=h, noise=noise)
            lo, hi = FRIED_RANGE[label]
            score = FriedScore(int(rng.integers(lo, hi + 1)))
            masks = generate_walker_sequence(params, frames, h, w, rng)
            frame_dir = out_dir / pid
            frame_dir.mkdir(exist_ok=True)
            for t, mask in enumerate(masks):
                Image.fromarray(mask * np.uint8(255), mode="L").save(frame_dir / f"frame_{t:04d}.png")
            rows.append((pid, score, label, pid, frames))

    manifest_path = out_dir / "manifest.csv"
    with open(manifest_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["participant_id", "fried_score", "label", "frame_dir", "frame_count"])
        for pid, score, label, frame_dir, n in rows:
            writer.writerow([pid, score.score, label.canonical_name, frame_dir, n])
    return load_manifest(manifest_path, min_frames=min(frames, 80))


__all__ = [
    "WalkerParams",
    "class_params",
    "generate_walker_frame",
    "generate_walker_sequence",
    "generate_cohort",
    "body_component_areas",
]
