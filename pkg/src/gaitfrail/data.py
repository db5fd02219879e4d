"""Domain types and manifest ingestion for silhouette gait datasets.

A dataset on disk is a CSV manifest plus one directory of binary PNG frames
per participant.  Frailty labels follow the clinical three-stage convention
(nonfrail / prefrail / frail) derived from the five-point Fried score.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np
from PIL import Image

BINARIZE_THRESHOLD = 128
DEFAULT_MIN_FRAMES = 80

MANIFEST_COLUMNS = ["participant_id", "fried_score", "label", "frame_dir", "frame_count"]


class DataError(Exception):
    """Base class for dataset validation failures."""


class FriedScoreError(DataError):
    """Fried score outside the valid [0, 5] range."""


class ManifestFormatError(DataError):
    """Manifest file is malformed (header, columns, or field values)."""


class DuplicateParticipantError(DataError):
    """Two manifest rows share a participant id."""


class LabelMismatchError(DataError):
    """A row's fried_score maps to a different label than the one declared."""


class MissingFrameDirectoryError(DataError):
    """A manifest row points at a frame directory that does not exist."""


class FrailtyLabel(IntEnum):
    """Ordinal frailty stage. The integer order is load-bearing for weighted Kappa."""

    NONFRAIL = 0
    PREFRAIL = 1
    FRAIL = 2

    @property
    def canonical_name(self) -> str:
        return self.name.lower()

    @classmethod
    def from_name(cls, name: str) -> "FrailtyLabel":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ManifestFormatError(
                f"unknown label {name!r}; expected one of nonfrail, prefrail, frail"
            ) from None


@dataclass(frozen=True)
class FriedScore:
    """Five-criterion clinical frailty score, an integer in [0, 5]."""

    score: int

    def __post_init__(self) -> None:
        if not isinstance(self.score, (int, np.integer)) or isinstance(self.score, bool):
            raise FriedScoreError(f"fried score must be an integer, got {self.score!r}")
        if not 0 <= self.score <= 5:
            raise FriedScoreError(f"fried score {self.score} outside valid range [0, 5]")


def fried_to_label(score: FriedScore | int) -> FrailtyLabel:
    """Map a Fried score to its frailty stage: 0 -> nonfrail, 1-2 -> prefrail, 3-5 -> frail."""
    if not isinstance(score, FriedScore):
        score = FriedScore(score)
    if score.score == 0:
        return FrailtyLabel.NONFRAIL
    if score.score <= 2:
        return FrailtyLabel.PREFRAIL
    return FrailtyLabel.FRAIL


@dataclass(frozen=True)
class SilhouetteFrame:
    """One binary silhouette mask with its original (possibly gapped) frame index."""

    mask: np.ndarray  # 2-D uint8 array of {0, 1}
    timestamp_index: int

    def __post_init__(self) -> None:
        if self.mask.ndim != 2:
            raise DataError(f"frame mask must be 2-D, got shape {self.mask.shape}")
        if self.timestamp_index < 0:
            raise DataError(f"timestamp index must be >= 0, got {self.timestamp_index}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape  # (H, W)

    def is_binary(self) -> bool:
        return bool(np.isin(self.mask, (0, 1)).all())


@dataclass
class GaitSequence:
    """All usable silhouette frames of one participant, in temporal order."""

    participant_id: str
    frames: list[SilhouetteFrame]
    label: FrailtyLabel
    fried_score: FriedScore | None = None

    def __post_init__(self) -> None:
        if not self.frames:
            raise DataError(f"participant {self.participant_id}: empty frame list")
        ts = [f.timestamp_index for f in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise DataError(
                f"participant {self.participant_id}: timestamp indices must be strictly increasing"
            )
        if self.fried_score is not None and fried_to_label(self.fried_score) != self.label:
            raise LabelMismatchError(
                f"participant {self.participant_id}: fried score {self.fried_score.score} "
                f"maps to {fried_to_label(self.fried_score).canonical_name}, "
                f"but label is {self.label.canonical_name}"
            )

    def __len__(self) -> int:
        return len(self.frames)

    def as_array(self) -> np.ndarray:
        """Stack frames into a (T, H, W) float32 array in [0, 1]."""
        return np.stack([f.mask for f in self.frames]).astype(np.float32)


@dataclass(frozen=True)
class ManifestEntry:
    participant_id: str
    label: FrailtyLabel
    fried_score: FriedScore | None
    frame_dir: Path
    frame_count: int


@dataclass
class DatasetManifest:
    """Parsed and validated manifest: one entry per participant."""

    entries: list[ManifestEntry]
    resolution: tuple[int, int]  # (H, W)
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.entries)

    def participant_ids(self) -> list[str]:
        return [e.participant_id for e in self.entries]

    def labels_by_id(self) -> dict[str, FrailtyLabel]:
        return {e.participant_id: e.label for e in self.entries}

    def class_counts(self) -> dict[FrailtyLabel, int]:
        counts = {label: 0 for label in FrailtyLabel}
        for e in self.entries:
            counts[e.label] += 1
        return counts

    def entry(self, participant_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.participant_id == participant_id:
                return e
        raise KeyError(participant_id)


def _parse_row(row: dict[str, str], line_no: int) -> tuple[str, FriedScore | None, FrailtyLabel, str, int]:
    pid = row["participant_id"].strip()
    if not pid:
        raise ManifestFormatError(f"line {line_no}: empty participant_id")
    raw_score = row["fried_score"].strip()
    score = FriedScore(int(raw_score)) if raw_score else None
    raw_label = row["label"].strip()
    if raw_label:
        label = FrailtyLabel.from_name(raw_label)
        if score is not None and fried_to_label(score) != label:
            raise LabelMismatchError(
                f"line {line_no}: participant {pid}: fried score {score.score} maps to "
                f"{fried_to_label(score).canonical_name}, but label column says {raw_label!r}"
            )
    elif score is not None:
        label = fried_to_label(score)
    else:
        raise ManifestFormatError(f"line {line_no}: participant {pid}: neither label nor fried_score given")
    try:
        frame_count = int(row["frame_count"])
    except ValueError:
        raise ManifestFormatError(
            f"line {line_no}: participant {pid}: frame_count {row['frame_count']!r} is not an integer"
        ) from None
    return pid, score, label, row["frame_dir"].strip(), frame_count


def load_manifest(
    path: str | Path,
    min_frames: int = DEFAULT_MIN_FRAMES,
    require_frame_dirs: bool = True,
) -> DatasetManifest:
    """Load and validate a CSV manifest.

    Frame directories are resolved relative to the manifest's own directory.
    Resolution is probed from the first frame of the first participant when
    frame directories are present, else left as (0, 0).
    """
    path = Path(path)
    if not path.exists():
        raise ManifestFormatError(f"manifest file {path} does not exist")
    root = path.parent
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_COLUMNS:
            raise ManifestFormatError(
                f"manifest header must be {','.join(MANIFEST_COLUMNS)}, got {reader.fieldnames}"
            )
        for line_no, row in enumerate(reader, start=2):
            pid, score, label, frame_dir, frame_count = _parse_row(row, line_no)
            if pid in seen:
                raise DuplicateParticipantError(f"duplicate participant_id {pid!r}")
            seen.add(pid)
            full_dir = root / frame_dir
            if require_frame_dirs and not full_dir.is_dir():
                raise MissingFrameDirectoryError(
                    f"participant {pid}: frame directory {full_dir} does not exist"
                )
            if frame_count < min_frames:
                raise ManifestFormatError(
                    f"participant {pid}: frame_count {frame_count} below minimum usable length {min_frames}"
                )
            entries.append(ManifestEntry(pid, label, score, Path(frame_dir), frame_count))
    if not entries:
        raise ManifestFormatError(f"manifest {path} contains no participants")
    resolution = (0, 0)
    if require_frame_dirs:
        first = sorted((root / entries[0].frame_dir).glob("*.png"))
        if first:
            with Image.open(first[0]) as im:
                resolution = (im.height, im.width)
    return DatasetManifest(entries=entries, resolution=resolution, root=root)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write a manifest back to CSV; inverse of load_manifest on valid manifests."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for e in manifest.entries:
            score = "" if e.fried_score is None else str(e.fried_score.score)
            writer.writerow(
                [e.participant_id, score, e.label.canonical_name, e.frame_dir.as_posix(), e.frame_count]
            )


def load_frame(path: str | Path, timestamp_index: int) -> SilhouetteFrame:
    """Read one 8-bit grayscale PNG and binarize at the fixed threshold."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    mask = (arr >= BINARIZE_THRESHOLD).astype(np.uint8)
    return SilhouetteFrame(mask=mask, timestamp_index=timestamp_index)


def load_sequence(manifest: DatasetManifest, participant_id: str) -> GaitSequence:
    """Load a participant's frames from disk, ordered by the index in the filename."""
    entry = manifest.entry(participant_id)
    frame_dir = manifest.root / entry.frame_dir
    files = sorted(frame_dir.glob("frame_*.png"))
    if not files:
        raise MissingFrameDirectoryError(
            f"participant {participant_id}: no frame_*.png files in {frame_dir}"
        )
    frames = [load_frame(f, int(f.stem.split("_")[1])) for f in files]
    return GaitSequence(
        participant_id=participant_id,
        frames=frames,
        label=entry.label,
        fried_score=entry.fried_score,
    )


@dataclass
class SequenceValidation:
    """Structured outcome of validate_sequence; never raised."""

    passed: bool
    reasons: list[str] = field(default_factory=list)
    bad_frame_indices: list[int] = field(default_factory=list)


def validate_sequence(seq: GaitSequence, min_frames: int = DEFAULT_MIN_FRAMES) -> SequenceValidation:
    """Check binarity, frame budget, and uniform resolution without mutating the input."""
    reasons: list[str] = []
    bad: list[int] = []
    if len(seq.frames) < min_frames:
        reasons.append(f"insufficient frames: {len(seq.frames)} < {min_frames}")
    shape = seq.frames[0].shape
    for i, frame in enumerate(seq.frames):
        ok = True
        if frame.shape != shape:
            reasons.append(f"frame {i}: resolution {frame.shape} differs from {shape}")
            ok = False
        if not frame.is_binary():
            reasons.append(f"frame {i}: non-binary values present")
            ok = False
        if not ok:
            bad.append(i)
    return SequenceValidation(passed=not reasons, reasons=reasons, bad_frame_indices=bad)


def detection_rate_report(
    manifest: DatasetManifest,
    expected_frames: int | dict[str, int],
) -> list[tuple[str, float]]:
    """Per-participant detection rate = frame_count / expected, clamped to [0, 1].

    Sorted by rate descending, then by participant id for a stable order.
    """
    rates = []
    for e in manifest.entries:
        expected = expected_frames[e.participant_id] if isinstance(expected_frames, dict) else expected_frames
        if expected <= 0:
            raise DataError(f"participant {e.participant_id}: expected_frames must be > 0, got {expected}")
        rates.append((e.participant_id, min(1.0, max(0.0, e.frame_count / expected))))
    return sorted(rates, key=lambda t: (-t[1], t[0]))
