import numpy as np
import pytest
import torch

from gaitfrail.data import (
    DatasetManifest,
    FrailtyLabel,
    FriedScore,
    GaitSequence,
    ManifestEntry,
    SilhouetteFrame,
    load_manifest,
)
from gaitfrail.synth import generate_cohort

torch.set_num_threads(2)


def make_sequence(n_frames: int, h: int = 8, w: int = 6, label=FrailtyLabel.NONFRAIL,
                  pid: str = "p0") -> GaitSequence:
    rng = np.random.default_rng(0)
    frames = [
        SilhouetteFrame(mask=(rng.random((h, w)) > 0.5).astype(np.uint8), timestamp_index=t)
        for t in range(n_frames)
    ]
    return GaitSequence(participant_id=pid, frames=frames, label=label)


def fake_manifest(class_counts: dict[FrailtyLabel, int], frame_count: int = 100) -> DatasetManifest:
    """In-memory manifest without frame directories, for split/metric tests."""
    from pathlib import Path

    entries = []
    for label, n in class_counts.items():
        for i in range(n):
            entries.append(ManifestEntry(
                participant_id=f"{label.canonical_name}_{i:03d}",
                label=label,
                fried_score=None,
                frame_dir=Path(f"{label.canonical_name}_{i:03d}"),
                frame_count=frame_count,
            ))
    return DatasetManifest(entries=entries, resolution=(64, 44))


@pytest.fixture(scope="session")
def cohort_manifest(tmp_path_factory):
    """Small noise-free synthetic cohort shared across the suite: 3 per class, 32x24."""
    out = tmp_path_factory.mktemp("cohort")
    return generate_cohort(3, frames=100, h=32, w=24, seed=11, out_dir=out, noise=0.0)


@pytest.fixture(scope="session")
def cohort_manifest_path(cohort_manifest):
    return cohort_manifest.root / "manifest.csv"


def reload_cohort(cohort_manifest) -> DatasetManifest:
    return load_manifest(cohort_manifest.root / "manifest.csv")


PAPER_CLASS_COUNTS = {
    FrailtyLabel.NONFRAIL: 25,
    FrailtyLabel.PREFRAIL: 24,
    FrailtyLabel.FRAIL: 17,
}
