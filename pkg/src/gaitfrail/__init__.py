"""Silhouette-based gait frailty staging at desk scale.

Public surface: domain types and manifest I/O (`data`), stratified fold
planning (`splits`), clip sampling and augmentation (`clips`), the two gait
backbones with named freezing strategies (`backbones`), the classification
head and joint loss (`objective`), the training loop (`trainer`), evaluation
metrics (`metrics`), Grad-CAM (`gradcam`), the synthetic cohort generator
(`synth`), and the command-line interface (`cli`).
"""

from .data import (
    DatasetManifest,
    FrailtyLabel,
    FriedScore,
    GaitSequence,
    SilhouetteFrame,
    fried_to_label,
    load_manifest,
    validate_sequence,
)
from .metrics import PredictionSet, kappa_band, micro_auroc, weighted_kappa
from .splits import FoldPlan, make_folds, verify_no_leakage

__version__ = "0.1.0"

__all__ = [
    "FrailtyLabel",
    "FriedScore",
    "SilhouetteFrame",
    "GaitSequence",
    "DatasetManifest",
    "fried_to_label",
    "load_manifest",
    "validate_sequence",
    "FoldPlan",
    "make_folds",
    "verify_no_leakage",
    "PredictionSet",
    "micro_auroc",
    "weighted_kappa",
    "kappa_band",
    "__version__",
]
