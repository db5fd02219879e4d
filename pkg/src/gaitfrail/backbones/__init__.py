"""Desk-scale gait backbones with named parameter groups for selective freezing."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, stored_fingerprint
from .config import (
    BackboneConfig,
    BackboneKind,
    ConfigError,
    NAMED_CONFIGS,
    full_deepgaitv2_config,
    full_swingait_config,
    toy_deepgaitv2_config,
    toy_swingait_config,
)
from .deepgait import BasicBlock2D, BasicBlockP3D, DeepGaitV2Backbone
from .freeze import (
    FREEZE_PRESETS,
    FreezeConfig,
    FreezeError,
    ParameterGroups,
    apply_freeze,
    freeze_config,
    parameter_groups,
    trainable_parameters,
)
from .swin import SwinGaitBackbone, cyclic_shift, window_partition, window_reverse


def build_backbone(config: BackboneConfig, init_seed: int = 0):
    if config.kind == BackboneKind.SWINGAIT:
        return SwinGaitBackbone(config, init_seed=init_seed)
    return DeepGaitV2Backbone(config, init_seed=init_seed)


__all__ = [
    "BackboneConfig",
    "BackboneKind",
    "ConfigError",
    "NAMED_CONFIGS",
    "toy_swingait_config",
    "toy_deepgaitv2_config",
    "full_swingait_config",
    "full_deepgaitv2_config",
    "SwinGaitBackbone",
    "DeepGaitV2Backbone",
    "BasicBlock2D",
    "BasicBlockP3D",
    "build_backbone",
    "FreezeConfig",
    "FreezeError",
    "FREEZE_PRESETS",
    "freeze_config",
    "apply_freeze",
    "parameter_groups",
    "ParameterGroups",
    "trainable_parameters",
    "save_checkpoint",
    "load_checkpoint",
    "stored_fingerprint",
    "CheckpointError",
    "cyclic_shift",
    "window_partition",
    "window_reverse",
]
