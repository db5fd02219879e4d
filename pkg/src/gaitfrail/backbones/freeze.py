"""Named freezing strategies and parameter-group bookkeeping.

The hybrid backbone exposes groups {cnn_stem, patch_embed, swin_stage1,
swin_stage2} under strategies M1-M5; the convolutional backbone exposes
{layer0..layer4} under D0-D5.  Freezing removes a group from gradient updates
and from optimizer state, and pins its normalization statistics by keeping the
group in eval mode during training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch.nn as nn

from .config import BackboneKind


class FreezeError(Exception):
    """Unknown group name or freeze/backbone mismatch."""


@dataclass(frozen=True)
class FreezeConfig:
    name: str
    backbone_kind: BackboneKind
    frozen_groups: frozenset[str]


_SWIN_GROUPS = ("cnn_stem", "patch_embed", "swin_stage1", "swin_stage2")
_DGV2_GROUPS = ("layer0", "layer1", "layer2", "layer3", "layer4")

FREEZE_PRESETS: dict[str, FreezeConfig] = {}
for _i in range(1, 6):
    FREEZE_PRESETS[f"M{_i}"] = FreezeConfig(
        name=f"M{_i}",
        backbone_kind=BackboneKind.SWINGAIT,
        frozen_groups=frozenset(_SWIN_GROUPS[: _i - 1]),
    )
for _i in range(0, 6):
    FREEZE_PRESETS[f"D{_i}"] = FreezeConfig(
        name=f"D{_i}",
        backbone_kind=BackboneKind.DEEPGAITV2,
        frozen_groups=frozenset(_DGV2_GROUPS[:_i]),
    )


def freeze_config(name: str) -> FreezeConfig:
    try:
        return FREEZE_PRESETS[name]
    except KeyError:
        raise FreezeError(
            f"unknown freeze config {name!r}; expected one of {sorted(FREEZE_PRESETS)}"
        ) from None


@dataclass
class ParameterGroups:
    """Disjoint named groups of a model's parameters (and buffers, for hashing)."""

    groups: dict[str, dict[str, nn.Parameter]] = field(default_factory=dict)
    buffers: dict[str, dict[str, object]] = field(default_factory=dict)

    def names(self) -> list[str]:
        return list(self.groups)

    def count(self, name: str) -> int:
        return sum(p.numel() for p in self.groups[name].values())

    def total(self) -> int:
        return sum(self.count(name) for name in self.groups)


def parameter_groups(model: nn.Module) -> ParameterGroups:
    """Partition a backbone's parameters by its named groups; stable across runs."""
    if not hasattr(model, "groups"):
        raise FreezeError("model does not expose named parameter groups")
    out = ParameterGroups()
    for name, module in model.groups.items():
        out.groups[name] = dict(module.named_parameters())
        out.buffers[name] = dict(module.named_buffers())
    total_direct = sum(p.numel() for p in model.parameters())
    if out.total() != total_direct:
        raise FreezeError(
            f"groups do not partition the model: {out.total()} grouped vs {total_direct} total"
        )
    return out


def apply_freeze(model: nn.Module, config: FreezeConfig) -> None:
    """Mark the config's groups untrainable and pin their normalization statistics."""
    if model.config.kind != config.backbone_kind:
        raise FreezeError(
            f"freeze config {config.name} targets {config.backbone_kind.value}, "
            f"model is {model.config.kind.value}"
        )
    unknown = config.frozen_groups - set(model.groups.keys())
    if unknown:
        raise FreezeError(f"freeze config names unknown groups: {sorted(unknown)}")
    for name, module in model.groups.items():
        frozen = name in config.frozen_groups
        for p in module.parameters():
            p.requires_grad_(not frozen)
    model.set_frozen_groups(frozenset(config.frozen_groups))


def trainable_parameters(*modules: nn.Module):
    for module in modules:
        for p in module.parameters():
            if p.requires_grad:
                yield p
