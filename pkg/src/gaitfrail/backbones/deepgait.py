"""Convolutional backbone with pseudo-3D residual stages for silhouette clips.

Layer 0 is a plain convolutional stem; layer 1 stacks 2-D residual blocks (two
spatial convolutions with batch norm and ReLU under an identity shortcut);
layers 2-4 stack pseudo-3D blocks that factorize 3-D convolution into a
spatial convolution followed by a temporal one.  Layers 2 and 3 downsample
spatially with stride-2 convolutions; the temporal axis is preserved
throughout.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .config import BackboneConfig, BackboneKind, ConfigError
from .init import reset_module_parameters


class BasicBlock2D(nn.Module):
    """Two per-frame spatial convolutions with an identity shortcut."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv3d(channels, channels, (1, 3, 3), padding=(0, 1, 1), bias=False)
        self.bn1 = nn.BatchNorm3d(channels)
        self.conv2 = nn.Conv3d(channels, channels, (1, 3, 3), padding=(0, 1, 1), bias=False)
        self.bn2 = nn.BatchNorm3d(channels)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        branch = self.relu(self.bn1(self.conv1(x)))
        branch = self.bn2(self.conv2(branch))
        return self.relu(x + branch)


class BasicBlockP3D(nn.Module):
    """Spatial conv then temporal conv, with an optionally downsampling shortcut."""

    def __init__(self, in_channels: int, out_channels: int, spatial_stride: int = 1):
        super().__init__()
        stride = (1, spatial_stride, spatial_stride)
        self.conv_spatial = nn.Conv3d(
            in_channels, out_channels, (1, 3, 3), stride=stride, padding=(0, 1, 1), bias=False
        )
        self.bn_spatial = nn.BatchNorm3d(out_channels)
        self.conv_temporal = nn.Conv3d(
            out_channels, out_channels, (3, 1, 1), padding=(1, 0, 0), bias=False
        )
        self.bn_temporal = nn.BatchNorm3d(out_channels)
        self.relu = nn.ReLU(inplace=True)
        if spatial_stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv3d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm3d(out_channels),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        branch = self.relu(self.bn_spatial(self.conv_spatial(x)))
        branch = self.bn_temporal(self.conv_temporal(branch))
        return self.relu(self.shortcut(x) + branch)


class DeepGaitV2Backbone(nn.Module):
    """Conv stem plus four residual stages, indexed layer0 (shallow) to layer4 (deep)."""

    GROUP_NAMES = ("layer0", "layer1", "layer2", "layer3", "layer4")
    SPATIAL_STRIDES = (1, 2, 2, 1)  # layers 1-4

    def __init__(self, config: BackboneConfig, init_seed: int = 0):
        super().__init__()
        if config.kind != BackboneKind.DEEPGAITV2:
            raise ConfigError(f"expected a deepgaitv2 config, got {config.kind}")
        self.config = config
        c1, c2, c3, c4 = config.channels
        n1, n2, n3, n4 = config.blocks_per_stage

        layer0 = nn.Sequential(
            nn.Conv3d(1, c1, (1, 3, 3), padding=(0, 1, 1), bias=False),
            nn.BatchNorm3d(c1),
            nn.ReLU(inplace=True),
        )
        layer1 = nn.Sequential(*[BasicBlock2D(c1) for _ in range(n1)])
        layer2 = self._p3d_stack(c1, c2, n2, stride=2)
        layer3 = self._p3d_stack(c2, c3, n3, stride=2)
        layer4 = self._p3d_stack(c3, c4, n4, stride=1)
        self.groups = nn.ModuleDict({
            "layer0": layer0, "layer1": layer1, "layer2": layer2,
            "layer3": layer3, "layer4": layer4,
        })
        self._frozen_groups: frozenset[str] = frozenset()
        self.reset_parameters(torch.Generator().manual_seed(init_seed))

    @staticmethod
    def _p3d_stack(in_c: int, out_c: int, blocks: int, stride: int) -> nn.Sequential:
        layers = [BasicBlockP3D(in_c, out_c, spatial_stride=stride)]
        layers += [BasicBlockP3D(out_c, out_c) for _ in range(blocks - 1)]
        return nn.Sequential(*layers)

    @property
    def out_channels(self) -> int:
        return self.config.channels[-1]

    @property
    def feature_grid(self) -> tuple[int, int]:
        h, w = self.config.input_size
        return h // 4, w // 4

    def reset_parameters(self, generator: torch.Generator) -> None:
        reset_module_parameters(self, generator)

    def set_frozen_groups(self, names: frozenset[str]) -> None:
        self._frozen_groups = names
        self.train(self.training)

    def train(self, mode: bool = True) -> "DeepGaitV2Backbone":
        super().train(mode)
        if mode:
            for name in self._frozen_groups:
                self.groups[name].eval()
        return self

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        """(B, T, H, W) in [0, 1] -> feature maps (B, T, C, H/4, W/4)."""
        b, t, h, w = clips.shape
        if (h, w) != self.config.input_size:
            raise ConfigError(f"input {h}x{w} does not match config {self.config.input_size}")
        x = clips.unsqueeze(1)  # (B, 1, T, H, W)
        for name in self.GROUP_NAMES:
            x = self.groups[name](x)
        return x.permute(0, 2, 1, 3, 4).contiguous()  # (B, T, C, H', W')

    DEFAULT_CAM_LAYER = "layer4"

    def cam_target(self, name: str):
        """(module to hook, reshape fn to (B, T, C, h, w)) for Grad-CAM, per group name."""
        if name not in self.GROUP_NAMES:
            raise ConfigError(f"group {name!r} does not produce a spatial feature map")
        module = self.groups[name]
        def reshape(out, b, t):
            return out.permute(0, 2, 1, 3, 4)
        return module, reshape
