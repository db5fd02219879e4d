"""Deterministic parameter initialization shared by both backbones and the head.

Fan-in-scaled uniform for convolution and linear weights, zeros for all biases
and normalization offsets, ones for normalization scales.  Every random draw
goes through the caller's generator so two models built from the same seed are
bitwise identical.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn


def _fan_in(module: nn.Module) -> int:
    if isinstance(module, nn.Linear):
        return module.in_features
    kernel = 1
    for k in module.kernel_size:
        kernel *= k
    return module.in_channels // module.groups * kernel


@torch.no_grad()
def reset_module_parameters(root: nn.Module, generator: torch.Generator) -> None:
    for m in root.modules():
        if isinstance(m, (nn.Conv1d, nn.Conv2d, nn.Conv3d, nn.Linear)):
            bound = 1.0 / math.sqrt(_fan_in(m))
            m.weight.uniform_(-bound, bound, generator=generator)
            if m.bias is not None:
                m.bias.zero_()
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d, nn.BatchNorm3d)):
            if m.affine:
                m.weight.fill_(1.0)
                m.bias.zero_()
            if m.track_running_stats:
                m.running_mean.zero_()
                m.running_var.fill_(1.0)
                m.num_batches_tracked.zero_()
        elif isinstance(m, nn.LayerNorm):
            if m.elementwise_affine:
                m.weight.fill_(1.0)
                m.bias.zero_()
        if hasattr(m, "relative_position_bias_table"):
            m.relative_position_bias_table.zero_()
