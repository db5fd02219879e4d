"""Backbone configuration and derived geometry.

Both desk-scale backbones reduce spatial resolution by a total factor of 4.
The hybrid attention backbone additionally needs every attention-stage grid to
be divisible by that stage's window, so its constructor derives a centered
zero-pad of the input width (silhouette background is zero, so padding is a
wider empty margin).  All geometry problems are raised at construction, never
at forward time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum


class ConfigError(Exception):
    """Invalid backbone geometry or option combination."""


class BackboneKind(str, Enum):
    SWINGAIT = "swingait"
    DEEPGAITV2 = "deepgaitv2"


@dataclass(frozen=True)
class BackboneConfig:
    kind: BackboneKind
    input_size: tuple[int, int] = (64, 44)  # (H, W)
    channels: tuple[int, ...] = ()  # per stage (swin: 2 stages; deepgait: layers 1-4)
    stem_channels: tuple[int, ...] = ()  # swin conv stem widths
    blocks_per_stage: tuple[int, ...] = ()
    window_size: int = 4  # stage-1 attention window; halves with each patch merging
    heads: tuple[int, ...] = ()  # attention heads per swin stage
    mlp_ratio: float = 2.0
    toy_scale: bool = True
    name: str = ""

    # swin geometry, resolved at validation time
    padded_width: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        if self.kind == BackboneKind.SWINGAIT:
            object.__setattr__(self, "padded_width", self._validate_swin())
        else:
            self._validate_deepgait()

    # both backbones downsample spatially by 4 overall
    STEM_DOWNSAMPLE = 4

    def _validate_swin(self) -> int:
        h, w = self.input_size
        n_stages = len(self.channels)
        if n_stages < 1:
            raise ConfigError("swin config needs at least one stage")
        if len(self.heads) != n_stages or len(self.blocks_per_stage) != n_stages:
            raise ConfigError("heads and blocks_per_stage must match the stage count")
        for c, n_heads in zip(self.channels, self.heads):
            if c % n_heads != 0:
                raise ConfigError(f"stage dim {c} not divisible by heads {n_heads}")
        if h % self.STEM_DOWNSAMPLE != 0:
            raise ConfigError(f"input height {h} not divisible by stem downsample {self.STEM_DOWNSAMPLE}")
        gh = h // self.STEM_DOWNSAMPLE
        for stage in range(n_stages):
            win = self.stage_window(stage)
            if win < 1:
                raise ConfigError(f"stage {stage} window collapsed below 1 (window_size too small)")
            if gh % win != 0:
                raise ConfigError(f"stage {stage}: grid height {gh} not divisible by window {win}")
            if stage < n_stages - 1:
                if gh % 2 != 0:
                    raise ConfigError(f"stage {stage}: grid height {gh} must be even for patch merging")
                gh //= 2
        # width may be zero-padded; find the smallest compatible padded width
        for wp in range(w, w + 16 * self.STEM_DOWNSAMPLE * max(1, self.window_size)):
            if wp % self.STEM_DOWNSAMPLE != 0:
                continue
            gw = wp // self.STEM_DOWNSAMPLE
            ok = True
            for stage in range(n_stages):
                win = self.stage_window(stage)
                if gw % win != 0:
                    ok = False
                    break
                if stage < n_stages - 1:
                    if gw % 2 != 0:
                        ok = False
                        break
                    gw //= 2
            if ok:
                return wp
        raise ConfigError(
            f"no compatible padded width found for input width {w} with window {self.window_size}"
        )

    def _validate_deepgait(self) -> None:
        if len(self.channels) != 4:
            raise ConfigError(f"deepgait config needs 4 stage channels, got {self.channels}")
        if len(self.blocks_per_stage) != 4:
            raise ConfigError(f"deepgait config needs 4 block counts, got {self.blocks_per_stage}")
        h, w = self.input_size
        if h % self.STEM_DOWNSAMPLE != 0 or w % self.STEM_DOWNSAMPLE != 0:
            raise ConfigError(
                f"input {h}x{w} not divisible by cumulative downsample {self.STEM_DOWNSAMPLE}"
            )

    def stage_window(self, stage: int) -> int:
        """Stage-1 window halves with each merging so windows-per-side stays constant."""
        return self.window_size // (2**stage)

    def feature_shape(self) -> tuple[int, int, int]:
        """(C, H', W') of the backbone output, from the declared schedule."""
        h, w = self.input_size
        if self.kind == BackboneKind.DEEPGAITV2:
            return self.channels[-1], h // 4, w // 4
        reduce = self.STEM_DOWNSAMPLE * 2 ** (len(self.channels) - 1)
        return self.channels[-1], h // reduce, self.padded_width // reduce

    def fingerprint(self) -> str:
        return (
            f"kind={self.kind.value};input={self.input_size[0]}x{self.input_size[1]};"
            f"channels={','.join(map(str, self.channels))};"
            f"stem={','.join(map(str, self.stem_channels))};"
            f"blocks={','.join(map(str, self.blocks_per_stage))};"
            f"window={self.window_size};heads={','.join(map(str, self.heads))};"
            f"mlp={self.mlp_ratio}"
        )


def toy_swingait_config(input_size: tuple[int, int] = (64, 44)) -> BackboneConfig:
    return BackboneConfig(
        kind=BackboneKind.SWINGAIT,
        input_size=input_size,
        channels=(16, 32),
        stem_channels=(8, 16),
        blocks_per_stage=(2, 2),
        window_size=4,
        heads=(2, 4),
        mlp_ratio=2.0,
        toy_scale=True,
        name="swingait-toy",
    )


def toy_deepgaitv2_config(input_size: tuple[int, int] = (64, 44)) -> BackboneConfig:
    return BackboneConfig(
        kind=BackboneKind.DEEPGAITV2,
        input_size=input_size,
        channels=(16, 32, 64, 128),
        blocks_per_stage=(2, 2, 2, 2),
        toy_scale=True,
        name="deepgaitv2-toy",
    )


def full_swingait_config(input_size: tuple[int, int] = (64, 44)) -> BackboneConfig:
    """Full-scale hybrid config; dimensions are artifact choices, not published."""
    return BackboneConfig(
        kind=BackboneKind.SWINGAIT,
        input_size=input_size,
        channels=(96, 192),
        stem_channels=(32, 96),
        blocks_per_stage=(2, 6),
        window_size=4,
        heads=(3, 6),
        mlp_ratio=4.0,
        toy_scale=False,
        name="swingait-full",
    )


def full_deepgaitv2_config(input_size: tuple[int, int] = (64, 44)) -> BackboneConfig:
    """Full-scale convolutional config with the published 64-to-512 channel ramp."""
    return BackboneConfig(
        kind=BackboneKind.DEEPGAITV2,
        input_size=input_size,
        channels=(64, 128, 256, 512),
        blocks_per_stage=(1, 4, 4, 1),
        toy_scale=False,
        name="deepgaitv2-full",
    )


NAMED_CONFIGS = {
    "swingait-toy": toy_swingait_config,
    "deepgaitv2-toy": toy_deepgaitv2_config,
    "swingait-full": full_swingait_config,
    "deepgaitv2-full": full_deepgaitv2_config,
}
