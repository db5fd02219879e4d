"""Hybrid convolutional + shifted-window attention backbone for silhouette clips.

A per-frame conv stem does all spatial reduction, a 1x1 learnable projection
embeds the stem output into tokens, and two hierarchical attention stages
(alternating window / shifted-window blocks, patch merging in between) refine
them.  Attention operates within frames; temporal mixing is deferred to the
classification head's temporal pooling.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import BackboneConfig, BackboneKind, ConfigError
from .init import reset_module_parameters

ATTN_MASK_VALUE = -100.0


def window_partition(x: torch.Tensor, win: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * num_windows, win*win, C)."""
    b, h, w, c = x.shape
    x = x.view(b, h // win, win, w // win, win, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, win * win, c)


def window_reverse(windows: torch.Tensor, win: int, h: int, w: int) -> torch.Tensor:
    """Inverse of window_partition back to (B, H, W, C)."""
    b = windows.shape[0] // ((h // win) * (w // win))
    x = windows.view(b, h // win, w // win, win, win, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, -1)


def cyclic_shift(x: torch.Tensor, shift: tuple[int, int]) -> torch.Tensor:
    """Roll the (H, W) token grid; cyclic_shift(x, s) then (-s) is the identity."""
    return torch.roll(x, shifts=(-shift[0], -shift[1]), dims=(1, 2))


class WindowAttention(nn.Module):
    """Multi-head self-attention within fixed windows, with relative position bias."""

    def __init__(self, dim: int, heads: int, win: int):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.win = win
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.relative_position_bias_table = nn.Parameter(
            torch.zeros((2 * win - 1) * (2 * win - 1), heads)
        )
        coords = torch.stack(torch.meshgrid(torch.arange(win), torch.arange(win), indexing="ij"))
        flat = coords.flatten(1)
        rel = flat[:, :, None] - flat[:, None, :]
        rel = rel.permute(1, 2, 0) + (win - 1)
        index = rel[:, :, 0] * (2 * win - 1) + rel[:, :, 1]
        self.register_buffer("relative_position_index", index, persistent=False)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        bias = self.relative_position_bias_table[self.relative_position_index.reshape(-1)]
        bias = bias.reshape(n, n, self.heads).permute(2, 0, 1)
        attn = attn + bias.unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.heads, n, n) + mask[None, :, None]
            attn = attn.view(bw, self.heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        return self.proj(out)


def build_shift_mask(grid: tuple[int, int], win: int, shift: tuple[int, int]) -> torch.Tensor:
    """Standard shifted-window attention mask blocking cross-region pairs."""
    h, w = grid
    img_mask = torch.zeros(1, h, w, 1)
    h_slices = (
        (slice(0, -win), slice(-win, -shift[0]), slice(-shift[0], None))
        if shift[0] > 0
        else (slice(None),)
    )
    w_slices = (
        (slice(0, -win), slice(-win, -shift[1]), slice(-shift[1], None))
        if shift[1] > 0
        else (slice(None),)
    )
    region = 0
    for hs in h_slices:
        for ws in w_slices:
            img_mask[:, hs, ws, :] = region
            region += 1
    windows = window_partition(img_mask, win).squeeze(-1)  # (nW, win*win)
    diff = windows.unsqueeze(1) - windows.unsqueeze(2)
    return torch.where(diff != 0, torch.full_like(diff, ATTN_MASK_VALUE), torch.zeros_like(diff))


class SwinBlock(nn.Module):
    """Pre-norm window attention block with a 2-layer MLP and residual connections."""

    def __init__(self, dim: int, heads: int, grid: tuple[int, int], win: int,
                 shifted: bool, mlp_ratio: float):
        super().__init__()
        self.grid = grid
        self.win = win
        if shifted:
            # a dimension fully covered by one window gains nothing from shifting
            self.shift = (win // 2 if grid[0] > win else 0, win // 2 if grid[1] > win else 0)
        else:
            self.shift = (0, 0)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, win)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        if self.shift != (0, 0):
            self.register_buffer("attn_mask", build_shift_mask(grid, win, self.shift), persistent=False)
        else:
            self.attn_mask = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        h, w = self.grid
        shortcut = x
        x = self.norm1(x).view(b, h, w, c)
        if self.shift != (0, 0):
            x = cyclic_shift(x, self.shift)
        windows = window_partition(x, self.win)
        windows = self.attn(windows, self.attn_mask)
        x = window_reverse(windows, self.win, h, w)
        if self.shift != (0, 0):
            x = cyclic_shift(x, (-self.shift[0], -self.shift[1]))
        x = shortcut + x.reshape(b, n, c)
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    """2x2 token concat + linear projection; halves the grid, doubles channels."""

    def __init__(self, grid: tuple[int, int], dim: int, out_dim: int):
        super().__init__()
        self.grid = grid
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, out_dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        h, w = self.grid
        x = x.view(b, h, w, c)
        x = torch.cat(
            [x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], dim=-1
        )
        x = x.view(b, (h // 2) * (w // 2), 4 * c)
        return self.reduction(self.norm(x))


class SwinStage(nn.Module):
    """Optional patch merging followed by alternating W-MSA / SW-MSA blocks."""

    def __init__(self, dim: int, heads: int, depth: int, grid: tuple[int, int],
                 win: int, mlp_ratio: float, merge_from: int | None = None):
        super().__init__()
        self.merge = PatchMerging(
            (grid[0] * 2, grid[1] * 2), merge_from, dim) if merge_from is not None else None
        self.blocks = nn.ModuleList(
            SwinBlock(dim, heads, grid, win, shifted=(i % 2 == 1), mlp_ratio=mlp_ratio)
            for i in range(depth)
        )
        self.grid = grid

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.merge is not None:
            x = self.merge(x)
        for block in self.blocks:
            x = block(x)
        return x


class SwinGaitBackbone(nn.Module):
    """Per-frame conv stem -> learnable patch projection -> hierarchical attention stages."""

    GROUP_NAMES = ("cnn_stem", "patch_embed", "swin_stage1", "swin_stage2")

    def __init__(self, config: BackboneConfig, init_seed: int = 0):
        super().__init__()
        if config.kind != BackboneKind.SWINGAIT:
            raise ConfigError(f"expected a swingait config, got {config.kind}")
        if len(config.channels) != 2:
            raise ConfigError("this backbone implements exactly two attention stages")
        self.config = config
        h, w = config.input_size
        self.padded_width = config.padded_width
        c_stem = config.stem_channels
        c1, c2 = config.channels
        grid1 = (h // 4, self.padded_width // 4)
        grid2 = (grid1[0] // 2, grid1[1] // 2)
        self.grids = (grid1, grid2)

        stem = nn.Sequential(
            nn.Conv2d(1, c_stem[0], 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(c_stem[0]),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_stem[0], c_stem[1], 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(c_stem[1]),
            nn.ReLU(inplace=True),
        )
        patch_embed = nn.Sequential(
            nn.Conv2d(c_stem[1], c1, kernel_size=1, bias=True),
        )
        self.embed_norm_dim = c1
        stage1 = SwinStage(c1, config.heads[0], config.blocks_per_stage[0], grid1,
                           config.stage_window(0), config.mlp_ratio)
        stage2 = SwinStage(c2, config.heads[1], config.blocks_per_stage[1], grid2,
                           config.stage_window(1), config.mlp_ratio, merge_from=c1)
        embed_norm = nn.LayerNorm(c1)
        self.groups = nn.ModuleDict({
            "cnn_stem": stem,
            "patch_embed": nn.ModuleDict({"proj": patch_embed, "norm": embed_norm}),
            "swin_stage1": stage1,
            "swin_stage2": stage2,
        })
        self._frozen_groups: frozenset[str] = frozenset()
        self.reset_parameters(torch.Generator().manual_seed(init_seed))

    @property
    def out_channels(self) -> int:
        return self.config.channels[-1]

    @property
    def feature_grid(self) -> tuple[int, int]:
        return self.grids[-1]

    def reset_parameters(self, generator: torch.Generator) -> None:
        reset_module_parameters(self, generator)

    def set_frozen_groups(self, names: frozenset[str]) -> None:
        self._frozen_groups = names
        self.train(self.training)

    def train(self, mode: bool = True) -> "SwinGaitBackbone":
        super().train(mode)
        if mode:
            for name in self._frozen_groups:
                self.groups[name].eval()
        return self

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        """(B, T, H, W) in [0, 1] -> feature maps (B, T, C, H', W')."""
        b, t, h, w = clips.shape
        if (h, w) != self.config.input_size:
            raise ConfigError(f"input {h}x{w} does not match config {self.config.input_size}")
        x = clips.reshape(b * t, 1, h, w)
        if self.padded_width != w:
            left = (self.padded_width - w) // 2
            x = F.pad(x, (left, self.padded_width - w - left))
        x = self.groups["cnn_stem"](x)
        x = self.groups["patch_embed"]["proj"](x)  # (BT, C1, gh, gw)
        tokens = x.flatten(2).transpose(1, 2)  # (BT, gh*gw, C1)
        tokens = self.groups["patch_embed"]["norm"](tokens)
        tokens = self.groups["swin_stage1"](tokens)
        tokens = self.groups["swin_stage2"](tokens)
        fh, fw = self.grids[1]
        fm = tokens.transpose(1, 2).reshape(b, t, self.out_channels, fh, fw)
        return fm

    DEFAULT_CAM_LAYER = "swin_stage2"

    def cam_target(self, name: str):
        """(module to hook, reshape fn to (B, T, C, h, w)) for Grad-CAM, per group name."""
        if name == "cnn_stem":
            module = self.groups["cnn_stem"]
            def reshape(out, b, t):
                return out.reshape(b, t, *out.shape[1:])
        elif name == "patch_embed":
            module = self.groups["patch_embed"]["proj"]
            def reshape(out, b, t):
                return out.reshape(b, t, *out.shape[1:])
        elif name in ("swin_stage1", "swin_stage2"):
            module = self.groups[name]
            grid = self.grids[0 if name == "swin_stage1" else 1]
            def reshape(out, b, t):
                return out.transpose(1, 2).reshape(b, t, out.shape[-1], *grid)
        else:
            raise ConfigError(f"group {name!r} does not produce a spatial feature map")
        return module, reshape
