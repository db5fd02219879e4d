"""Grad-CAM heatmaps over silhouette clips.

The gradient of the target-class logit with respect to a chosen group's
feature maps weights the channels; the heatmap is the ReLU of the weighted sum,
upsampled to input resolution and max-normalized per frame.  Weights are
computed per frame (gradients are not pooled over time), so the output matches
a frame-wise strip rendering.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .backbones.config import ConfigError
from .clips import Clip
from .data import FrailtyLabel
from .objective import FrailtyModel


@dataclass
class CamSequence:
    heatmaps: np.ndarray  # (T, H, W) in [0, 1]
    target_class: FrailtyLabel
    layer: str

    def __post_init__(self) -> None:
        if (self.heatmaps < 0).any() or (self.heatmaps > 1).any():
            raise ValueError("CAM heatmaps must lie in [0, 1]")


def grad_cam(
    model: FrailtyModel,
    clip: Clip,
    target_class: FrailtyLabel | int,
    layer: str | None = None,
) -> CamSequence:
    """Compute one heatmap per frame for the target class at the chosen group."""
    backbone = model.backbone
    layer = layer if layer is not None else backbone.DEFAULT_CAM_LAYER
    module, reshape = backbone.cam_target(layer)

    captured: dict[str, torch.Tensor] = {}

    def hook(_module, _inputs, output):
        # detach from upstream and re-enable grad so CAM works under any freeze config
        leaf = output.detach().requires_grad_(True)
        captured["activation"] = leaf
        return leaf

    handle = module.register_forward_hook(hook)
    try:
        model.eval()
        clips_t = torch.from_numpy(np.ascontiguousarray(clip.frames[None]))
        logits, _, _ = model(clips_t)
        score = logits[0, int(target_class)]
        if captured["activation"].grad_fn is None and not captured["activation"].requires_grad:
            raise ConfigError(f"layer {layer!r} produced no differentiable output")
        grad = torch.autograd.grad(score, captured["activation"], allow_unused=False)[0]
    finally:
        handle.remove()

    b, t = 1, clip.length
    acts = reshape(captured["activation"].detach(), b, t)  # (1, T, C, h, w)
    grads = reshape(grad, b, t)
    weights = grads.mean(dim=(3, 4), keepdim=True)  # per-frame spatial mean
    cam = F.relu((weights * acts).sum(dim=2))  # (1, T, h, w)

    h_in, w_in = clip.frames.shape[1:]
    padded_w = getattr(backbone, "padded_width", w_in)
    cam = F.interpolate(cam, size=(h_in, padded_w), mode="bilinear", align_corners=False)
    if padded_w != w_in:
        left = (padded_w - w_in) // 2
        cam = cam[..., left : left + w_in]
    cam = cam[0].numpy().astype(np.float64)
    for i in range(cam.shape[0]):
        peak = cam[i].max()
        if peak > 0:
            cam[i] /= peak
    return CamSequence(heatmaps=np.clip(cam, 0.0, 1.0), target_class=FrailtyLabel(int(target_class)),
                       layer=layer)


def heat_colormap(x: np.ndarray) -> np.ndarray:
    """Jet-style colormap: [0, 1] scalars -> uint8-range float RGB in [0, 255]."""
    r = np.clip(1.5 - np.abs(4.0 * x - 3.0), 0.0, 1.0)
    g = np.clip(1.5 - np.abs(4.0 * x - 2.0), 0.0, 1.0)
    b = np.clip(1.5 - np.abs(4.0 * x - 1.0), 0.0, 1.0)
    return np.stack([r, g, b], axis=-1) * 255.0


def render_overlay(
    clip: Clip,
    cam: CamSequence,
    out_dir: str | Path,
    alpha: float = 0.6,
) -> list[Path]:
    """Write per-frame PNGs: grayscale silhouette with an alpha-blended heatmap."""
    if cam.heatmaps.shape != clip.frames.shape:
        raise ValueError(
            f"cam shape {cam.heatmaps.shape} does not match clip shape {clip.frames.shape}"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(clip.length):
        gray = (clip.frames[i].astype(np.float64) * 255.0)[..., None].repeat(3, axis=-1)
        heat = cam.heatmaps[i]
        color = heat_colormap(heat)
        a = (alpha * heat)[..., None]
        blended = np.rint((1.0 - a) * gray + a * color).astype(np.uint8)
        path = out_dir / f"frame_{i:04d}.png"
        Image.fromarray(blended, mode="RGB").save(path)
        paths.append(path)
    return paths


def write_cam_centroids(cam: CamSequence, path: str | Path) -> None:
    """Optional CSV of per-frame CAM mass centroids for quantitative region analysis."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "centroid_x", "centroid_y"])
        t, h, w = cam.heatmaps.shape
        ys, xs = np.mgrid[0:h, 0:w]
        for i in range(t):
            mass = cam.heatmaps[i].sum()
            if mass > 0:
                cx = float((cam.heatmaps[i] * xs).sum() / mass)
                cy = float((cam.heatmaps[i] * ys).sum() / mass)
                writer.writerow([i, f"{cx:.4f}", f"{cy:.4f}"])
            else:
                writer.writerow([i, "", ""])
