"""Classification head and the joint weighted cross-entropy + triplet objective.

The head pools backbone feature maps over time, splits the height axis into
horizontal parts, embeds each part with its own bias-free linear map, and
classifies through a batch-normalization bottleneck with a shared linear
classifier; part logits are averaged.  The triplet loss sees the
pre-bottleneck embeddings, cross-entropy sees the aggregated logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbones.config import ConfigError
from .backbones.init import reset_module_parameters

N_CLASSES = 3
DEFAULT_PART_COUNT = 4
DEFAULT_EMBED_DIM = 64
DEFAULT_MARGIN = 0.2
_DIST_EPS = 1e-12


@dataclass(frozen=True)
class ClassWeights:
    """Per-class loss weights, positive and normalized to mean 1."""

    weights: tuple[float, float, float]

    def __post_init__(self) -> None:
        if any(w <= 0 for w in self.weights):
            raise ValueError(f"class weights must be positive, got {self.weights}")
        mean = sum(self.weights) / len(self.weights)
        if abs(mean - 1.0) > 1e-12:
            raise ValueError(f"class weights must have mean 1, got mean {mean}")

    def as_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor(self.weights, dtype=dtype)

    @classmethod
    def uniform(cls) -> "ClassWeights":
        return cls((1.0, 1.0, 1.0))


def inverse_sqrt_weights(class_counts) -> ClassWeights:
    """w_c proportional to 1/sqrt(n_c), rescaled to mean 1."""
    counts = np.asarray(list(class_counts), dtype=np.float64)
    if counts.shape != (N_CLASSES,):
        raise ValueError(f"need {N_CLASSES} class counts, got {counts.shape}")
    if (counts <= 0).any():
        raise ValueError(f"class counts must be positive, got {counts.tolist()}")
    raw = 1.0 / np.sqrt(counts)
    normalized = raw / raw.mean()
    return ClassWeights(tuple(normalized.tolist()))


class FrailtyHead(nn.Module):
    """Temporal + horizontal pooling, per-part embeddings, BN bottleneck, 3-way classifier."""

    def __init__(
        self,
        in_channels: int,
        feature_height: int,
        part_count: int = DEFAULT_PART_COUNT,
        embed_dim: int = DEFAULT_EMBED_DIM,
        init_seed: int = 0,
    ):
        super().__init__()
        if feature_height % part_count != 0:
            raise ConfigError(
                f"feature height {feature_height} not divisible by part count {part_count}"
            )
        self.part_count = part_count
        self.embed_dim = embed_dim
        self.in_channels = in_channels
        # one bias-free embedding matrix per horizontal part
        self.part_fcs = nn.Parameter(torch.empty(part_count, in_channels, embed_dim))
        self.bottleneck = nn.BatchNorm1d(part_count * embed_dim)
        self.classifier = nn.Linear(embed_dim, N_CLASSES, bias=False)
        self.reset_parameters(torch.Generator().manual_seed(init_seed))

    @torch.no_grad()
    def reset_parameters(self, generator: torch.Generator) -> None:
        bound = 1.0 / (self.in_channels**0.5)
        self.part_fcs.uniform_(-bound, bound, generator=generator)
        reset_module_parameters(self.bottleneck, generator)
        bound = 1.0 / (self.embed_dim**0.5)
        self.classifier.weight.uniform_(-bound, bound, generator=generator)

    def forward(self, fm: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, T, C, H, W) -> (embeddings (B, P, D) pre-bottleneck, logits (B, 3))."""
        b, t, c, h, w = fm.shape
        x = fm.amax(dim=1)  # temporal max pool -> (B, C, H, W)
        p = self.part_count
        x = x.view(b, c, p, h // p, w).amax(dim=(3, 4))  # (B, C, P)
        parts = x.transpose(1, 2)  # (B, P, C)
        embeddings = torch.einsum("bpc,pcd->bpd", parts, self.part_fcs)
        neck = self.bottleneck(embeddings.reshape(b, p * self.embed_dim))
        neck = neck.view(b, p, self.embed_dim)
        logits = self.classifier(neck).mean(dim=1)  # (B, 3)
        return embeddings, logits


class FrailtyModel(nn.Module):
    """Backbone plus head, exposing the combined named parameter groups."""

    def __init__(self, backbone: nn.Module, head: FrailtyHead):
        super().__init__()
        self.backbone = backbone
        self.head = head
        self._frozen_head = False

    @property
    def config(self):
        return self.backbone.config

    @property
    def groups(self) -> dict[str, nn.Module]:
        return {**dict(self.backbone.groups.items()), "head": self.head}

    def set_frozen_groups(self, names: frozenset[str]) -> None:
        self.backbone.set_frozen_groups(frozenset(n for n in names if n != "head"))
        self._frozen_head = "head" in names
        self.train(self.training)

    def train(self, mode: bool = True) -> "FrailtyModel":
        super().train(mode)
        if mode:
            self.backbone.train(mode)  # re-applies the backbone's frozen-group eval state
            if self._frozen_head:
                self.head.eval()
        return self

    def forward(self, clips: torch.Tensor):
        fm = self.backbone(clips)
        embeddings, logits = self.head(fm)
        return logits, embeddings, fm


def weighted_cross_entropy(
    logits: torch.Tensor,
    labels: torch.Tensor,
    weights: ClassWeights | None = None,
) -> torch.Tensor:
    """Mean of w_y * (-log softmax(logits)[y]), normalized by the summed weights."""
    log_probs = F.log_softmax(logits, dim=1)
    nll = -log_probs[torch.arange(logits.shape[0]), labels]
    if weights is None:
        return nll.mean()
    w = weights.as_tensor(dtype=logits.dtype).to(logits.device)[labels]
    return (w * nll).sum() / w.sum()


def batch_all_triplet(
    embeddings: torch.Tensor,
    labels: torch.Tensor,
    margin: float = DEFAULT_MARGIN,
) -> tuple[torch.Tensor, int]:
    """Batch-all triplet loss over every part.

    Per part, every ordered (anchor, positive, negative) triple with
    y_a == y_p != y_n and a != p contributes max(0, margin + d_ap - d_an);
    the per-part loss averages the strictly positive contributions, and parts
    are averaged.  Returns (loss, number of valid triples); (0, 0) when no
    valid triple exists.
    """
    if embeddings.dim() == 2:
        embeddings = embeddings.unsqueeze(1)
    b, p, _ = embeddings.shape
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(b, dtype=torch.bool, device=labels.device)
    pos_pair = same & ~eye
    neg_pair = ~same
    valid = pos_pair[:, :, None] & neg_pair[:, None, :]  # (a, p, n)
    n_valid = int(valid.sum().item())
    if n_valid == 0:
        return embeddings.new_zeros(()), 0

    e = embeddings.transpose(0, 1)  # (P, B, D): per-part pairwise distances below
    sq = (e[:, :, None, :] - e[:, None, :, :]).pow(2).sum(-1)
    dist = torch.sqrt(torch.clamp(sq, min=_DIST_EPS))
    hinge = F.relu(margin + dist[:, :, :, None] - dist[:, :, None, :])  # (P, a, p, n)
    hinge = hinge * valid[None].to(hinge.dtype)
    per_part = []
    for part in range(p):
        terms = hinge[part][valid]
        positive = terms[terms > 0]
        per_part.append(positive.mean() if positive.numel() > 0 else hinge.new_zeros(()))
    return torch.stack(per_part).mean(), n_valid


@dataclass(frozen=True)
class LossConfig:
    margin: float = DEFAULT_MARGIN
    lambda_ce: float = 1.0
    lambda_triplet: float = 1.0
    class_weights: ClassWeights | None = None


@dataclass
class LossBreakdown:
    ce: float
    triplet: float
    total: float
    valid_triplet_count: int


def joint_loss(
    fm: torch.Tensor,
    labels: torch.Tensor,
    head: FrailtyHead,
    config: LossConfig = LossConfig(),
) -> tuple[torch.Tensor, LossBreakdown]:
    """total = lambda_ce * CE(aggregated logits) + lambda_triplet * triplet(pre-BN embeddings)."""
    embeddings, logits = head(fm)
    ce = weighted_cross_entropy(logits, labels, config.class_weights)
    triplet, n_valid = batch_all_triplet(embeddings, labels, config.margin)
    total = config.lambda_ce * ce + config.lambda_triplet * triplet
    breakdown = LossBreakdown(
        ce=float(ce.detach()), triplet=float(triplet.detach()),
        total=float(total.detach()), valid_triplet_count=n_valid,
    )
    return total, breakdown
