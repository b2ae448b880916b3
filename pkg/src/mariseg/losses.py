"""Training objectives: focal segmentation loss, water-obstacle separation, L2 decay."""

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F

from .errors import ConfigError

LABEL_OBSTACLE = 0
LABEL_WATER = 1
LABEL_SKY = 2
LABEL_IGNORE = 4

_PT_FLOOR = 1e-12  # log stability floor on the true-class probability


@dataclass
class LossConfig:
    focal_gamma: float = 2.0
    focal_alpha: float = 1.0
    separation_weight: float = 0.01
    weight_decay: float = 1e-6
    ignore_label: int = LABEL_IGNORE

    def __post_init__(self):
        if self.focal_gamma < 0:
            raise ConfigError(f"focal_gamma must be >= 0, got {self.focal_gamma}")
        for name in ("focal_alpha", "separation_weight", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


class LossBreakdown(NamedTuple):
    total: torch.Tensor
    focal: torch.Tensor
    separation: torch.Tensor
    weight_decay: torch.Tensor


def _flatten_probs(probs, labels):
    if probs.dim() == 3:
        probs = probs.unsqueeze(0)
    if labels.dim() == 2:
        labels = labels.unsqueeze(0)
    n_classes = probs.shape[1]
    flat_p = probs.permute(0, 2, 3, 1).reshape(-1, n_classes)
    flat_t = labels.reshape(-1).long()
    return flat_p, flat_t, n_classes


def focal_loss(probs, labels, config=LossConfig()):
    """Mean over non-ignored pixels of -alpha * (1 - p_t)^gamma * log(p_t).

    ``probs`` are per-pixel class probabilities; ``p_t`` is the probability of
    the true class.  Ignored pixels are excluded before any arithmetic, so
    perturbing them cannot change the result.  An all-ignored input yields 0
    with a warning.
    """
    flat_p, flat_t, n_classes = _flatten_probs(probs, labels)
    valid = flat_t != config.ignore_label
    if not bool(valid.any()):
        warnings.warn("focal_loss: no non-ignored pixels, returning 0", stacklevel=2)
        return probs.sum() * 0.0
    t = flat_t[valid]
    if bool((t >= n_classes).any()) or bool((t < 0).any()):
        raise ConfigError(f"labels must lie in [0, {n_classes}) or equal "
                          f"ignore_label {config.ignore_label}")
    p_t = flat_p[valid].gather(1, t.unsqueeze(1)).squeeze(1).clamp_min(_PT_FLOOR)
    loss = -config.focal_alpha * (1.0 - p_t).pow(config.focal_gamma) * torch.log(p_t)
    return loss.mean()


def downsample_labels(labels, size):
    """Nearest-neighbour downsample of an integer label map to ``size``."""
    if labels.dim() == 2:
        labels = labels.unsqueeze(0)
    if tuple(labels.shape[-2:]) == tuple(size):
        return labels
    out = F.interpolate(labels.unsqueeze(1).float(), size=tuple(size), mode="nearest")
    return out.squeeze(1).to(labels.dtype)


def separation_loss(features, labels, config=LossConfig()):
    """Water-compactness vs obstacle-margin surrogate on encoder features.

    With sigma2_w the mean per-channel variance of water-pixel feature vectors
    and d2_min the smallest squared distance from an obstacle-pixel feature to
    the water mean, the loss is sigma2_w / (sigma2_w + d2_min + 1e-6): it is
    bounded in [0, 1] and falls as water features tighten and obstacles move
    away.  Labels are nearest-downsampled to the feature grid; frames lacking
    water or obstacle pixels contribute 0.
    """
    if features.dim() == 3:
        features = features.unsqueeze(0)
    labels = downsample_labels(labels, features.shape[-2:])
    n_channels = features.shape[1]
    flat_f = features.permute(0, 2, 3, 1).reshape(-1, n_channels)
    flat_t = labels.reshape(-1)
    water = flat_t == LABEL_WATER
    obstacle = flat_t == LABEL_OBSTACLE
    if not bool(water.any()) or not bool(obstacle.any()):
        return features.sum() * 0.0
    water_feats = flat_f[water]
    mu = water_feats.mean(dim=0)
    sigma2 = (water_feats - mu).pow(2).mean()
    d2_min = (flat_f[obstacle] - mu).pow(2).sum(dim=1).min()
    return sigma2 / (sigma2 + d2_min + 1e-6)


def total_loss(probs, features, labels, config=LossConfig(), parameters=()):
    """focal + separation_weight * separation + weight_decay * ||theta||^2."""
    focal = focal_loss(probs, labels, config)
    separation = separation_loss(features, labels, config)
    decay = sum((p.pow(2).sum() for p in parameters), start=focal.new_zeros(()))
    total = (focal + config.separation_weight * separation
             + config.weight_decay * decay)
    return LossBreakdown(total, focal, separation, config.weight_decay * decay)
