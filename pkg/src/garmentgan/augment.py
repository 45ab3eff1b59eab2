"""Differentiable augmentation pipeline for adaptive discriminator augmentation.

Four families: scale, rotate (both via a single bilinear resample with white
padding), brightness (additive) and contrast (multiplicative around the
per-image mean). Each family fires independently per image with probability
``p``; untriggered images pass through bit-identically. Gradients flow through
every transform, so augmented fakes still train the generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

KNOWN_FAMILIES = ("scale", "rotate", "brightness", "contrast")


@dataclass
class AugmentationConfig:
    families: tuple = KNOWN_FAMILIES
    max_scale: float = 1.25
    max_rotate_deg: float = 15.0
    max_brightness: float = 0.3
    max_contrast: float = 0.3

    def __post_init__(self):
        self.families = tuple(self.families)
        unknown = set(self.families) - set(KNOWN_FAMILIES)
        if unknown:
            raise ValueError(f"unknown augmentation families: {sorted(unknown)}")
        if not self.families:
            raise ValueError("families must be non-empty")
        for name in ("max_scale", "max_rotate_deg", "max_brightness", "max_contrast"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")


def augment(batch: torch.Tensor, p: float, cfg: AugmentationConfig,
            rng: torch.Generator) -> torch.Tensor:
    """Apply the configured families to ``batch`` (B x C x H x W in [-1, 1]).

    Deterministic for a fixed generator state: all random draws happen up
    front in a fixed order regardless of which images trigger.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"augmentation probability {p} outside [0, 1]")
    n = batch.shape[0]
    device = batch.device

    # Fixed draw schedule: (gate, param) per family, even for inactive ones.
    draws = {}
    for family in KNOWN_FAMILIES:
        gate = torch.rand(n, generator=rng)
        param = torch.rand(n, generator=rng)
        draws[family] = (gate.to(device), param.to(device))

    if p == 0.0:
        return batch.clone()

    def gate(family):
        if family not in cfg.families:
            return torch.zeros(n, dtype=torch.bool, device=device)
        return draws[family][0] < p

    out = batch

    scale_on, rotate_on = gate("scale"), gate("rotate")
    geo = scale_on | rotate_on
    if geo.any():
        log_s = (draws["scale"][1] * 2.0 - 1.0) * math.log(cfg.max_scale)
        s = torch.where(scale_on, torch.exp(log_s), torch.ones(n, device=device))
        theta_deg = (draws["rotate"][1] * 2.0 - 1.0) * cfg.max_rotate_deg
        theta = torch.where(rotate_on, theta_deg * math.pi / 180.0,
                            torch.zeros(n, device=device))
        # Grid maps output coords to input coords: rotate by -theta, zoom 1/s.
        cos, sin = torch.cos(theta), torch.sin(theta)
        mat = torch.zeros(n, 2, 3, device=device, dtype=batch.dtype)
        mat[:, 0, 0] = cos / s
        mat[:, 0, 1] = -sin / s
        mat[:, 1, 0] = sin / s
        mat[:, 1, 1] = cos / s
        idx = geo.nonzero(as_tuple=True)[0]
        sub = out[idx]
        grid = F.affine_grid(mat[idx], list(sub.shape), align_corners=False)
        # Shift so zero padding is white (=1 in [-1, 1]).
        warped = F.grid_sample(sub - 1.0, grid, mode="bilinear",
                               padding_mode="zeros", align_corners=False) + 1.0
        out = out.clone() if out is batch else out
        out[idx] = warped

    bright_on = gate("brightness")
    if bright_on.any():
        b = (draws["brightness"][1] * 2.0 - 1.0) * cfg.max_brightness
        b = torch.where(bright_on, b, torch.zeros(n, device=device))
        shifted = out + b.view(n, 1, 1, 1)
        out = torch.where(bright_on.view(n, 1, 1, 1), shifted, out)

    contrast_on = gate("contrast")
    if contrast_on.any():
        c = 1.0 + (draws["contrast"][1] * 2.0 - 1.0) * cfg.max_contrast
        c = torch.where(contrast_on, c, torch.ones(n, device=device))
        mean = out.mean(dim=(1, 2, 3), keepdim=True)
        adjusted = mean + (out - mean) * c.view(n, 1, 1, 1)
        out = torch.where(contrast_on.view(n, 1, 1, 1), adjusted, out)

    if out is batch:
        return batch.clone()
    touched = geo | bright_on | contrast_on
    clamped = out.clamp(-1.0, 1.0)
    return torch.where(touched.view(n, 1, 1, 1), clamped, out)
