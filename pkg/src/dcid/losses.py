"""Multi-scale L1 + perceptual objective.

The perceptual term compares features from a frozen extractor ``phi``.
Pretrained classification weights are not available here, so the default
``phi`` is a small randomly initialised convolution stack with a fixed seed.
Any frozen module returning a list of feature maps can stand in for it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

PERCEPTUAL_SEED = 2024


class FrozenFeatures(nn.Module):
    """Six 3x3 convs with taps after convs 2, 4 and 6 (strides 1, 2, 4)."""

    widths = (16, 32, 64)

    def __init__(self, seed: int = PERCEPTUAL_SEED):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        convs = []
        cin = 3
        for i, w in enumerate(self.widths):
            stride = 1 if i == 0 else 2
            convs += [nn.Conv2d(cin, w, 3, stride=stride, padding=1), nn.Conv2d(w, w, 3, padding=1)]
            cin = w
        self.convs = nn.ModuleList(convs)
        with torch.no_grad():
            for conv in self.convs:
                fan_in = conv.in_channels * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * (2.0 / fan_in) ** 0.5)
                conv.bias.copy_(0.01 * torch.randn(conv.bias.shape, generator=g))
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # phi never leaves eval mode
        return super().train(False)

    def forward(self, x):
        taps = []
        x = x - 0.5
        for i, conv in enumerate(self.convs):
            x = F.relu(conv(x))
            if i % 2 == 1:
                taps.append(x)
        return taps


_DEFAULT_PHI: dict[tuple, FrozenFeatures] = {}


def default_extractor(dtype=torch.float32) -> FrozenFeatures:
    key = (dtype,)
    if key not in _DEFAULT_PHI:
        _DEFAULT_PHI[key] = FrozenFeatures().to(dtype)
    return _DEFAULT_PHI[key]


@dataclass
class LossConfig:
    lambda_p: float = 2.0
    feature_extractor: nn.Module | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.lambda_p >= 0:
            raise ValueError(f"lambda_p must be >= 0, got {self.lambda_p}")

    def extractor(self, dtype) -> nn.Module:
        return self.feature_extractor if self.feature_extractor is not None else default_extractor(dtype)


def perceptual_features(img, extractor: nn.Module | None = None) -> list:
    """Feature maps at the three tap points for a (3, h, w) or (B, 3, h, w) tensor."""
    if img.dim() == 3:
        img = img.unsqueeze(0)
    h, w = img.shape[-2:]
    if h < 16 or w < 16:
        raise ValueError(f"perceptual features need at least 16x16 input, got {h}x{w}")
    phi = extractor if extractor is not None else default_extractor(img.dtype)
    return phi(img)


def gt_pyramid(gt, levels: int = 3) -> list:
    """Area-downsampled ground truths at scales 1, 1/2, 1/4."""
    return [gt if i == 0 else F.avg_pool2d(gt, 2 ** i) for i in range(levels)]


def multiscale_loss(outputs, gt, cfg: LossConfig | None = None):
    """Sum over scales of L1 plus ``lambda_p`` times the summed per-tap feature L1.

    Returns ``(total, components)``. ``components`` maps ``l1_i`` to the L1
    term and ``perc_i`` to the already weighted perceptual term of scale i,
    so the components add up to ``total``.
    """
    cfg = cfg or LossConfig()
    targets = gt_pyramid(gt, len(outputs))
    total = gt.new_zeros(())
    components = {}
    phi = cfg.extractor(gt.dtype) if cfg.lambda_p > 0 else None
    for i, (out, tgt) in enumerate(zip(outputs, targets), start=1):
        if out.shape != tgt.shape:
            raise ValueError(f"output {i} has shape {tuple(out.shape)}, expected {tuple(tgt.shape)}")
        l1 = (out - tgt).abs().mean()
        if phi is not None:
            fo = perceptual_features(out, phi)
            with torch.no_grad():
                ft = perceptual_features(tgt, phi)
            perc = cfg.lambda_p * sum((a - b).abs().mean() for a, b in zip(fo, ft))
        else:
            perc = gt.new_zeros(())
        components[f"l1_{i}"] = l1
        components[f"perc_{i}"] = perc
        total = total + l1 + perc
    return total, components
