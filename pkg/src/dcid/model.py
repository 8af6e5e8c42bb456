"""Dual-camera demoireing network.

A reduced ESDNet-style encoder for the wide (W) image, a light encoder for the
aligned ultra-wide (UW) image, per-scale kernel-prediction alignment (KPA) of
the UW features, learnable per-channel fusion, and a three-head multi-scale
decoder.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class ModelConfig:
    channels: tuple[int, int, int] = (32, 64, 128)
    kpa_groups: int = 4
    kpa_kernel_size: int = 3
    sam_pyramid_levels: int = 3
    scales: int = 3
    # True replaces every predicted kernel by the centred delta (the KMA-only ablation)
    kpa_identity: bool = False

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.scales != 3 or len(self.channels) != 3:
            raise ValueError("the network has exactly three scales")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ValueError(f"channels must increase with depth: {self.channels}")
        if self.kpa_kernel_size % 2 == 0 or self.kpa_kernel_size < 1:
            raise ValueError(f"kpa_kernel_size must be odd, got {self.kpa_kernel_size}")
        if self.kpa_groups < 1:
            raise ValueError("kpa_groups must be >= 1")
        if self.sam_pyramid_levels < 1:
            raise ValueError("sam_pyramid_levels must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def conv3(cin, cout, stride=1, dilation=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation)


class DilatedResidualDenseBlock(nn.Module):
    """Three dilated 3x3 convs (d = 1, 2, 3) with dense concatenation, 1x1 fuse, residual add."""

    def __init__(self, channels: int, growth: int | None = None):
        super().__init__()
        g = growth or channels
        self.convs = nn.ModuleList([conv3(channels + i * g, g, dilation=i + 1) for i in range(3)])
        self.fuse = nn.Conv2d(channels + 3 * g, channels, 1)

    def forward(self, x):
        feats = [x]
        for conv in self.convs:
            feats.append(F.relu(conv(torch.cat(feats, dim=1))))
        return x + self.fuse(torch.cat(feats, dim=1))


class ScaleAwareModule(nn.Module):
    """Pyramid feature extraction plus softmax-weighted dynamic fusion.

    Branch ``i`` runs at 1/2^i resolution; fusion weights come from the
    globally pooled input.
    """

    def __init__(self, channels: int, levels: int = 3):
        super().__init__()
        self.levels = levels
        branches = []
        for i in range(levels):
            branches.append(nn.Sequential(conv3(channels, channels), nn.ReLU(inplace=True),
                                          conv3(channels, channels), nn.ReLU(inplace=True)))
        self.branches = nn.ModuleList(branches)
        self.weight_fc = nn.Linear(channels, levels)
        self.out = conv3(channels, channels)

    def forward(self, x):
        h, w = x.shape[-2:]
        outs = []
        for i, branch in enumerate(self.branches):
            if i == 0:
                outs.append(branch(x))
                continue
            size = (max(1, h >> i), max(1, w >> i))
            y = branch(F.adaptive_avg_pool2d(x, size))
            outs.append(F.interpolate(y, size=(h, w), mode="bilinear", align_corners=False))
        wts = torch.softmax(self.weight_fc(x.mean(dim=(2, 3))), dim=1)
        mix = sum(wts[:, i, None, None, None] * o for i, o in enumerate(outs))
        return x + self.out(mix)


class EsdBlock(nn.Module):
    def __init__(self, channels: int, sam_levels: int):
        super().__init__()
        self.drdb = DilatedResidualDenseBlock(channels)
        self.sam = ScaleAwareModule(channels, sam_levels)

    def forward(self, x):
        return self.sam(self.drdb(x))


class WEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cins = (3,) + cfg.channels[:-1]
        self.down = nn.ModuleList([conv3(ci, co, stride=2) for ci, co in zip(cins, cfg.channels)])
        self.blocks = nn.ModuleList([EsdBlock(c, cfg.sam_pyramid_levels) for c in cfg.channels])

    def forward(self, x):
        feats = []
        for down, block in zip(self.down, self.blocks):
            x = block(F.relu(down(x)))
            feats.append(x)
        return feats


class UWEncoder(nn.Module):
    """Three blocks: a 2x2 stride-2 downsampling conv followed by three 3x3 convs."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cins = (3,) + cfg.channels[:-1]
        blocks = []
        for ci, co in zip(cins, cfg.channels):
            layers = [nn.Conv2d(ci, co, 2, stride=2), nn.ReLU(inplace=True)]
            for _ in range(3):
                layers += [conv3(co, co), nn.ReLU(inplace=True)]
            blocks.append(nn.Sequential(*layers))
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x):
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats


class KernelPredictionAlign(nn.Module):
    """Content-adaptive depthwise kernel for one scale.

    Pool both feature maps to K x K, concatenate (2C), two 1x1 convs
    (2C -> C -> G*C), softmax over the G groups, then combine the learnable
    bank ``P`` (G, C, K*K) into one K x K kernel per channel.
    """

    def __init__(self, channels: int, groups: int = 4, kernel_size: int = 3):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        self.c, self.g, self.k = channels, groups, kernel_size
        self.reduce = nn.Conv2d(2 * channels, channels, 1)
        self.expand = nn.Conv2d(channels, groups * channels, 1)
        delta = torch.zeros(kernel_size * kernel_size)
        delta[kernel_size * kernel_size // 2] = 1.0
        self.P = nn.Parameter(delta.repeat(groups, channels, 1) + 0.01 * torch.randn(groups, channels, kernel_size ** 2))

    def reset_identity(self):
        """Set every bank entry to the centred delta, making theta the identity."""
        with torch.no_grad():
            self.P.zero_()
            self.P[:, :, self.k * self.k // 2] = 1.0

    def predict(self, f_m, f_uw):
        if f_m.shape != f_uw.shape:
            raise ValueError(f"feature shapes differ: {tuple(f_m.shape)} vs {tuple(f_uw.shape)}")
        b = f_m.shape[0]
        k = self.k
        pooled = torch.cat([F.adaptive_avg_pool2d(f_m, k), F.adaptive_avg_pool2d(f_uw, k)], dim=1)
        logits = self.expand(F.relu(self.reduce(pooled)))            # B, G*C, K, K
        logits = logits.reshape(b, self.g, self.c, k * k)
        weights = torch.softmax(logits, dim=1)                       # over groups
        theta = (weights * self.P.unsqueeze(0)).sum(dim=1)           # B, C, K*K
        return pooled, weights, theta.reshape(b, self.c, k, k)

    @staticmethod
    def apply_kernel(f_uw, theta):
        """Depthwise conv of each sample's channel ``c`` with ``theta[b, c]``."""
        b, c, h, w = f_uw.shape
        k = theta.shape[-1]
        if k % 2 == 0:
            raise ValueError("kernel size must be odd")
        out = F.conv2d(f_uw.reshape(1, b * c, h, w), theta.reshape(b * c, 1, k, k),
                       padding=(k - 1) // 2, groups=b * c)
        return out.reshape(b, c, h, w)

    def forward(self, f_m, f_uw):
        _, weights, theta = self.predict(f_m, f_uw)
        return self.apply_kernel(f_uw, theta), weights, theta


def fuse(f_m, f_uw_aligned, alpha):
    """F_m + alpha * F~_uw with ``alpha`` (C,) broadcast over batch and space."""
    if f_m.shape != f_uw_aligned.shape:
        raise ValueError(f"feature shapes differ: {tuple(f_m.shape)} vs {tuple(f_uw_aligned.shape)}")
    return f_m + alpha.view(1, -1, 1, 1) * f_uw_aligned


class DecoderLevel(nn.Module):
    def __init__(self, cin: int, cskip: int, cout: int, sam_levels: int):
        super().__init__()
        self.merge = nn.Conv2d(cin + cskip, cout, 1)
        self.block = EsdBlock(cout, sam_levels)
        self.head = conv3(cout, 3)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x, skip):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.block(F.relu(self.merge(torch.cat([x, skip], dim=1))))
        return x, self.head(x)


class Decoder(nn.Module):
    """Coarse-to-fine; emits [I_out^1 (full), I_out^2 (1/2), I_out^3 (1/4)].

    Each head predicts a residual over the area-reduced input image.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c1, c2, c3 = cfg.channels
        L = cfg.sam_pyramid_levels
        self.level3 = DecoderLevel(c3, c2, c2, L)   # -> H/4
        self.level2 = DecoderLevel(c2, c1, c1, L)   # -> H/2
        self.level1 = DecoderLevel(c1, 3, c1, L)    # -> H, skip is the input image

    def forward(self, fused, image):
        f1, f2, f3 = fused
        x, r3 = self.level3(f3, f2)
        x, r2 = self.level2(x, f1)
        _, r1 = self.level1(x, image)
        out1 = image + r1
        out2 = F.avg_pool2d(image, 2) + r2
        out3 = F.avg_pool2d(image, 4) + r3
        return [out1, out2, out3]


class DualCameraNet(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.encoder_w = WEncoder(self.cfg)
        self.encoder_uw = UWEncoder(self.cfg)
        self.kpa = nn.ModuleList([KernelPredictionAlign(c, self.cfg.kpa_groups, self.cfg.kpa_kernel_size)
                                  for c in self.cfg.channels])
        self.alpha = nn.ParameterList([nn.Parameter(torch.zeros(c)) for c in self.cfg.channels])
        self.decoder = Decoder(self.cfg)

    def forward_with_aux(self, i_m, i_uw, uw_valid=None):
        if i_m.shape != i_uw.shape:
            raise ValueError(f"W and UW inputs differ in shape: {tuple(i_m.shape)} vs {tuple(i_uw.shape)}")
        if i_m.shape[-1] % 8 or i_m.shape[-2] % 8:
            raise ValueError(f"input dims must be multiples of 8, got {tuple(i_m.shape[-2:])}")
        f_m = self.encoder_w(i_m)
        f_uw = self.encoder_uw(i_uw)
        fused, weights, thetas, uw_feats = [], [], [], []
        for s, (fm, fu) in enumerate(zip(f_m, f_uw)):
            if uw_valid is not None:
                # a feature cell counts as valid only if its whole footprint was valid
                m = -F.adaptive_max_pool2d(-uw_valid.to(fu.dtype), fu.shape[-2:])
                fu = fu * m
            if self.cfg.kpa_identity:
                _, w, theta = self.kpa[s].predict(fm, fu)
                aligned = fu
            else:
                aligned, w, theta = self.kpa[s](fm, fu)
            uw_feats.append(fu)
            fused.append(fuse(fm, aligned, self.alpha[s]))
            weights.append(w)
            thetas.append(theta)
        outs = self.decoder(fused, i_m)
        return outs, {"group_weights": weights, "theta": thetas, "fused": fused, "uw_features": uw_feats}

    def forward(self, i_m, i_uw, uw_valid=None):
        return self.forward_with_aux(i_m, i_uw, uw_valid)[0]

    # parameter groups used by the ablation variants
    def uw_parameters(self):
        yield from self.encoder_uw.parameters()
        for kpa in self.kpa:
            yield from kpa.parameters()
        yield from self.alpha.parameters()


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def pad_to_multiple(x, multiple: int = 8):
    """Reflect-pad an (B, C, H, W) tensor on the bottom/right; returns (padded, (ph, pw))."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="reflect" if min(h, w) > max(ph, pw) else "replicate")
    return x, (ph, pw)


def to_tensor(img, dtype=torch.float32):
    """(H, W, 3) numpy -> (1, 3, H, W) tensor."""
    return torch.as_tensor(img, dtype=dtype).permute(2, 0, 1).unsqueeze(0).contiguous()


def to_image(t):
    return t.detach().squeeze(0).permute(1, 2, 0).cpu().double().numpy()


@torch.no_grad()
def restore(model: DualCameraNet, i_m, uw_aligned, uw_valid=None):
    """Full-resolution inference on numpy images; returns the clamped I_out^1."""
    model.eval()
    dtype = next(model.parameters()).dtype
    h, w = i_m.shape[:2]
    x, pads = pad_to_multiple(to_tensor(i_m, dtype))
    u, _ = pad_to_multiple(to_tensor(uw_aligned, dtype))
    m = None
    if uw_valid is not None:
        m, _ = pad_to_multiple(torch.as_tensor(uw_valid, dtype=dtype)[None, None], 8)
    out = model(x, u, m)[0][..., :h, :w].clamp(0.0, 1.0)
    return to_image(out)
