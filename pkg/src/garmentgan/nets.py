"""Style-based conditional generator and multi-head discriminator.

Generator: condition embedding concatenated with z, a small mapping MLP to
the intermediate style space W, and a synthesis stack driven by AdaIN at
every block. Discriminator: residual downsampling trunk with a shared feature
vector feeding the adversarial score head and, in semi-supervised mode, the
supervised classifier head(s) C and the continuous-code encoder head E.
Supervised mode conditions the score via a projection embedding instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditions import ConditionSpec


def channels_for_resolution(resolution: int, base: int = 256, floor: int = 16):
    """Coarse-to-fine channel schedule, halving from ``base`` at 4x4."""
    n_blocks = int(resolution).bit_length() - 2
    if 2 ** (n_blocks + 1) != resolution or n_blocks < 1:
        raise ValueError(f"resolution {resolution} is not 4*2^k")
    return tuple(max(floor, base >> i) for i in range(n_blocks))


class PixelNorm(nn.Module):
    def forward(self, x):
        return x * torch.rsqrt(x.square().mean(dim=1, keepdim=True) + 1e-8)


class EqLinear(nn.Module):
    """Linear layer with runtime weight scaling (equalized learning rate)."""

    def __init__(self, in_features, out_features, lr_mul=1.0, bias_init=0.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_features, in_features) / lr_mul)
        self.bias = nn.Parameter(torch.full((out_features,), bias_init / lr_mul))
        self.scale = lr_mul / in_features ** 0.5
        self.lr_mul = lr_mul

    def forward(self, x):
        return F.linear(x, self.weight * self.scale, self.bias * self.lr_mul)


class EqConv2d(nn.Module):
    def __init__(self, in_ch, out_ch, kernel_size, padding=0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.scale = 1.0 / (in_ch * kernel_size ** 2) ** 0.5
        self.padding = padding

    def forward(self, x):
        return F.conv2d(x, self.weight * self.scale, self.bias, padding=self.padding)


class AdaIN(nn.Module):
    """Instance norm with per-channel scale/shift computed from the style."""

    def __init__(self, channels, w_dim):
        super().__init__()
        self.scale = EqLinear(w_dim, channels, bias_init=1.0)
        self.shift = EqLinear(w_dim, channels)

    def forward(self, x, w):
        y = F.instance_norm(x, eps=1e-8)
        s = self.scale(w).unsqueeze(-1).unsqueeze(-1)
        b = self.shift(w).unsqueeze(-1).unsqueeze(-1)
        return s * y + b


class SynthesisBlock(nn.Module):
    def __init__(self, in_ch, out_ch, w_dim, upsample):
        super().__init__()
        self.upsample = upsample
        self.conv1 = EqConv2d(in_ch, out_ch, 3, padding=1)
        self.adain1 = AdaIN(out_ch, w_dim)
        self.conv2 = EqConv2d(out_ch, out_ch, 3, padding=1)
        self.adain2 = AdaIN(out_ch, w_dim)

    def forward(self, x, w):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.adain1(F.leaky_relu(self.conv1(x), 0.2), w)
        x = self.adain2(F.leaky_relu(self.conv2(x), 0.2), w)
        return x


@dataclass
class GeneratorConfig:
    resolution: int = 64
    latent_dim: int = 64
    w_dim: int = 64
    mapping_depth: int = 2
    channels: tuple = None
    cond: ConditionSpec = field(default_factory=lambda: ConditionSpec(5, 6, 0))
    mapping_lr_mul: float = 0.01

    def __post_init__(self):
        if self.channels is None:
            self.channels = channels_for_resolution(self.resolution)
        self.channels = tuple(self.channels)
        if 2 ** (len(self.channels) + 1) != self.resolution:
            raise ValueError(
                f"{len(self.channels)} synthesis blocks produce resolution "
                f"{2 ** (len(self.channels) + 1)}, configured {self.resolution}")
        if self.mapping_depth < 1:
            raise ValueError("mapping_depth must be >= 1")

    @property
    def n_blocks(self) -> int:
        return len(self.channels)


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.cond = cfg.cond
        self.norm = PixelNorm()
        self.cond_embed = EqLinear(cfg.cond.dim, cfg.latent_dim)
        self.input_proj = EqLinear(2 * cfg.latent_dim, cfg.latent_dim)
        dims = [cfg.latent_dim] + [cfg.w_dim] * cfg.mapping_depth
        self.mapping = nn.ModuleList(
            EqLinear(dims[i], dims[i + 1], lr_mul=cfg.mapping_lr_mul)
            for i in range(cfg.mapping_depth))
        self.const = nn.Parameter(torch.randn(1, cfg.channels[0], 4, 4))
        blocks = []
        for i, out_ch in enumerate(cfg.channels):
            in_ch = cfg.channels[max(i - 1, 0)]
            blocks.append(SynthesisBlock(in_ch, out_ch, cfg.w_dim, upsample=i > 0))
        self.blocks = nn.ModuleList(blocks)
        self.to_rgb = EqConv2d(cfg.channels[-1], 3, 1)

    @property
    def n_blocks(self) -> int:
        return self.cfg.n_blocks

    def map_latent(self, z: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        if z.ndim != 2 or z.shape[1] != self.cfg.latent_dim:
            raise ValueError(f"z must be (B, {self.cfg.latent_dim}), got {tuple(z.shape)}")
        if z.shape[0] != c.shape[0]:
            raise ValueError("z and c batch sizes differ")
        self.cond.validate(c)
        x = torch.cat([self.norm(z), self.norm(self.cond_embed(c))], dim=1)
        x = self.input_proj(x)
        for layer in self.mapping:
            x = F.leaky_relu(layer(x), 0.2)
        return x

    def _style_list(self, ws):
        if torch.is_tensor(ws):
            return [ws] * self.n_blocks
        ws = list(ws)
        if len(ws) != self.n_blocks:
            raise ValueError(f"expected {self.n_blocks} per-block styles, got {len(ws)}")
        return ws

    def synthesize(self, ws) -> torch.Tensor:
        ws = self._style_list(ws)
        x = self.const.expand(ws[0].shape[0], -1, -1, -1)
        for block, w in zip(self.blocks, ws):
            x = block(x, w)
        return torch.tanh(self.to_rgb(x))

    def generate(self, z, c) -> torch.Tensor:
        return self.synthesize(self.map_latent(z, c))

    forward = generate


class DiscriminatorBlock(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv1 = EqConv2d(in_ch, in_ch, 3, padding=1)
        self.conv2 = EqConv2d(in_ch, out_ch, 3, padding=1)
        self.skip = EqConv2d(in_ch, out_ch, 1)

    def forward(self, x):
        y = F.leaky_relu(self.conv1(x), 0.2)
        y = F.avg_pool2d(F.leaky_relu(self.conv2(y), 0.2), 2)
        return (y + self.skip(F.avg_pool2d(x, 2))) * 0.5 ** 0.5


@dataclass
class DiscriminatorConfig:
    resolution: int = 64
    channels: tuple = None  # fine-to-coarse
    feature_dim: int = 256
    mode: str = "supervised"  # supervised: projection on c; semi_supervised: C/E heads
    cond: ConditionSpec = field(default_factory=lambda: ConditionSpec(5, 6, 0))

    def __post_init__(self):
        if self.mode not in ("supervised", "semi_supervised"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.channels is None:
            self.channels = tuple(reversed(channels_for_resolution(self.resolution)))
        self.channels = tuple(self.channels)
        if 2 ** (len(self.channels) + 1) != self.resolution:
            raise ValueError("channel schedule does not match resolution")
        if self.mode == "semi_supervised" and self.cond.d_u < 0:
            raise ValueError("d_u must be >= 0")


class Discriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        self.cond = cfg.cond
        self.from_rgb = EqConv2d(3, cfg.channels[0], 1)
        blocks = []
        chans = list(cfg.channels) + [cfg.channels[-1]]
        for i in range(len(cfg.channels) - 1):
            blocks.append(DiscriminatorBlock(chans[i], chans[i + 1]))
        blocks.append(DiscriminatorBlock(cfg.channels[-1], cfg.channels[-1]))
        self.blocks = nn.ModuleList(blocks)
        self.final_conv = EqConv2d(cfg.channels[-1], cfg.channels[-1], 3, padding=1)
        self.to_features = EqLinear(cfg.channels[-1] * 4, cfg.feature_dim)
        self.score_head = EqLinear(cfg.feature_dim, 1)
        if cfg.mode == "supervised":
            self.proj_embed = EqLinear(cfg.cond.supervised_dim, cfg.feature_dim)
        else:
            self.cls_heads = nn.ModuleDict({
                name: EqLinear(cfg.feature_dim, size)
                for name, _, size in cfg.cond.blocks()})
            if cfg.cond.d_u > 0:
                self.enc_head = EqLinear(cfg.feature_dim, cfg.cond.d_u)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.cfg.resolution:
            raise ValueError(
                f"expected {self.cfg.resolution}px input, got {x.shape[-1]}")
        y = F.leaky_relu(self.from_rgb(x), 0.2)
        for block in self.blocks:
            y = block(y)
        y = F.leaky_relu(self.final_conv(y), 0.2)  # C x 2 x 2
        return F.leaky_relu(self.to_features(y.flatten(1)), 0.2)

    def score(self, x: torch.Tensor, c: torch.Tensor = None) -> torch.Tensor:
        if self.cfg.mode == "supervised":
            if c is None:
                raise ValueError("supervised discriminator requires the condition")
            c_s = c[:, :self.cond.supervised_dim]
            self.cond.validate(torch.cat(
                [c_s, c[:, self.cond.supervised_dim:]], dim=1) if self.cond.d_u else c_s)
            feats = self.features(x)
            base = self.score_head(feats)
            proj = (self.proj_embed(c_s) * feats).sum(dim=1, keepdim=True)
            return (base + proj / self.cfg.feature_dim ** 0.5).squeeze(1)
        if c is not None:
            raise ValueError("semi-supervised discriminator takes no condition input")
        return self.score_head(self.features(x)).squeeze(1)

    forward = score

    def classify(self, x: torch.Tensor, feats: torch.Tensor = None) -> dict:
        """Per-attribute class probabilities from the shared trunk features."""
        if self.cfg.mode != "semi_supervised":
            raise RuntimeError("classifier head only exists in semi-supervised mode")
        if feats is None:
            feats = self.features(x)
        return {name: F.softmax(head(feats), dim=1)
                for name, head in self.cls_heads.items()}

    def encode(self, x: torch.Tensor, feats: torch.Tensor = None) -> torch.Tensor:
        """Linear reconstruction of the continuous code from trunk features."""
        if self.cfg.mode != "semi_supervised" or self.cond.d_u == 0:
            raise RuntimeError("encoder head requires semi-supervised mode with d_u >= 1")
        if feats is None:
            feats = self.features(x)
        return self.enc_head(feats)

    def generator_phase_parameters(self):
        """Head parameters stepped together with the generator (encoder only)."""
        return list(self.enc_head.parameters()) if hasattr(self, "enc_head") else []

    def discriminator_phase_parameters(self):
        params = list(self.from_rgb.parameters())
        for block in self.blocks:
            params += list(block.parameters())
        params += list(self.final_conv.parameters())
        params += list(self.to_features.parameters())
        params += list(self.score_head.parameters())
        if self.cfg.mode == "supervised":
            params += list(self.proj_embed.parameters())
        else:
            params += list(self.cls_heads.parameters())
        return params


def param_report(*modules) -> dict:
    """Named parameter counts, e.g. for NetworkState summaries."""
    report = {}
    total = 0
    for module in modules:
        count = sum(p.numel() for p in module.parameters())
        report[type(module).__name__.lower()] = count
        total += count
    report["total"] = total
    return report
