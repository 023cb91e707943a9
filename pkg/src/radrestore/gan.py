"""Latent-modulated residual tri-plane generator and patch discriminator.

Deliberately small: a mapping MLP z -> w, a learned 8x8 constant grid grown
by {nearest upsample, 3x3 conv, per-channel affine modulation by w, leaky
ReLU} blocks up to the fine-plane resolution, and a strided conv patch
discriminator with a minibatch standard-deviation layer before its head.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .field import TriPlaneSet


def _seed_module(module: nn.Module, rng: np.random.Generator,
                 scales: dict = None) -> None:
    """Deterministic uniform fan-in init of every conv/linear from one rng.

    `scales` maps module-name prefixes to a weight gain. Layers feeding an
    activation need a gain that compensates its small-signal slope, or the
    stack attenuates input variation layer by layer until the output is
    effectively input-independent: gain 2*sqrt(2) keeps variance through
    conv + softplus (slope 1/2 at 0), sqrt(2) through conv + leaky relu.
    """
    scales = scales or {}
    for name, m in module.named_modules():
        if isinstance(m, (nn.Linear, nn.Conv2d)):
            fan_in = m.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            scale = 1.0
            for prefix, s in scales.items():
                if name == prefix or name.startswith(prefix + "."):
                    scale = s
                    break
            with torch.no_grad():
                m.weight.copy_(torch.from_numpy(
                    rng.uniform(-bound, bound, size=tuple(m.weight.shape)))
                    * (scale * math.sqrt(3.0)))
                if m.bias is not None:
                    m.bias.copy_(torch.from_numpy(
                        rng.uniform(-bound, bound, size=tuple(m.bias.shape))))


class ModulatedBlock(nn.Module):
    """Nearest 2x upsample, 3x3 conv, feature-wise affine modulation, leaky ReLU."""

    def __init__(self, ch_in: int, ch_out: int, w_dim: int, upsample: bool = True):
        super().__init__()
        self.upsample = upsample
        self.conv = nn.Conv2d(ch_in, ch_out, 3, padding=1).double()
        self.affine = nn.Linear(w_dim, 2 * ch_out).double()

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.conv(x)
        mod = self.affine(w)
        scale, shift = mod.chunk(2, dim=-1)
        x = x * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        return F.leaky_relu(x, 0.2)


class Generator(nn.Module):
    """Maps a latent code to residual tri-planes of shape (3, C, R, R)."""

    def __init__(self, resolution: int = 64, channels: int = 16, z_dim: int = 64,
                 w_dim: int = 64, base_channels: int = 64, base_res: int = 8,
                 seed: int = 0):
        super().__init__()
        if resolution < base_res or resolution & (resolution - 1):
            raise ValueError("resolution must be a power of two >= base resolution")
        self.resolution = resolution
        self.channels = channels
        self.z_dim = z_dim
        self.mapping = nn.Sequential(
            nn.Linear(z_dim, w_dim), nn.LeakyReLU(0.2),
            nn.Linear(w_dim, w_dim), nn.LeakyReLU(0.2),
        ).double()
        self.const = nn.Parameter(torch.zeros(base_channels, base_res, base_res,
                                              dtype=torch.float64))
        blocks = []
        ch = base_channels
        res = base_res
        while res < resolution:
            ch_out = max(ch // 2, 16)
            blocks.append(ModulatedBlock(ch, ch_out, w_dim, upsample=True))
            ch = ch_out
            res *= 2
        self.blocks = nn.ModuleList(blocks)
        self.to_planes = nn.Conv2d(ch, 3 * channels, 3, padding=1).double()
        rng = np.random.default_rng(seed)
        _seed_module(self, rng, scales={"mapping": math.sqrt(2.0),
                                        "blocks": math.sqrt(2.0),
                                        "to_planes": 0.1})
        with torch.no_grad():
            self.const.copy_(torch.from_numpy(
                rng.standard_normal((base_channels, base_res, base_res))))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        """(B, z_dim) latents -> (B, 3, C, R, R) residual plane stacks."""
        if z.ndim == 1:
            z = z.unsqueeze(0)
        w = self.mapping(z)
        x = self.const.unsqueeze(0).expand(z.shape[0], -1, -1, -1)
        for block in self.blocks:
            x = block(x, w)
        planes = self.to_planes(x)
        b = z.shape[0]
        return planes.view(b, 3, self.channels, self.resolution, self.resolution)

    def fine_planes(self, z: torch.Tensor, bounds) -> TriPlaneSet:
        out = self.forward(z)[0]
        return TriPlaneSet([out[i] for i in range(3)], bounds)


def minibatch_std(x: torch.Tensor, group_size: int = 4) -> torch.Tensor:
    """Append one channel holding the mean over features of the per-group
    standard deviation (computed over each group of samples)."""
    b, c, h, w = x.shape
    g = min(group_size, b)
    if b % g != 0:
        raise ValueError(f"batch size {b} not divisible by group size {g}")
    y = x.reshape(g, b // g, c, h, w)
    std = torch.sqrt(y.var(dim=0, unbiased=False) + 1e-8)
    stat = std.mean(dim=(1, 2, 3), keepdim=True)       # one value per group
    stat = stat.repeat(g, 1, h, w).reshape(b, 1, h, w)
    return torch.cat([x, stat], dim=1)


class Discriminator(nn.Module):
    """Patch critic: strided 3x3 conv stack to 4x4, minibatch std, dense head.

    Softplus activations keep the R1 double-backward smooth.
    """

    def __init__(self, patch_size: int = 32, base_channels: int = 32,
                 max_channels: int = 128, group_size: int = 4, seed: int = 0):
        super().__init__()
        if patch_size < 8 or patch_size & (patch_size - 1):
            raise ValueError("patch size must be a power of two >= 8")
        self.group_size = group_size
        layers = [nn.Conv2d(3, base_channels, 3, padding=1).double(), nn.Softplus()]
        ch = base_channels
        res = patch_size
        while res > 4:
            ch_out = min(ch * 2, max_channels)
            layers += [nn.Conv2d(ch, ch_out, 3, stride=2, padding=1).double(),
                       nn.Softplus()]
            ch = ch_out
            res //= 2
        self.body = nn.Sequential(*layers)
        self.post_std = nn.Sequential(nn.Conv2d(ch + 1, ch, 3, padding=1).double(),
                                      nn.Softplus())
        self.head = nn.Linear(ch * 4 * 4, 1).double()
        _seed_module(self, np.random.default_rng(seed),
                     scales={"body": 2.0 * math.sqrt(2.0),
                             "post_std": 2.0 * math.sqrt(2.0)})

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 3, S, S) patches -> (B,) logits."""
        h = self.body(x)
        h = minibatch_std(h, self.group_size)
        h = self.post_std(h)
        return self.head(h.flatten(1)).squeeze(-1)
