"""Hybrid explicit-implicit tri-plane radiance field.

Three axis-aligned feature planes per level; a query point is projected onto
each plane, bilinearly interpolated, and the three feature vectors averaged.
A fine residual level is added to the frozen coarse level in feature space,
and a shared two-MLP decoder maps features (+ encoded view direction) to
density and RGB.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch
import torch.nn as nn

from . import numerics

DEFAULT_BOUNDS = ((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5))
NDC_BOUNDS = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))

# axis pairs for the xy, yz, zx planes
_PLANE_AXES = ((0, 1), (1, 2), (2, 0))


@dataclass
class TriPlaneSet:
    """Three R x R feature grids with C channels and a shared domain box."""

    planes: list  # three (C, R, R) float64 tensors
    bounds: tuple = DEFAULT_BOUNDS

    def __post_init__(self):
        if len(self.planes) != 3:
            raise ValueError("expected exactly three planes")
        shapes = {tuple(p.shape) for p in self.planes}
        if len(shapes) != 1:
            raise ValueError("planes must share channel count and resolution")
        for p in self.planes:
            numerics.check_finite(p, "tri-plane features")

    @property
    def resolution(self) -> int:
        return self.planes[0].shape[-1]

    @property
    def channels(self) -> int:
        return self.planes[0].shape[0]

    def parameters(self):
        return list(self.planes)

    def detach_copy(self) -> "TriPlaneSet":
        return TriPlaneSet([p.detach().clone() for p in self.planes], self.bounds)


def init_triplane(R: int, C: int, scale: float, seed: int,
                  bounds: tuple = DEFAULT_BOUNDS, requires_grad: bool = False) -> TriPlaneSet:
    """Planes with i.i.d. uniform entries in [-scale, scale], seeded."""
    if R < 1 or C < 1:
        raise ValueError("resolution and channel count must be >= 1")
    rng = np.random.default_rng(seed)
    planes = []
    for _ in range(3):
        p = torch.from_numpy(rng.uniform(-scale, scale, size=(C, R, R)))
        planes.append(p.requires_grad_(True) if requires_grad else p)
    return TriPlaneSet(planes, bounds)


def sample_triplane(tp: TriPlaneSet, x: torch.Tensor) -> torch.Tensor:
    """Mean of the three bilinearly interpolated plane features at points x (N, 3).

    Points are mapped to continuous texel coordinates over [0, R-1];
    out-of-domain queries clamp to the boundary texel.
    """
    lo = torch.as_tensor(tp.bounds[0], dtype=torch.float64)
    hi = torch.as_tensor(tp.bounds[1], dtype=torch.float64)
    R = tp.resolution
    g = (x - lo) / (hi - lo) * (R - 1)
    g = g.clamp(0.0, float(R - 1))
    feat = 0.0
    for plane, (a, b) in zip(tp.planes, _PLANE_AXES):
        u, v = g[:, a], g[:, b]
        u0 = u.floor().long().clamp(0, R - 2)
        v0 = v.floor().long().clamp(0, R - 2)
        fu = (u - u0).unsqueeze(0)
        fv = (v - v0).unsqueeze(0)
        p00 = plane[:, u0, v0]
        p10 = plane[:, u0 + 1, v0]
        p01 = plane[:, u0, v0 + 1]
        p11 = plane[:, u0 + 1, v0 + 1]
        interp = (p00 * (1 - fu) * (1 - fv) + p10 * fu * (1 - fv)
                  + p01 * (1 - fu) * fv + p11 * fu * fv)
        feat = feat + interp.T
    return feat / 3.0


def encode_direction(dirs: torch.Tensor, n_freq: int = 4) -> torch.Tensor:
    """Sinusoidal positional encoding of unit directions: sin/cos of 2^k d."""
    parts = []
    for k in range(n_freq):
        parts.append(torch.sin(dirs * (2.0 ** k)))
        parts.append(torch.cos(dirs * (2.0 ** k)))
    return torch.cat(parts, dim=-1)


def _init_linear(layer: nn.Linear, rng: np.random.Generator) -> None:
    fan_in = layer.in_features
    bound = 1.0 / np.sqrt(fan_in)
    with torch.no_grad():
        layer.weight.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=tuple(layer.weight.shape))))
        layer.bias.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=tuple(layer.bias.shape))))


class FieldDecoder(nn.Module):
    """Two-MLP decoder: features -> (density, color feature) -> view-dependent RGB.

    Density goes through softplus (nonnegative, smooth for double-backward);
    RGB through sigmoid. With use_viewdir off the color MLP sees a zero
    direction encoding, so RGB is direction-independent.
    """

    def __init__(self, channels: int = 16, color_channels: int = 15,
                 dens_width: int = 64, color_width: int = 32,
                 n_freq: int = 4, seed: int = 0):
        super().__init__()
        self.channels = channels
        self.color_channels = color_channels
        self.n_freq = n_freq
        self.dens_mlp = nn.Sequential(
            nn.Linear(channels, dens_width), nn.Softplus(),
            nn.Linear(dens_width, dens_width), nn.Softplus(),
            nn.Linear(dens_width, 1 + color_channels),
        ).double()
        dir_dim = 6 * n_freq
        self.color_mlp = nn.Sequential(
            nn.Linear(color_channels + dir_dim, color_width), nn.Softplus(),
            nn.Linear(color_width, 3),
        ).double()
        rng = np.random.default_rng(seed)
        for m in list(self.dens_mlp) + list(self.color_mlp):
            if isinstance(m, nn.Linear):
                _init_linear(m, rng)

    def forward(self, feat: torch.Tensor, dirs: torch.Tensor,
                use_viewdir: bool = True):
        return self.decode(feat, dirs, use_viewdir)

    def decode(self, feat: torch.Tensor, dirs: torch.Tensor,
               use_viewdir: bool = True):
        """Map (N, C) features and (N, 3) unit directions to (sigma, rgb)."""
        h = self.dens_mlp(feat)
        sigma = torch.nn.functional.softplus(h[:, 0])
        f_color = h[:, 1:]
        if use_viewdir:
            norms = dirs.norm(dim=-1, keepdim=True)
            if (norms - 1.0).abs().max() > 1e-6:
                warnings.warn("non-unit view directions; normalizing")
                dirs = dirs / norms
            enc = encode_direction(dirs, self.n_freq)
        else:
            enc = torch.zeros(feat.shape[0], 6 * self.n_freq, dtype=torch.float64)
        rgb = torch.sigmoid(self.color_mlp(torch.cat([f_color, enc], dim=-1)))
        return sigma, rgb


@dataclass
class TwoLevelField:
    """Frozen coarse tri-planes plus an optional generated residual level."""

    coarse: TriPlaneSet
    decoder: FieldDecoder
    fine: TriPlaneSet = None
    use_viewdir: bool = True

    def __post_init__(self):
        if self.fine is not None:
            if self.fine.channels != self.coarse.channels:
                raise ValueError("coarse and fine levels must share channel count")
            if self.fine.bounds != self.coarse.bounds:
                raise ValueError("coarse and fine levels must share domain bounds")

    @property
    def bounds(self):
        return self.coarse.bounds

    def compose_feature(self, x: torch.Tensor) -> torch.Tensor:
        feat = sample_triplane(self.coarse, x)
        if self.fine is not None:
            feat = feat + sample_triplane(self.fine, x)
        return feat

    def query(self, x: torch.Tensor, dirs: torch.Tensor):
        """Density and RGB at points x viewed along dirs."""
        return self.decoder.decode(self.compose_feature(x), dirs, self.use_viewdir)

    def with_fine(self, fine: TriPlaneSet) -> "TwoLevelField":
        return TwoLevelField(self.coarse, self.decoder, fine, self.use_viewdir)


def save_field(path, field: TwoLevelField) -> None:
    """Serialize a field via the checkpoint format plus shape metadata."""
    tensors = {
        "meta/resolution": np.array([field.coarse.resolution], dtype=np.float64),
        "meta/channels": np.array([field.coarse.channels], dtype=np.float64),
        "meta/color_channels": np.array([field.decoder.color_channels], dtype=np.float64),
        "meta/n_freq": np.array([field.decoder.n_freq], dtype=np.float64),
        "meta/use_viewdir": np.array([1.0 if field.use_viewdir else 0.0]),
        "meta/bounds": np.array(field.coarse.bounds, dtype=np.float64),
    }
    for i, p in enumerate(field.coarse.planes):
        tensors[f"coarse/plane{i}"] = p
    if field.fine is not None:
        for i, p in enumerate(field.fine.planes):
            tensors[f"fine/plane{i}"] = p
    for name, p in field.decoder.state_dict().items():
        tensors[f"decoder/{name}"] = p
    numerics.save_checkpoint(path, tensors)


def load_field(path) -> TwoLevelField:
    data = numerics.load_checkpoint(path)
    bounds = tuple(map(tuple, data["meta/bounds"]))
    channels = int(data["meta/channels"][0])
    dec_shapes = {k[len("decoder/"):]: v for k, v in data.items() if k.startswith("decoder/")}
    dens_width = dec_shapes["dens_mlp.0.weight"].shape[0]
    color_width = dec_shapes["color_mlp.0.weight"].shape[0]
    decoder = FieldDecoder(channels=channels,
                           color_channels=int(data["meta/color_channels"][0]),
                           dens_width=dens_width, color_width=color_width,
                           n_freq=int(data["meta/n_freq"][0]))
    decoder.load_state_dict({k: torch.from_numpy(v) for k, v in dec_shapes.items()})
    coarse = TriPlaneSet([torch.from_numpy(data[f"coarse/plane{i}"]) for i in range(3)], bounds)
    fine = None
    if "fine/plane0" in data:
        fine = TriPlaneSet([torch.from_numpy(data[f"fine/plane{i}"]) for i in range(3)], bounds)
    return TwoLevelField(coarse, decoder, fine,
                         use_viewdir=bool(data["meta/use_viewdir"][0]))
