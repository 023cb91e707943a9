"""Cameras, rays, sampling along rays, and volume-rendering quadrature.

Pinhole cameras follow the Blender/NeRF convention: camera looks along -z,
x right, y up, camera-to-world given as a 4x4 matrix. Forward-facing scenes
can be reparameterized into NDC where sampling runs over t in [0, 1].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np
import torch


@dataclass
class Camera:
    c2w: np.ndarray          # 4x4 camera-to-world
    fov_x: float             # horizontal field of view, radians
    width: int
    height: int
    near: float = 2.0
    far: float = 6.0

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        if self.c2w.shape != (4, 4):
            raise ValueError("camera-to-world must be 4x4")
        rot = self.c2w[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise ValueError("rotation block not orthonormal")
        if not self.near < self.far:
            raise ValueError("near must be < far")
        if self.width < 1 or self.height < 1:
            raise ValueError("degenerate image extent")

    @property
    def focal(self) -> float:
        return 0.5 * self.width / math.tan(0.5 * self.fov_x)


@dataclass
class PatchSpec:
    px: int
    py: int
    size: int
    cam_index: int = 0

    def validate(self, cam: Camera) -> None:
        if self.px < 0 or self.py < 0 or self.px + self.size > cam.width \
                or self.py + self.size > cam.height:
            raise ValueError("patch exceeds image bounds")


@dataclass
class RayBundle:
    origins: torch.Tensor     # (N, 3)
    dirs: torch.Tensor        # (N, 3), unit length in world space (pre-NDC)
    near: float
    far: float
    ts: torch.Tensor = None   # (N, S) strictly increasing sample positions

    def with_ts(self, ts: torch.Tensor) -> "RayBundle":
        return replace(self, ts=ts)


def full_image_patch(cam: Camera) -> PatchSpec:
    if cam.width != cam.height:
        raise ValueError("full_image_patch requires a square image")
    return PatchSpec(0, 0, cam.width)


def generate_rays(cam: Camera, patch: PatchSpec) -> RayBundle:
    """Rays through pixel centers of a square patch, row-major (y outer)."""
    patch.validate(cam)
    s = patch.size
    xs = np.arange(patch.px, patch.px + s) + 0.5
    ys = np.arange(patch.py, patch.py + s) + 0.5
    jj, ii = np.meshgrid(ys, xs, indexing="ij")
    f = cam.focal
    d_cam = np.stack([(ii - 0.5 * cam.width) / f,
                      -(jj - 0.5 * cam.height) / f,
                      -np.ones_like(ii)], axis=-1).reshape(-1, 3)
    rot = cam.c2w[:3, :3]
    d_world = d_cam @ rot.T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(cam.c2w[:3, 3], d_world.shape).copy()
    return RayBundle(torch.from_numpy(origins), torch.from_numpy(d_world),
                     cam.near, cam.far)


def to_ndc(rays: RayBundle, cam: Camera) -> RayBundle:
    """Standard NeRF NDC map for forward-facing scenes.

    Origins are first advanced to the camera near plane; the returned bundle
    samples t in [0, 1] (near plane z_ndc = -1, infinity z_ndc = +1).
    """
    w2c_rot = torch.from_numpy(cam.c2w[:3, :3].T.copy())
    cam_pos = torch.from_numpy(cam.c2w[:3, 3].copy())
    o = (rays.origins - cam_pos) @ w2c_rot.T
    d = rays.dirs @ w2c_rot.T
    if (d[:, 2] >= -1e-12).any():
        raise ValueError("rays parallel to or facing away from the image plane")
    near = cam.near
    # shift origins to the z = -near plane
    t = -(near + o[:, 2]) / d[:, 2]
    o = o + t.unsqueeze(-1) * d
    fx = 1.0 / math.tan(0.5 * cam.fov_x)
    fy = fx * cam.width / cam.height
    o0 = -fx * o[:, 0] / o[:, 2]
    o1 = -fy * o[:, 1] / o[:, 2]
    o2 = 1.0 + 2.0 * near / o[:, 2]
    d0 = -fx * (d[:, 0] / d[:, 2] - o[:, 0] / o[:, 2])
    d1 = -fy * (d[:, 1] / d[:, 2] - o[:, 1] / o[:, 2])
    d2 = -2.0 * near / o[:, 2]
    return RayBundle(torch.stack([o0, o1, o2], dim=-1),
                     torch.stack([d0, d1, d2], dim=-1), 0.0, 1.0)


def ndc_point_to_camera(p_ndc: torch.Tensor, cam: Camera) -> torch.Tensor:
    """Inverse of the NDC map, back to camera space (used for round-trip checks)."""
    fx = 1.0 / math.tan(0.5 * cam.fov_x)
    fy = fx * cam.width / cam.height
    z = 2.0 * cam.near / (p_ndc[:, 2] - 1.0)
    x = -p_ndc[:, 0] * z / fx
    y = -p_ndc[:, 1] * z / fy
    return torch.stack([x, y, z], dim=-1)


def stratified_samples(near: float, far: float, n: int, jitter: bool,
                       rng: np.random.Generator = None, n_rays: int = 1) -> torch.Tensor:
    """One sample per equal bin: uniform within the bin when jittered,
    bin centers otherwise. Returns (n_rays, n)."""
    if not near < far or n < 1:
        raise ValueError("need near < far and n >= 1")
    edges = np.linspace(near, far, n + 1)
    if jitter:
        if rng is None:
            raise ValueError("jittered sampling needs an rng")
        u = rng.uniform(size=(n_rays, n))
    else:
        u = np.full((n_rays, n), 0.5)
    ts = edges[:-1] + u * (edges[1:] - edges[:-1])
    return torch.from_numpy(ts)


def sample_pdf(edges: np.ndarray, weights: np.ndarray, n: int,
               rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF samples from the piecewise-constant density proportional
    to `weights` over bins bounded by `edges` (len(weights)+1 values)."""
    edges = np.asarray(edges, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if (weights < 0).any():
        raise ValueError("weights must be nonnegative")
    total = weights.sum()
    if total > 0:
        pdf = weights / total
    else:
        pdf = np.full_like(weights, 1.0 / weights.size)
    cdf = np.concatenate([[0.0], np.cumsum(pdf)])
    cdf[-1] = 1.0
    u = rng.uniform(size=n)
    idx = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, pdf.size - 1)
    lo, hi = cdf[idx], cdf[idx + 1]
    frac = np.where(hi > lo, (u - lo) / np.maximum(hi - lo, 1e-300), 0.5)
    return edges[idx] + frac * (edges[idx + 1] - edges[idx])


def importance_samples(t_coarse: torch.Tensor, weights: torch.Tensor, n: int,
                       rng: np.random.Generator) -> torch.Tensor:
    """Inverse-CDF samples over coarse bins centered on the stratified samples.

    All-zero weight rows fall back to a uniform density. Returns (n_rays, n),
    unsorted; callers merge and sort with the stratified set.
    """
    t = t_coarse.detach().numpy() if isinstance(t_coarse, torch.Tensor) else np.asarray(t_coarse)
    w = weights.detach().numpy() if isinstance(weights, torch.Tensor) else np.asarray(weights)
    t = np.atleast_2d(t)
    w = np.atleast_2d(w)
    mids = 0.5 * (t[:, 1:] + t[:, :-1])
    edges = np.concatenate([t[:, :1], mids, t[:, -1:]], axis=-1)
    out = np.empty((t.shape[0], n))
    for r in range(t.shape[0]):
        out[r] = sample_pdf(edges[r], w[r], n, rng)
    return torch.from_numpy(out)


def merge_samples(t_strat: torch.Tensor, t_imp: torch.Tensor) -> torch.Tensor:
    merged, _ = torch.sort(torch.cat([t_strat, t_imp], dim=-1), dim=-1)
    return merged


def volume_render(field, rays: RayBundle, background=(1.0, 1.0, 1.0),
                  last_delta_cap: float = None):
    """Emission-absorption quadrature along each ray.

    C(r) = sum_i T_i (1 - exp(-sigma_i delta_i)) c_i, T_i = exp(-sum_{j<i} sigma_j delta_j),
    composited over a constant background via the residual transmittance.
    Returns (rgb (N,3), weights (N,S), extras dict with sigmas and deltas).
    `field` needs a query(points, dirs) -> (sigma, rgb) method.
    """
    ts = rays.ts
    if ts is None:
        raise ValueError("rays carry no sample positions")
    if (ts[:, 1:] <= ts[:, :-1]).any():
        raise ValueError("sample positions must strictly increase")
    n_rays, n_samp = ts.shape
    if last_delta_cap is None:
        last_delta_cap = (rays.far - rays.near) / n_samp
    deltas = torch.cat([ts[:, 1:] - ts[:, :-1],
                        torch.full((n_rays, 1), last_delta_cap, dtype=torch.float64)], dim=-1)
    pts = rays.origins.unsqueeze(1) + ts.unsqueeze(-1) * rays.dirs.unsqueeze(1)
    dirs = rays.dirs.unsqueeze(1).expand(-1, n_samp, -1)
    sigma, rgb = field.query(pts.reshape(-1, 3), dirs.reshape(-1, 3))
    sigma = sigma.reshape(n_rays, n_samp)
    rgb = rgb.reshape(n_rays, n_samp, 3)
    tau = sigma * deltas
    trans = torch.exp(-torch.cumsum(
        torch.cat([torch.zeros(n_rays, 1, dtype=torch.float64), tau[:, :-1]], dim=-1), dim=-1))
    alpha = 1.0 - torch.exp(-tau)
    weights = trans * alpha
    bg = torch.as_tensor(background, dtype=torch.float64)
    residual = trans[:, -1:] * torch.exp(-tau[:, -1:])
    color = (weights.unsqueeze(-1) * rgb).sum(dim=1) + residual * bg
    return color, weights, {"sigmas": sigma, "deltas": deltas, "ts": ts}


def render_patch(field, cam: Camera, patch: PatchSpec, n_strat: int = 128,
                 n_imp: int = 48, rng: np.random.Generator = None,
                 background=(1.0, 1.0, 1.0), jitter: bool = True,
                 use_ndc: bool = False):
    """Stratified pass, importance pass from its weights, merged quadrature.

    Differentiable w.r.t. plane features and decoder parameters. Returns
    an (S, S, 3) patch and the extras dict of the final quadrature.
    """
    rays = generate_rays(cam, patch)
    if use_ndc:
        rays = to_ndc(rays, cam)
    ts = stratified_samples(rays.near, rays.far, n_strat, jitter, rng,
                            n_rays=rays.origins.shape[0])
    if n_imp > 0:
        with torch.no_grad():
            _, w_coarse, _ = volume_render(field, rays.with_ts(ts), background)
        t_imp = importance_samples(ts, w_coarse, n_imp, rng if rng is not None
                                   else np.random.default_rng(0))
        ts = merge_samples(ts, t_imp)
        # nudge any coincident samples apart to keep ordering strict
        eps = (rays.far - rays.near) * 1e-12
        ts = torch.cummax(ts + 0.0, dim=-1).values
        dup = ts[:, 1:] <= ts[:, :-1]
        if dup.any():
            bump = torch.cumsum(dup.to(torch.float64), dim=-1) * eps
            ts = torch.cat([ts[:, :1], ts[:, 1:] + bump], dim=-1)
    color, weights, extras = volume_render(field, rays.with_ts(ts), background)
    s = patch.size
    return color.reshape(s, s, 3), {"weights": weights, **extras,
                                    "near": rays.near, "far": rays.far}


def beta_value(t: float, beta_final: float) -> float:
    """Linear anneal from beta(0) = 1 toward beta_final."""
    return 1.0 + t * (beta_final - 1.0)


def sample_patch_origin(W: int, H: int, S: int, t: float,
                        rng: np.random.Generator, beta_final: float = 0.3,
                        mode: str = "beta", cam_index: int = 0) -> PatchSpec:
    """Patch origin from Beta(beta(t), beta(t)) offsets (uniform for the ablation)."""
    if S > min(W, H):
        raise ValueError("patch larger than image")
    if mode == "beta":
        b = beta_value(t, beta_final)
        dx, dy = rng.beta(b, b), rng.beta(b, b)
    elif mode == "uniform":
        dx, dy = rng.uniform(), rng.uniform()
    else:
        raise ValueError(f"unknown patch sampling mode {mode!r}")
    px = int(round(dx * (W - S)))
    py = int(round(dy * (H - S)))
    return PatchSpec(px, py, S, cam_index)


def save_cameras_json(path, cameras, file_paths=None) -> None:
    """Blender-NeRF schema: camera_angle_x plus per-frame transform matrices."""
    frames = []
    for i, cam in enumerate(cameras):
        frames.append({
            "file_path": file_paths[i] if file_paths else f"./frame_{i:04d}",
            "transform_matrix": cam.c2w.tolist(),
        })
    doc = {"camera_angle_x": cameras[0].fov_x, "frames": frames}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_cameras_json(path, width: int, height: int, near: float = 2.0,
                      far: float = 6.0):
    with open(path) as fh:
        doc = json.load(fh)
    fov = float(doc["camera_angle_x"])
    return [Camera(np.array(f["transform_matrix"], dtype=np.float64), fov,
                   width, height, near, far) for f in doc["frames"]]
