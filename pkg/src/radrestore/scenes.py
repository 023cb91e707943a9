"""Procedural scene synthesis: analytic ray-traced ground-truth views.

Scenes are lists of primitives (sphere, box, plane) with procedural Lambertian
albedo textures and an optional specular lobe, lit by a fixed directional
light plus ambient. Stand-in for captured datasets at desk scale.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import imgio, render

_LIGHT_DIR = np.array([0.4, 0.8, 0.45])
_LIGHT_DIR = _LIGHT_DIR / np.linalg.norm(_LIGHT_DIR)
_AMBIENT = 0.25


@dataclass
class MultiViewSet:
    """Per-view images plus camera metadata."""

    images: list                 # H x W x 3 float64 arrays in [0, 1]
    cameras: list                # render.Camera, one per image

    def __post_init__(self):
        if len(self.images) != len(self.cameras):
            raise ValueError("image/camera count mismatch")

    def save(self, out_dir, float_images: bool = True) -> None:
        os.makedirs(out_dir, exist_ok=True)
        names = []
        for i, img in enumerate(self.images):
            ext = "raff" if float_images else "png"
            name = f"view_{i:04d}.{ext}"
            imgio.save_image(os.path.join(out_dir, name), img)
            names.append("./" + name)
        render.save_cameras_json(os.path.join(out_dir, "cameras.json"),
                                 self.cameras, names)

    @classmethod
    def load(cls, out_dir, near: float = 2.0, far: float = 6.0) -> "MultiViewSet":
        import json
        with open(os.path.join(out_dir, "cameras.json")) as fh:
            doc = json.load(fh)
        images, cams = [], []
        fov = float(doc["camera_angle_x"])
        for frame in doc["frames"]:
            img = imgio.load_image(os.path.join(out_dir, frame["file_path"]))
            images.append(img)
            cams.append(render.Camera(np.array(frame["transform_matrix"]), fov,
                                      img.shape[1], img.shape[0], near, far))
        return cls(images, cams)


# --- textures -------------------------------------------------------------

@dataclass
class Texture:
    kind: str = "solid"          # solid | checker | stripes | noise
    color_a: tuple = (0.8, 0.8, 0.8)
    color_b: tuple = (0.2, 0.2, 0.2)
    scale: float = 2.0
    octaves: int = 3
    seed: int = 0

    def albedo(self, pts: np.ndarray) -> np.ndarray:
        ca = np.asarray(self.color_a)
        cb = np.asarray(self.color_b)
        if self.kind == "solid":
            return np.broadcast_to(ca, pts.shape).copy()
        if self.kind == "checker":
            cell = np.floor(pts * self.scale).astype(int).sum(axis=-1) % 2
            return np.where(cell[:, None] == 0, ca, cb)
        if self.kind == "stripes":
            band = (np.floor(pts[:, 0] * self.scale).astype(int) % 2)
            return np.where(band[:, None] == 0, ca, cb)
        if self.kind == "noise":
            t = _value_noise(pts, self.scale, self.octaves, self.seed)
            return ca[None, :] * t[:, None] + cb[None, :] * (1.0 - t[:, None])
        raise ValueError(f"unknown texture kind {self.kind!r}")


def _value_noise(pts: np.ndarray, scale: float, octaves: int, seed: int) -> np.ndarray:
    """Trilinearly interpolated lattice value noise, octave-summed."""
    total = np.zeros(pts.shape[0])
    amp_sum = 0.0
    for o in range(octaves):
        freq = scale * (2 ** o)
        amp = 0.5 ** o
        p = pts * freq
        i = np.floor(p).astype(np.int64)
        f = p - i
        f = f * f * (3.0 - 2.0 * f)
        acc = np.zeros(pts.shape[0])
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    corner = i + np.array([dx, dy, dz])
                    val = _lattice_hash(corner, seed + o)
                    wx = f[:, 0] if dx else 1.0 - f[:, 0]
                    wy = f[:, 1] if dy else 1.0 - f[:, 1]
                    wz = f[:, 2] if dz else 1.0 - f[:, 2]
                    acc += val * wx * wy * wz
        total += amp * acc
        amp_sum += amp
    return total / amp_sum


def _lattice_hash(cell: np.ndarray, seed: int) -> np.ndarray:
    h = (cell[:, 0] * 374761393 + cell[:, 1] * 668265263
         + cell[:, 2] * 2147483647 + seed * 144665) & 0x7FFFFFFF
    h = (h ^ (h >> 13)) * 1274126177 & 0x7FFFFFFF
    return ((h ^ (h >> 16)) % 65536) / 65535.0


# --- primitives -----------------------------------------------------------

@dataclass
class Sphere:
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0
    texture: Texture = dc_field(default_factory=Texture)
    specular: float = 0.0

    def intersect(self, o: np.ndarray, d: np.ndarray):
        c = np.asarray(self.center)
        oc = o - c
        b = (oc * d).sum(axis=-1)
        cterm = (oc * oc).sum(axis=-1) - self.radius ** 2
        disc = b * b - cterm
        hit = disc >= 0
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        t = np.where(t0 > 1e-6, t0, t1)
        t = np.where(hit & (t > 1e-6), t, np.inf)
        tf = np.where(np.isfinite(t), t, 0.0)  # dummy point for missed rays
        pts = o + tf[:, None] * d
        normals = (pts - c) / self.radius
        return t, normals

    def contains_box(self, lo, hi) -> bool:
        c = np.asarray(self.center)
        return bool(np.all(c - self.radius >= lo) and np.all(c + self.radius <= hi))


@dataclass
class Box:
    lo: tuple = (-0.5, -0.5, -0.5)
    hi: tuple = (0.5, 0.5, 0.5)
    texture: Texture = dc_field(default_factory=Texture)
    specular: float = 0.0

    def intersect(self, o: np.ndarray, d: np.ndarray):
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        inv = 1.0 / np.where(np.abs(d) < 1e-12, 1e-12, d)
        t_lo = (lo - o) * inv
        t_hi = (hi - o) * inv
        t_near = np.minimum(t_lo, t_hi).max(axis=-1)
        t_far = np.maximum(t_lo, t_hi).min(axis=-1)
        hit = (t_far >= t_near) & (t_far > 1e-6)
        t = np.where(t_near > 1e-6, t_near, t_far)
        t = np.where(hit, t, np.inf)
        pts = o + t[:, None] * d
        center = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo)
        local = (pts - center) / half
        axis = np.argmax(np.abs(local), axis=-1)
        normals = np.zeros_like(pts)
        rows = np.arange(pts.shape[0])
        normals[rows, axis] = np.sign(local[rows, axis])
        return t, normals

    def contains_box(self, lo, hi) -> bool:
        return bool(np.all(np.asarray(self.lo) >= lo) and np.all(np.asarray(self.hi) <= hi))


@dataclass
class Plane:
    point: tuple = (0.0, -1.0, 0.0)
    normal: tuple = (0.0, 1.0, 0.0)
    texture: Texture = dc_field(default_factory=Texture)
    specular: float = 0.0

    def intersect(self, o: np.ndarray, d: np.ndarray):
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        denom = d @ n
        t = ((np.asarray(self.point) - o) @ n) / np.where(np.abs(denom) < 1e-12, 1e-12, denom)
        t = np.where((np.abs(denom) > 1e-12) & (t > 1e-6), t, np.inf)
        normals = np.broadcast_to(n, o.shape).copy()
        flip = denom > 0
        normals[flip] = -normals[flip]
        return t, normals

    def contains_box(self, lo, hi) -> bool:
        return True  # planes are unbounded background geometry by design


PRIMITIVE_TYPES = {"sphere": Sphere, "box": Box, "plane": Plane}


@dataclass
class SyntheticScene:
    primitives: list
    background: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("scene has no primitives")

    def trace(self, origins: np.ndarray, dirs: np.ndarray,
              use_specular: bool = True) -> np.ndarray:
        """Closed-form nearest-hit shading for N rays; misses get background."""
        n = origins.shape[0]
        best_t = np.full(n, np.inf)
        color = np.broadcast_to(np.asarray(self.background, dtype=np.float64),
                                (n, 3)).copy()
        for prim in self.primitives:
            t, normals = prim.intersect(origins, dirs)
            closer = t < best_t
            if not closer.any():
                continue
            tc = t[closer]
            oc, dc, nc = origins[closer], dirs[closer], normals[closer]
            pts = oc + tc[:, None] * dc
            albedo = prim.texture.albedo(pts)
            lam = np.maximum(nc @ _LIGHT_DIR, 0.0)
            shade = albedo * (_AMBIENT + (1.0 - _AMBIENT) * lam[:, None])
            if use_specular and prim.specular > 0.0:
                halfv = _LIGHT_DIR - dc
                halfv = halfv / np.linalg.norm(halfv, axis=-1, keepdims=True)
                spec = np.maximum((nc * halfv).sum(axis=-1), 0.0) ** 32
                shade = shade + prim.specular * spec[:, None]
            color[closer] = np.clip(shade, 0.0, 1.0)
            best_t = np.where(closer, t, best_t)
        return color


def two_primitive_scene(seed: int = 0) -> SyntheticScene:
    """The seeded sphere+box scene used for scaled-down end-to-end checks."""
    rng = np.random.default_rng(seed)
    sphere = Sphere(center=(-0.45, 0.15, 0.0), radius=0.55,
                    texture=Texture("checker", (0.9, 0.3, 0.2), (0.95, 0.9, 0.3),
                                    scale=4.0, seed=int(rng.integers(1000))),
                    specular=0.4)
    box = Box(lo=(0.1, -0.55, -0.45), hi=(0.95, 0.35, 0.45),
              texture=Texture("noise", (0.2, 0.45, 0.85), (0.1, 0.12, 0.3),
                              scale=3.0, seed=int(rng.integers(1000))))
    return SyntheticScene([sphere, box])


def look_at_c2w(eye: np.ndarray, target=(0.0, 0.0, 0.0),
                up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world with -z toward the target (NeRF/Blender convention)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = eye - np.asarray(target, dtype=np.float64)
    forward = forward / np.linalg.norm(forward)
    right = np.cross(np.asarray(up, dtype=np.float64), forward)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(np.array([0.0, 1.0, 0.0]), forward)
    right = right / np.linalg.norm(right)
    true_up = np.cross(forward, right)
    c2w = np.eye(4)
    c2w[:3, 0] = right
    c2w[:3, 1] = true_up
    c2w[:3, 2] = forward
    c2w[:3, 3] = eye
    return c2w


def hemisphere_rig(n_views: int, radius: float = 4.0, resolution: int = 64,
                   fov_x: float = 0.6911, near: float = 2.0, far: float = 6.0,
                   phase: float = 0.0):
    """Deterministic spiral of poses on the upper hemisphere, looking at origin."""
    cams = []
    golden = np.pi * (3.0 - np.sqrt(5.0))
    for k in range(n_views):
        zfrac = 0.25 + 0.65 * (k + 0.5) / n_views
        theta = golden * k + phase
        rxy = radius * np.sqrt(1.0 - zfrac ** 2)
        eye = np.array([rxy * np.cos(theta), rxy * np.sin(theta), radius * zfrac])
        cams.append(render.Camera(look_at_c2w(eye), fov_x, resolution, resolution,
                                  near, far))
    return cams


def forward_rig(n_views: int, distance: float = 4.0, spread: float = 0.6,
                resolution: int = 64, fov_x: float = 0.6911,
                near: float = 2.0, far: float = 6.0, phase: float = 0.0):
    """Roughly forward-facing poses with small lateral offsets."""
    cams = []
    for k in range(n_views):
        ang = 2.0 * np.pi * k / max(n_views, 1) + phase
        eye = np.array([spread * np.cos(ang), spread * np.sin(ang) * 0.6, distance])
        c2w = look_at_c2w(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0))
        cams.append(render.Camera(c2w, fov_x, resolution, resolution, near, far))
    return cams


def synth_scene(scene: SyntheticScene, cameras, seed: int = 0,
                use_specular: bool = True) -> MultiViewSet:
    """Analytic renders of the scene from each camera."""
    images = []
    for cam in cameras:
        bundle = render.generate_rays(cam, render.full_image_patch(cam))
        color = scene.trace(bundle.origins.numpy(), bundle.dirs.numpy(),
                            use_specular=use_specular)
        images.append(color.reshape(cam.height, cam.width, 3))
    return MultiViewSet(images, list(cameras))
