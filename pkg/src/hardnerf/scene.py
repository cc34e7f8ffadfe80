"""Procedural analytic scenes, pinhole cameras and posed image datasets.

Scenes live in an axis-aligned world box (default ``[-1, 1]^3``) that maps
onto the unit cube seen by the field. Each primitive has a signed distance
function; density ramps from ``scale`` to 0 across a smoothstep shell
centred on the surface so the oracle field is continuous.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imageio, rng as rngmod
from .renderer import DEFAULT_BACKGROUND, composite_samples

PRESETS = ("spheres", "cornell", "clutter")


@dataclass
class Primitive:
    kind: str  # "sphere" | "box" | "plane"
    center: np.ndarray  # sphere/box centre, or a point on the plane
    size: np.ndarray  # sphere: (radius,), box: half extents, plane: outward normal
    density: float
    albedo: np.ndarray

    def signed_distance(self, p: np.ndarray, bounds: np.ndarray) -> np.ndarray:
        if self.kind == "sphere":
            return np.linalg.norm(p - self.center, axis=-1) - self.size[0]
        if self.kind == "box":
            return _box_sdf(p, self.center, self.size)
        if self.kind == "plane":
            # half-space behind the plane, clipped to the scene bounds
            half = np.sum((p - self.center) * self.size, axis=-1)
            lo, hi = bounds
            return np.maximum(half, _box_sdf(p, (lo + hi) / 2, (hi - lo) / 2))
        raise ValueError(f"unknown primitive kind {self.kind!r}")

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "center": self.center.tolist(),
            "size": self.size.tolist(),
            "density": self.density,
            "albedo": self.albedo.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Primitive":
        return cls(d["kind"], np.array(d["center"]), np.array(d["size"]), float(d["density"]), np.array(d["albedo"]))


def _box_sdf(p, center, half):
    q = np.abs(p - center) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside


def smooth_falloff(signed_distance, shell_width: float):
    """1 deep inside, 0 outside the shell, 0.5 on the surface."""
    t = np.clip((0.5 * shell_width - signed_distance) / shell_width, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


@dataclass
class Scene:
    primitives: list[Primitive]
    bounds: np.ndarray = field(default_factory=lambda: np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]))
    shell_fraction: float = 0.02
    background: tuple = DEFAULT_BACKGROUND
    name: str = "custom"
    seed: int = 0

    @property
    def extent(self) -> float:
        return float(np.max(self.bounds[1] - self.bounds[0]))

    @property
    def shell_width(self) -> float:
        return self.shell_fraction * self.extent

    def to_unit(self, p):
        lo, hi = self.bounds
        return (np.asarray(p) - lo) / (hi - lo)

    def to_world(self, u):
        lo, hi = self.bounds
        return lo + np.asarray(u) * (hi - lo)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "bounds": self.bounds.tolist(),
            "shell_fraction": self.shell_fraction,
            "background": list(self.background),
            "primitives": [p.to_json() for p in self.primitives],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Scene":
        return cls(
            primitives=[Primitive.from_json(p) for p in d["primitives"]],
            bounds=np.array(d["bounds"]),
            shell_fraction=d["shell_fraction"],
            background=tuple(d["background"]),
            name=d["name"],
            seed=d["seed"],
        )


def generate_scene(preset: str, seed: int = 0) -> Scene:
    """Build one of the built-in presets; deterministic in ``(preset, seed)``."""
    if preset not in PRESETS:
        raise ValueError(f"unknown scene preset {preset!r}; choose from {PRESETS}")
    gen = rngmod.stream(seed, rngmod.DATASET, item=PRESETS.index(preset))
    prims = {"spheres": _spheres, "cornell": _cornell, "clutter": _clutter}[preset](gen)
    return Scene(primitives=prims, name=preset, seed=seed)


def _color(gen):
    return gen.uniform(0.1, 0.95, size=3)


def _spheres(gen):
    prims = []
    for k in range(3):
        angle = 2 * np.pi * k / 3 + gen.uniform(-0.3, 0.3)
        center = np.array([0.4 * np.cos(angle), 0.4 * np.sin(angle), gen.uniform(-0.2, 0.2)])
        radius = gen.uniform(0.2, 0.3)
        prims.append(Primitive("sphere", center, np.array([radius]), 40.0, _color(gen)))
    return prims


def _cornell(gen):
    prims = [
        # floor, back wall, left wall as clipped half-spaces
        Primitive("plane", np.array([0.0, 0.0, -0.7]), np.array([0.0, 0.0, 1.0]), 40.0, np.array([0.8, 0.8, 0.8])),
        Primitive("box", np.array([0.0, 0.75, 0.0]), np.array([0.7, 0.05, 0.7]), 40.0, np.array([0.75, 0.75, 0.7])),
        Primitive("box", np.array([-0.75, 0.0, 0.0]), np.array([0.05, 0.7, 0.7]), 40.0, np.array([0.8, 0.15, 0.1])),
        Primitive("box", np.array([0.75, 0.0, 0.0]), np.array([0.05, 0.7, 0.7]), 40.0, np.array([0.15, 0.7, 0.2])),
    ]
    h = gen.uniform(0.2, 0.35)
    prims.append(Primitive("box", np.array([-0.25, 0.2, -0.7 + h]), np.array([0.18, 0.18, h]), 40.0, _color(gen)))
    prims.append(Primitive("sphere", np.array([0.25, -0.15, -0.45]), np.array([0.22]), 40.0, _color(gen)))
    return prims


def _clutter(gen):
    prims = []
    n = 12
    for _ in range(n):
        center = gen.uniform(-0.55, 0.55, size=3)
        if gen.uniform() < 0.5:
            prims.append(Primitive("sphere", center, np.array([gen.uniform(0.08, 0.18)]), 40.0, _color(gen)))
        else:
            prims.append(Primitive("box", center, gen.uniform(0.06, 0.14, size=3), 40.0, _color(gen)))
    return prims


def eval_scene(scene: Scene, positions) -> tuple[np.ndarray, np.ndarray]:
    """Analytic density (1/world unit) and albedo at world ``positions`` (n, 3)."""
    p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    density = np.zeros(len(p))
    weighted = np.zeros((len(p), 3))
    for prim in scene.primitives:
        d = prim.density * smooth_falloff(prim.signed_distance(p, scene.bounds), scene.shell_width)
        density += d
        weighted += d[:, None] * prim.albedo
    lo, hi = scene.bounds
    inside = np.all((p >= lo) & (p <= hi), axis=1)
    density = np.where(inside, density, 0.0)
    albedo = np.divide(weighted, density[:, None], out=np.zeros_like(weighted), where=density[:, None] > 0)
    return density, np.clip(albedo, 0.0, 1.0)


@dataclass
class Camera:
    """Pinhole camera; ``rotation`` maps camera axes (x right, y down,
    z forward) to world, ``translation`` is the camera centre."""

    rotation: np.ndarray
    translation: np.ndarray
    focal: float
    cx: float
    cy: float
    width: int
    height: int

    @classmethod
    def look_at(cls, eye, target, focal, width, height, up=(0.0, 0.0, 1.0)) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rotation = np.stack([right, down, forward], axis=1)
        return cls(rotation, eye, float(focal), width / 2.0, height / 2.0, int(width), int(height))

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """World origins and unit directions for every pixel, row-major."""
        if self.focal <= 0:
            raise ValueError(f"degenerate camera: focal length {self.focal}")
        v, u = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        d_cam = np.stack(
            [(u + 0.5 - self.cx) / self.focal, (v + 0.5 - self.cy) / self.focal, np.ones(u.shape)],
            axis=-1,
        ).reshape(-1, 3)
        dirs = d_cam @ self.rotation.T
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        origins = np.broadcast_to(self.translation, dirs.shape).copy()
        return origins, dirs

    def matrix(self) -> np.ndarray:
        """3x4 camera-to-world matrix."""
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1)

    def to_json(self) -> dict:
        return {
            "c2w": self.matrix().ravel().tolist(),
            "focal": self.focal,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        m = np.array(d["c2w"], dtype=np.float64).reshape(3, 4)
        return cls(m[:, :3], m[:, 3], d["focal"], d["cx"], d["cy"], d["width"], d["height"])


def ray_box(origins, dirs, bounds) -> tuple[np.ndarray, np.ndarray]:
    """Slab intersection; rays that miss get ``t_near == t_far == 0``."""
    lo, hi = bounds
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    t_near = np.nanmax(np.minimum(t0, t1), axis=1)
    t_far = np.nanmin(np.maximum(t0, t1), axis=1)
    t_near = np.maximum(t_near, 0.0)
    miss = ~(t_far > t_near)
    t_near[miss] = 0.0
    t_far[miss] = 0.0
    return t_near, t_far


def render_ground_truth(scene: Scene, camera: Camera, steps_per_ray: int = 256, chunk: int = 2048) -> np.ndarray:
    """Ray-march the analytic field with dense midpoint steps."""
    if steps_per_ray < 64:
        raise ValueError("steps_per_ray must be at least 64")
    origins, dirs = camera.rays()
    t_near, t_far = ray_box(origins, dirs, scene.bounds)
    out = np.empty((len(origins), 3))
    for start in range(0, len(origins), chunk):
        sl = slice(start, start + chunk)
        out[sl] = _march(scene, origins[sl], dirs[sl], t_near[sl], t_far[sl], steps_per_ray)
    return np.clip(out.reshape(camera.height, camera.width, 3), 0.0, 1.0)


def _march(scene, origins, dirs, t_near, t_far, steps):
    hit = t_far > t_near
    n_rays = len(origins)
    counts = np.where(hit, steps, 0)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    o, d = origins[hit], dirs[hit]
    step = ((t_far - t_near)[hit] / steps)[:, None]
    t = t_near[hit][:, None] + (np.arange(steps) + 0.5) * step
    pts = o[:, None, :] + t[..., None] * d[:, None, :]
    sigma, albedo = eval_scene(scene, pts.reshape(-1, 3))
    deltas = np.broadcast_to(step, t.shape).reshape(-1)
    result = composite_samples(sigma, albedo, deltas, offsets, background=scene.background)
    assert len(result.color) == n_rays
    return result.color


@dataclass
class Dataset:
    scene: Scene
    cameras: list[Camera]
    images: list[np.ndarray]
    split: list[str]  # "train" | "val" per view

    def indices(self, which: str) -> list[int]:
        return [i for i, s in enumerate(self.split) if s == which]

    @property
    def train_indices(self) -> list[int]:
        return self.indices("train")

    @property
    def val_indices(self) -> list[int]:
        return self.indices("val")

    def save(self, directory) -> Path:
        directory = Path(directory)
        (directory / "images").mkdir(parents=True, exist_ok=True)
        views = []
        for i, (cam, img, split) in enumerate(zip(self.cameras, self.images, self.split)):
            stem = f"images/view_{i:03d}"
            imageio.write_pfm(directory / f"{stem}.pfm", img)
            imageio.write_ppm(directory / f"{stem}.ppm", img)
            views.append({**cam.to_json(), "image": f"{stem}.pfm", "preview": f"{stem}.ppm", "split": split})
        manifest = {"scene": self.scene.to_json(), "views": views}
        path = directory / "manifest.json"
        path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, directory) -> "Dataset":
        directory = Path(directory)
        path = directory / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"no dataset manifest at {path}")
        manifest = json.loads(path.read_text())
        cams, imgs, split = [], [], []
        for v in manifest["views"]:
            cams.append(Camera.from_json(v))
            imgs.append(imageio.read_pfm(directory / v["image"]))
            split.append(v["split"])
        return cls(Scene.from_json(manifest["scene"]), cams, imgs, split)


def make_dataset(
    scene: Scene,
    n_views: int = 16,
    resolution=64,
    seed: int = 0,
    steps_per_ray: int = 256,
    distance: float = 3.2,
    fov_degrees: float = 45.0,
) -> Dataset:
    """Render ``n_views`` cameras on an upper hemisphere around the scene.

    Every eighth view (indices 0, 8, 16, ...) is held out for validation.
    """
    if n_views < 8:
        raise ValueError("n_views must be at least 8")
    width, height = (resolution, resolution) if np.isscalar(resolution) else resolution
    if width <= 0 or height <= 0:
        raise ValueError(f"resolution must be positive, got {resolution}")
    gen = rngmod.stream(seed, rngmod.DATASET, item=1000)
    spin = gen.uniform(0, 2 * np.pi)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    focal = 0.5 * width / np.tan(np.radians(fov_degrees) / 2)
    center = scene.bounds.mean(axis=0)
    cameras, images, split = [], [], []
    for i in range(n_views):
        z = 0.1 + 0.8 * (i + 0.5) / n_views
        r = np.sqrt(1 - z * z)
        phi = spin + golden * i
        eye = center + distance * np.array([r * np.cos(phi), r * np.sin(phi), z])
        cam = Camera.look_at(eye, center, focal, width, height)
        cameras.append(cam)
        images.append(render_ground_truth(scene, cam, steps_per_ray).astype(np.float32))
        split.append("val" if i % 8 == 0 else "train")
    return Dataset(scene, cameras, images, split)
