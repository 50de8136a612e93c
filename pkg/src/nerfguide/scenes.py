"""Procedural analytic scenes, ground-truth renders and dataset persistence.

A scene is a union of soft-edged spheres and boxes. Each primitive has an
occupancy that is 1 inside, 0 outside and follows a smoothstep across a
shell of width ``softness * size`` centred on the surface. Density is the
sum of amplitude * occupancy over primitives and color is the density
weighted average of primitive colors.

World up is +z. Rig cameras sit at distance ``d`` from the origin and look
at it; ray bounds are [0.5 d, 1.5 d].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry, renderer, tensorio
from .geometry import Camera, Intrinsics, Pose

WORLD_UP = np.array([0.0, 0.0, 1.0])
DEFAULT_DISTANCE = 2.5
DEFAULT_FOV = 60.0


@dataclass(frozen=True)
class Primitive:
    shape: str
    center: tuple
    size: float  # sphere radius or box half-extent
    density: float = 30.0
    color: tuple = (0.8, 0.2, 0.2)
    softness: float = 0.05

    def __post_init__(self):
        if self.shape not in ("sphere", "box"):
            raise ValueError(f"unknown primitive shape {self.shape!r}")
        if self.density < 0:
            raise ValueError("density amplitude must be non-negative")
        if self.size <= 0 or self.softness <= 0:
            raise ValueError("size and softness must be positive")
        c = np.asarray(self.color, dtype=np.float64)
        if c.shape != (3,) or np.any(c < 0) or np.any(c > 1):
            raise ValueError("colors must be RGB triples in [0, 1]")

    def signed_distance(self, x: np.ndarray) -> np.ndarray:
        q = x - np.asarray(self.center, dtype=np.float64)
        if self.shape == "sphere":
            return np.linalg.norm(q, axis=-1) - self.size
        a = np.abs(q) - self.size
        outside = np.linalg.norm(np.maximum(a, 0), axis=-1)
        return outside + np.minimum(a.max(axis=-1), 0)

    def occupancy(self, x: np.ndarray) -> np.ndarray:
        width = self.softness * self.size
        u = np.clip(0.5 - self.signed_distance(x) / width, 0.0, 1.0)
        return u * u * (3 - 2 * u)

    def to_dict(self) -> dict:
        return {"shape": self.shape, "center": list(map(float, self.center)),
                "size": float(self.size), "density": float(self.density),
                "color": list(map(float, self.color)), "softness": float(self.softness)}


@dataclass(frozen=True)
class AnalyticScene:
    primitives: tuple = ()
    background: tuple = (1.0, 1.0, 1.0)

    def to_dict(self) -> dict:
        return {"primitives": [p.to_dict() for p in self.primitives],
                "background": list(map(float, self.background))}

    @classmethod
    def from_dict(cls, d: dict) -> "AnalyticScene":
        prims = tuple(
            Primitive(p["shape"], tuple(p["center"]), p["size"], p["density"],
                      tuple(p["color"]), p.get("softness", 0.05))
            for p in d["primitives"]
        )
        return cls(prims, tuple(d.get("background", (1.0, 1.0, 1.0))))


def scene_field(scene: AnalyticScene, x) -> tuple[np.ndarray, np.ndarray]:
    """World-space (rgb, density) of the analytic scene at points ``x`` (..., 3)."""
    x = np.asarray(x, dtype=np.float64)
    density = np.zeros(x.shape[:-1])
    weighted = np.zeros(x.shape[:-1] + (3,))
    for p in scene.primitives:
        s = p.density * p.occupancy(x)
        density += s
        weighted += s[..., None] * np.asarray(p.color)
    safe = np.where(density > 0, density, 1.0)
    return weighted / safe[..., None], density


def render_ground_truth(scene: AnalyticScene, camera: Camera, near: float, far: float,
                        samples: int = 512, chunk: int = 4096) -> renderer.RenderedImage:
    """Reference render using bin-midpoint samples (no randomness)."""
    rays = geometry.generate_rays(camera, near, far)
    rgb, acc, depth = [], [], []
    for s in range(0, len(rays), chunk):
        r = rays[s:s + chunk]
        t = renderer.sample_stratified(r.near, r.far, samples)
        c, sig = scene_field(scene, r.at(t))
        comp = renderer.composite(t, c, sig, r.near, r.far, scene.background)
        rgb.append(comp.rgb)
        acc.append(comp.opacity)
        depth.append(comp.depth)
    h, w = camera.intrinsics.height, camera.intrinsics.width
    return renderer.RenderedImage(np.concatenate(rgb).reshape(h, w, 3),
                                  np.concatenate(acc).reshape(h, w),
                                  np.concatenate(depth).reshape(h, w))


def random_scene(rng, max_primitives: int = 3) -> AnalyticScene:
    """A few primitives that fit inside the unit ball."""
    n = int(rng.integers(1, max_primitives + 1))
    prims = []
    for _ in range(n):
        shape = "sphere" if rng.random() < 0.6 else "box"
        size = float(rng.uniform(0.2, 0.35))
        reach = 0.95 - size * (np.sqrt(3) if shape == "box" else 1.0)
        direction = geometry.normalize(rng.normal(size=3))
        center = direction * rng.uniform(0, max(reach, 0.0))
        color = rng.uniform(0.05, 0.95, 3)
        prims.append(Primitive(shape, tuple(center), size, 30.0, tuple(color)))
    return AnalyticScene(tuple(prims))


def rig_cameras(n: int, resolution: int, rig: str = "spiral", distance: float = DEFAULT_DISTANCE,
                fov: float = DEFAULT_FOV, height: float = 1.0) -> list[Camera]:
    """Cameras looking at the origin: a spherical spiral, or a horizontal circle."""
    intr = Intrinsics.from_fov(fov, resolution, resolution)
    if rig == "spiral":
        eyes = geometry.spiral_positions(n, distance, turns=2.0)
    elif rig == "circle":
        r = np.sqrt(distance ** 2 - height ** 2)
        eyes = geometry.circle_positions(n, height * WORLD_UP, WORLD_UP, r, start=[1.0, 0, 0])
    else:
        raise ValueError(f"unknown camera rig {rig!r}")
    return [Camera(intr, geometry.look_at(e, np.zeros(3), WORLD_UP)) for e in eyes]


def rig_bounds(distance: float = DEFAULT_DISTANCE) -> tuple[float, float]:
    return 0.5 * distance, 1.5 * distance


@dataclass
class SceneDataset:
    scene_id: str
    cameras: list
    images: list
    near: float
    far: float
    input_index: int = 0
    split: str = "train"
    scene: AnalyticScene | None = None
    files: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.cameras)

    @property
    def input_camera(self) -> Camera:
        return self.cameras[self.input_index]


def make_dataset(scene: AnalyticScene, cameras, near, far, scene_id="scene", samples=512,
                 input_index=0, split="train") -> SceneDataset:
    images = [render_ground_truth(scene, c, near, far, samples).rgb for c in cameras]
    return SceneDataset(scene_id, list(cameras), images, near, far, input_index, split, scene)


def save_dataset(ds: SceneDataset, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    intr = ds.cameras[0].intrinsics
    views = []
    for i, (cam, img) in enumerate(zip(ds.cameras, ds.images)):
        stem = f"view_{i:03d}"
        tensorio.save_ppm(d / f"{stem}.ppm", img)
        tensorio.save_float_image(d / f"{stem}.f32", img)
        views.append({"pose_r": cam.pose.rotation.ravel().tolist(),
                      "pose_t": cam.pose.translation.tolist(), "file": f"{stem}.f32"})
    meta = {
        "scene_id": ds.scene_id,
        "resolution": [intr.height, intr.width],
        "intrinsics": intr.to_dict(),
        "near": ds.near,
        "far": ds.far,
        "views": views,
        "input_index": ds.input_index,
        "split": ds.split,
    }
    if ds.scene is not None:
        meta["scene"] = ds.scene.to_dict()
    (d / "meta.json").write_text(json.dumps(meta, indent=1))
    return d


def load_dataset(directory) -> SceneDataset:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    h, w = meta["resolution"]
    k = meta["intrinsics"]
    intr = Intrinsics(k["fx"], k["fy"], k["cx"], k["cy"], w, h)
    cams, images, files = [], [], []
    for v in meta["views"]:
        pose = Pose(np.reshape(v["pose_r"], (3, 3)), np.asarray(v["pose_t"]))
        cams.append(Camera(intr, pose))
        images.append(tensorio.load_float_image(d / v["file"]).astype(np.float64))
        files.append(v["file"])
    scene = AnalyticScene.from_dict(meta["scene"]) if "scene" in meta else None
    return SceneDataset(meta["scene_id"], cams, images, meta["near"], meta["far"],
                        meta["input_index"], meta["split"], scene, files)


def generate_dataset(out_dir, seed: int, num_scenes: int, views_per_scene: int,
                     resolution: int, rig: str = "spiral", samples: int = 512,
                     distance: float = DEFAULT_DISTANCE) -> list[Path]:
    """Write ``num_scenes`` random scenes as ``scene_%03d`` directories under ``out_dir``."""
    if num_scenes < 1 or views_per_scene < 1 or resolution < 1:
        raise ValueError("scene, view and resolution counts must be >= 1")
    rng = np.random.default_rng(seed)
    near, far = rig_bounds(distance)
    cams = rig_cameras(views_per_scene, resolution, rig, distance)
    paths = []
    for s in range(num_scenes):
        scene = random_scene(rng)
        ds = make_dataset(scene, cams, near, far, f"scene_{s:03d}", samples)
        paths.append(save_dataset(ds, Path(out_dir) / f"scene_{s:03d}"))
    return paths


def shift_image(img: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Translate by (dx, dy) pixels (x right, y down) with bilinear resampling, edge clamp."""
    h, w = img.shape[:2]
    rows = np.clip(np.arange(h) - dy, 0, h - 1)
    cols = np.clip(np.arange(w) - dx, 0, w - 1)
    r0 = np.minimum(np.floor(rows).astype(int), h - 2) if h > 1 else np.zeros(h, int)
    c0 = np.minimum(np.floor(cols).astype(int), w - 2) if w > 1 else np.zeros(w, int)
    fr = (rows - r0)[:, None, None] if h > 1 else np.zeros((h, 1, 1))
    fc = (cols - c0)[None, :, None] if w > 1 else np.zeros((1, w, 1))
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bot = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr) + bot * fr


def perturb_views(images, seed: int, sigma_color: float, sigma_shift: float,
                  clip: bool = True) -> list[np.ndarray]:
    """Independent per-view color offset ~ N(0, sigma_color^2) per channel and a
    subpixel translation ~ N(0, sigma_shift^2) per axis."""
    if sigma_color < 0 or sigma_shift < 0:
        raise ValueError("perturbation scales must be non-negative")
    rng = np.random.default_rng(seed)
    out = []
    for img in images:
        offset = rng.normal(0, sigma_color, 3)
        dx, dy = rng.normal(0, sigma_shift, 2)
        if sigma_color == 0 and sigma_shift == 0:
            out.append(np.array(img, copy=True))
            continue
        p = shift_image(np.asarray(img, dtype=np.float64), dx, dy) + offset
        out.append(np.clip(p, 0, 1) if clip else p)
    return out
