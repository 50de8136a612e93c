"""Pinhole cameras, poses, rays, image-plane projection and frustum contraction.

Conventions: right-handed camera frame looking down -z (OpenGL style), +x to
the right, +y up. Pixel (row, col) has its center at (col + 0.5, row + 0.5)
in continuous image coordinates. Normalized image coordinates map the image
min corner to (-1, -1) and the max corner to (1, 1), first coordinate
horizontal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ORTHO_TOL = 1e-6


def _frozen(a, dtype=np.float64) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be >= 1, got {self.width}x{self.height}")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point lies outside the image")

    @classmethod
    def from_fov(cls, fov_x_deg: float, width: int, height: int) -> "Intrinsics":
        """Symmetric intrinsics with square pixels and the given horizontal fov."""
        f = 0.5 * width / np.tan(np.deg2rad(fov_x_deg) / 2)
        return cls(float(f), float(f), width / 2, height / 2, int(width), int(height))

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}


@dataclass(frozen=True, eq=False)
class Pose:
    """Camera-to-world rigid transform. ``translation`` is the camera origin."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = _frozen(self.rotation)
        t = _frozen(self.translation)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if not np.allclose(r.T @ r, np.eye(3), atol=ORTHO_TOL, rtol=0):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation is not proper (det != +1)")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @property
    def right(self) -> np.ndarray:
        return self.rotation[:, 0]

    @property
    def up(self) -> np.ndarray:
        return self.rotation[:, 1]

    @property
    def forward(self) -> np.ndarray:
        return -self.rotation[:, 2]

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def to_world(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.translation) @ self.rotation

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    __hash__ = None


@dataclass(frozen=True)
class Camera:
    intrinsics: Intrinsics
    pose: Pose


@dataclass(frozen=True, eq=False)
class Rays:
    """A batch of rays; ``origins``/``directions`` are (N, 3), bounds are (N,)."""

    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray

    def __post_init__(self):
        o = np.atleast_2d(np.asarray(self.origins, dtype=np.float64))
        d = np.atleast_2d(np.asarray(self.directions, dtype=np.float64))
        n = o.shape[0]
        near = np.broadcast_to(np.asarray(self.near, dtype=np.float64), (n,)).copy()
        far = np.broadcast_to(np.asarray(self.far, dtype=np.float64), (n,)).copy()
        if o.shape != d.shape or o.shape[1] != 3:
            raise ValueError("origins and directions must both be (N, 3)")
        if not np.allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-6):
            raise ValueError("ray directions must be unit length")
        if np.any(near < 0) or np.any(near >= far):
            raise ValueError("ray bounds must satisfy 0 <= near < far")
        for name, arr in (("origins", o), ("directions", d), ("near", near), ("far", far)):
            object.__setattr__(self, name, _frozen(arr))

    def __len__(self) -> int:
        return self.origins.shape[0]

    def __getitem__(self, idx) -> "Rays":
        idx = np.atleast_1d(np.arange(len(self))[idx])
        return Rays(self.origins[idx], self.directions[idx], self.near[idx], self.far[idx])

    def at(self, t) -> np.ndarray:
        """Points r(t) = o + t d; ``t`` broadcasts as (N,) or (N, S)."""
        t = np.asarray(t, dtype=np.float64)
        if t.ndim <= 1:
            return self.origins + t[..., None] * self.directions
        return self.origins[:, None, :] + t[..., None] * self.directions[:, None, :]


def normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def look_at(eye, target, up_hint) -> Pose:
    """Pose at ``eye`` whose forward (-z) axis points at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up_hint = np.asarray(up_hint, dtype=np.float64)
    fwd = target - eye
    dist = np.linalg.norm(fwd)
    if dist < 1e-12:
        raise ValueError("look_at: eye and target coincide")
    fwd = fwd / dist
    right = np.cross(fwd, up_hint)
    rn = np.linalg.norm(right)
    if rn < 1e-9 * max(np.linalg.norm(up_hint), 1e-300):
        raise ValueError("look_at: up hint is parallel to the viewing direction")
    right /= rn
    up = np.cross(right, fwd)
    return Pose(np.stack([right, up, -fwd], axis=1), eye)


def pixel_grid(intr: Intrinsics) -> np.ndarray:
    """All (row, col) pixel indices of an image in row-major order, shape (H*W, 2)."""
    rows, cols = np.meshgrid(np.arange(intr.height), np.arange(intr.width), indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=1)


def normalized_pixel_coords(pixels, intr: Intrinsics) -> np.ndarray:
    """Normalized image coordinates of pixel centers, shape (N, 2)."""
    p = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    u = p[:, 1] + 0.5
    v = p[:, 0] + 0.5
    return np.stack([2 * u / intr.width - 1, 2 * v / intr.height - 1], axis=1)


def camera_directions(pixels, intr: Intrinsics) -> np.ndarray:
    """Unit ray directions through pixel centers in the camera frame."""
    p = np.atleast_2d(np.asarray(pixels))
    u = p[:, 1] + 0.5
    v = p[:, 0] + 0.5
    d = np.stack(
        [(u - intr.cx) / intr.fx, -(v - intr.cy) / intr.fy, -np.ones(len(p))], axis=1
    )
    return normalize(d)


def generate_rays(camera: Camera, near: float, far: float, pixels=None) -> Rays:
    """One ray per pixel center; ``pixels`` are (row, col) pairs, default full grid."""
    intr = camera.intrinsics
    if pixels is None:
        pixels = pixel_grid(intr)
    pixels = np.atleast_2d(np.asarray(pixels))
    if pixels.shape[1] != 2:
        raise ValueError("pixels must be (row, col) pairs")
    if (
        np.any(pixels < 0)
        or np.any(pixels[:, 0] >= intr.height)
        or np.any(pixels[:, 1] >= intr.width)
    ):
        raise IndexError("pixel index outside the image")
    d = camera_directions(pixels, intr) @ camera.pose.rotation.T
    o = np.broadcast_to(camera.pose.translation, d.shape)
    return Rays(o, normalize(d), near, far)


def _depth(points: np.ndarray) -> np.ndarray:
    return -np.asarray(points)[..., 2]


def project(points, intr: Intrinsics) -> np.ndarray:
    """Camera-space points to normalized image coordinates P(x)."""
    x = np.asarray(points)
    depth = _depth(x)
    if np.any(depth <= 0):
        raise ValueError("project: point behind the camera")
    u = intr.fx * x[..., 0] / depth + intr.cx
    v = intr.cy - intr.fy * x[..., 1] / depth
    return np.stack([2 * u / intr.width - 1, 2 * v / intr.height - 1], axis=-1)


def contract(points, intr: Intrinsics, near: float, far: float, clamp: bool = True,
             eps: float = 1e-6) -> np.ndarray:
    """Frustum coordinates [P(x), 2 (depth - near) / (far - near) - 1].

    Depth is the distance along the viewing axis (-z). With ``clamp`` the
    depth is clamped into [near + eps, far - eps]; otherwise depths outside
    [near, far] raise.
    """
    x = np.asarray(points)
    depth = _depth(x)
    if clamp:
        depth = np.clip(depth, near + eps, far - eps)
        x = x.copy()
        x[..., 2] = -depth
    elif np.any(depth < near) or np.any(depth > far):
        raise ValueError("contract: depth outside the camera bounds")
    uv = project(x, intr)
    z = 2 * (depth - near) / (far - near) - 1
    return np.concatenate([uv, z[..., None]], axis=-1)


def relative_pose(source: Pose, target: Pose) -> Pose:
    """Transform taking source-camera coordinates to target-camera coordinates."""
    rt = target.rotation.T
    return Pose(rt @ source.rotation, rt @ (source.translation - target.translation))


def compose(first: Pose, second: Pose) -> Pose:
    """Apply ``first`` then ``second``."""
    return Pose(second.rotation @ first.rotation,
                second.rotation @ first.translation + second.translation)


def spiral_positions(n: int, radius: float, turns: float,
                     polar_range=(np.pi / 12, 11 * np.pi / 12)) -> np.ndarray:
    """Points on an Archimedean spherical spiral: azimuth linear in polar angle."""
    s = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    theta = polar_range[0] + s * (polar_range[1] - polar_range[0])
    phi = 2 * np.pi * turns * s
    return radius * np.stack(
        [np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], axis=1
    )


def circle_positions(n: int, center, normal, radius: float, start=None) -> np.ndarray:
    """``n`` points evenly spaced on a circle; ``start`` fixes the zero-angle direction."""
    center = np.asarray(center, dtype=np.float64)
    normal = normalize(normal)
    if start is None:
        helper = np.eye(3)[np.argmin(np.abs(normal))]
        start = np.cross(normal, helper)
    e1 = np.asarray(start, dtype=np.float64)
    e1 = normalize(e1 - normal * (e1 @ normal))
    e2 = np.cross(normal, e1)
    ang = 2 * np.pi * np.arange(n) / n
    return center + radius * (np.cos(ang)[:, None] * e1 + np.sin(ang)[:, None] * e2)
