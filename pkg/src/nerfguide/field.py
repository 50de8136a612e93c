"""Radiance field f(x, d) -> (rgb, density) with a shallow MLP head.

Two conditioning modes, both expressed in the reference (input) camera frame:

* ``triplane``: features are the sum of bilinear lookups in three
  axis-aligned planes indexed by frustum coordinates x~ (see
  :func:`nerfguide.geometry.contract`). Plane ``xy`` is indexed
  [x-node, y-node], ``xz`` by [x-node, z-node], ``yz`` by [y-node, z-node];
  nodes sit at -1 + 2k/(R-1) (corner aligned).
* ``pixel``: features are a bilinear lookup of an (H, W, C) feature image at
  P(x), pixel centers at the usual half-pixel offsets.

Points outside the reference frustum (depth outside [near, far] or P(x)
outside [-1, 1]^2) are empty space: zero density and zero color.

Because the feature lookups are linear in the stored features, the first MLP
layer is applied to the planes before gathering, which is exact and saves a
(C x hidden) product per sample.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path

import numpy as np

from . import _kernels, geometry, tensorio
from .geometry import Intrinsics, Pose

PLANE_AXES = ((0, 1), (0, 2), (1, 2))
PLANE_NAMES = ("xy", "xz", "yz")
DEFAULT_CHANNELS = 48
DEFAULT_HIDDEN = 64
CONTRACT_EPS = 1e-6


@dataclass
class Triplane:
    planes: np.ndarray  # (3, R, R, C) in xy, xz, yz order

    def __post_init__(self):
        p = np.asarray(self.planes)
        if p.ndim != 4 or p.shape[0] != 3 or p.shape[1] != p.shape[2]:
            raise ValueError(f"triplane must be (3, R, R, C), got {p.shape}")
        if p.shape[1] < 2:
            raise ValueError("triplane resolution must be >= 2")
        self.planes = p

    @property
    def resolution(self) -> int:
        return self.planes.shape[1]

    @property
    def channels(self) -> int:
        return self.planes.shape[3]

    plane_xy = property(lambda self: self.planes[0])
    plane_xz = property(lambda self: self.planes[1])
    plane_yz = property(lambda self: self.planes[2])


def _axis_taps(c, size, align_corners):
    if align_corners:
        pos = (c + 1) * 0.5 * (size - 1)
    else:
        pos = np.clip((c + 1) * 0.5 * size - 0.5, 0, size - 1)
    i0 = np.clip(np.floor(pos).astype(np.int64), 0, size - 2)
    f = np.clip(pos - i0, 0.0, 1.0)
    return i0, f


def bilinear_taps(coords, shape, align_corners=True):
    """Flat cell indices and weights of the 4 bilinear taps, both (N, 4).

    ``coords[:, 0]`` indexes the first grid axis, ``coords[:, 1]`` the second.
    Out-of-range coordinates clamp to the edge.
    """
    a, b = shape
    i, fi = _axis_taps(coords[:, 0], a, align_corners)
    j, fj = _axis_taps(coords[:, 1], b, align_corners)
    idx = np.stack([i * b + j, i * b + j + 1, (i + 1) * b + j, (i + 1) * b + j + 1], axis=1)
    w = np.stack([(1 - fi) * (1 - fj), (1 - fi) * fj, fi * (1 - fj), fi * fj], axis=1)
    return idx, w


def triplane_taps(xt, resolution):
    """Taps into the flattened (3*R*R) plane stack, (N, 12) each."""
    r2 = resolution * resolution
    idx, w = [], []
    for p, (a, b) in enumerate(PLANE_AXES):
        i, wt = bilinear_taps(xt[:, [a, b]], (resolution, resolution))
        idx.append(i + p * r2)
        w.append(wt)
    return np.concatenate(idx, axis=1), np.concatenate(w, axis=1)


def image_taps(uv, height, width):
    """Taps into a flattened (H*W) feature image at normalized coords (u, v)."""
    return bilinear_taps(uv[:, ::-1], (height, width), align_corners=False)


def triplane_query(tp: Triplane, xt) -> np.ndarray:
    """Sum of the three plane lookups at frustum coordinates ``xt`` (N, 3)."""
    xt = np.atleast_2d(np.asarray(xt, dtype=np.float64))
    if np.any(np.abs(xt) > 1 + 1e-9):
        raise ValueError("triplane_query: coordinates outside [-1, 1]^3")
    idx, w = triplane_taps(xt, tp.resolution)
    table = tp.planes.reshape(-1, tp.channels)
    return np.einsum("nk,nkc->nc", w.astype(table.dtype), table[idx])


def pixel_query(features, x, intr: Intrinsics) -> np.ndarray:
    """Bilinear lookup of an (H, W, C) feature image at P(x)."""
    feats = np.asarray(features)
    uv = geometry.project(np.atleast_2d(x), intr)
    h, w, c = feats.shape
    idx, wt = image_taps(uv, h, w)
    table = feats.reshape(-1, c)
    return np.einsum("nk,nkc->nc", wt.astype(table.dtype), table[idx])


def positional_encoding(v, num_freqs: int, include_input: bool = True) -> np.ndarray:
    """[v, sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^(L-1) pi v), cos(2^(L-1) pi v)]."""
    v = np.asarray(v)
    if num_freqs < 0:
        raise ValueError("num_freqs must be >= 0")
    parts = [v] if include_input else []
    for k in range(num_freqs):
        arg = (2.0**k * np.pi) * v
        parts += [np.sin(arg), np.cos(arg)]
    if not parts:
        return np.zeros(v.shape[:-1] + (0,), dtype=v.dtype)
    return np.concatenate(parts, axis=-1)


def encoding_size(n: int, num_freqs: int, include_input: bool = True) -> int:
    return n * 2 * num_freqs + (n if include_input else 0)


@dataclass
class FieldParams:
    """Finetunable radiance field: conditioning payload plus MLP weights.

    ``payload`` is the triplane stack (3, R, R, C) in triplane mode and the
    feature image (H, W, C) in pixel mode. ``ref_pose`` is the camera-to-world
    pose of the reference camera whose frame the field lives in.
    """

    mode: str
    payload: np.ndarray
    mlp: dict
    intrinsics: Intrinsics
    near: float
    far: float
    ref_pose: Pose = dc_field(default_factory=Pose.identity)
    use_direction: bool = False
    dir_freqs: int = 4
    use_posenc: bool = False
    pos_freqs: int = 6
    hidden_activation: str = "relu"

    def __post_init__(self):
        if self.mode not in ("triplane", "pixel"):
            raise ValueError(f"unknown conditioning mode {self.mode!r}")
        if self.mode == "triplane":
            Triplane(self.payload)
        elif self.payload.ndim != 3:
            raise ValueError("pixel feature image must be (H, W, C)")
        if not 0 < self.near < self.far:
            raise ValueError("field bounds must satisfy 0 < near < far")
        if self.hidden_activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.hidden_activation!r}")
        w1 = self.mlp["W1"]
        if w1.shape[0] != self.input_dim or self.mlp["W2"].shape != (w1.shape[1], 4):
            raise ValueError("MLP shapes inconsistent with the conditioning configuration")

    @property
    def channels(self) -> int:
        return self.payload.shape[-1]

    @property
    def triplane(self) -> Triplane | None:
        return Triplane(self.payload) if self.mode == "triplane" else None

    @property
    def payload_name(self) -> str:
        return "triplane" if self.mode == "triplane" else "features"

    @property
    def input_dim(self) -> int:
        n = self.channels
        if self.use_posenc:
            n += encoding_size(3, self.pos_freqs)
        if self.use_direction:
            n += encoding_size(3, self.dir_freqs)
        return n

    @property
    def dtype(self):
        return self.payload.dtype

    def parameters(self) -> dict[str, np.ndarray]:
        """Live references to every learnable array, keyed by name."""
        out = {self.payload_name: self.payload}
        out.update({f"mlp.{k}": v for k, v in self.mlp.items()})
        return out

    def copy(self) -> "FieldParams":
        return replace(self, payload=self.payload.copy(),
                       mlp={k: v.copy() for k, v in self.mlp.items()})

    def astype(self, dtype) -> "FieldParams":
        return replace(self, payload=self.payload.astype(dtype),
                       mlp={k: v.astype(dtype) for k, v in self.mlp.items()})

    def check_finite(self) -> None:
        for name, arr in self.parameters().items():
            if not np.all(np.isfinite(arr)):
                raise FloatingPointError(f"non-finite values in field parameter {name}")


def init_mlp(input_dim: int, hidden: int, rng, dtype=np.float32) -> dict:
    """Uniform fan-in initialization of the two layers."""
    b1 = 1 / np.sqrt(input_dim)
    b2 = 1 / np.sqrt(hidden)
    return {
        "W1": rng.uniform(-b1, b1, (input_dim, hidden)).astype(dtype),
        "b1": rng.uniform(-b1, b1, hidden).astype(dtype),
        "W2": rng.uniform(-b2, b2, (hidden, 4)).astype(dtype),
        "b2": rng.uniform(-b2, b2, 4).astype(dtype),
    }


def init_field(intrinsics: Intrinsics, near: float, far: float, seed: int = 0, *,
               mode: str = "triplane", resolution: int | None = None,
               channels: int = DEFAULT_CHANNELS, hidden: int = DEFAULT_HIDDEN,
               ref_pose: Pose | None = None, dtype=np.float32, feature_std: float = 0.05,
               **flags) -> FieldParams:
    rng = np.random.default_rng(seed)
    if mode == "triplane":
        r = resolution or intrinsics.width
        payload = rng.normal(0, feature_std, (3, r, r, channels))
    else:
        payload = rng.normal(0, feature_std, (intrinsics.height, intrinsics.width, channels))
    input_dim = channels
    if flags.get("use_posenc"):
        input_dim += encoding_size(3, flags.get("pos_freqs", 6))
    if flags.get("use_direction"):
        input_dim += encoding_size(3, flags.get("dir_freqs", 4))
    mlp = init_mlp(input_dim, hidden, rng, dtype)
    return FieldParams(mode=mode, payload=payload.astype(dtype), mlp=mlp, intrinsics=intrinsics,
                       near=near, far=far, ref_pose=ref_pose or Pose.identity(), **flags)


@dataclass
class FieldCache:
    n: int
    rows: np.ndarray  # indices of the in-frustum points among the n queried
    idx: np.ndarray
    w: np.ndarray
    proj: np.ndarray
    extra: np.ndarray | None
    hidden: np.ndarray
    out: np.ndarray


def frustum_mask(fp: FieldParams, x) -> np.ndarray:
    """Points inside the reference frustum, where the field is defined."""
    x = np.asarray(x)
    depth = -x[:, 2]
    ok = (depth >= fp.near) & (depth <= fp.far)
    safe = np.where(ok, depth, 1.0)
    intr = fp.intrinsics
    u = (intr.fx * x[:, 0] / safe + intr.cx) * (2 / intr.width) - 1
    v = (intr.cy - intr.fy * x[:, 1] / safe) * (2 / intr.height) - 1
    return ok & (np.abs(u) <= 1) & (np.abs(v) <= 1)


def _conditioning(fp: FieldParams, x):
    """(inside mask, frustum coords, tap indices, tap weights) for points ``x``."""
    intr = fp.intrinsics
    if fp.mode == "triplane":
        inside, idx, w, xt = _kernels.triplane_frustum_taps(
            x, float(intr.fx), float(intr.fy), float(intr.cx), float(intr.cy),
            float(intr.width), float(intr.height), float(fp.near), float(fp.far),
            fp.payload.shape[1], CONTRACT_EPS)
        return inside, xt, idx, w
    inside = frustum_mask(fp, x)
    xt = geometry.contract(x[inside], intr, fp.near, fp.far, clamp=True, eps=CONTRACT_EPS)
    h, w_, _ = fp.payload.shape
    idx, w = image_taps(xt[:, :2], h, w_)
    return inside, xt, idx.astype(np.int32), w


def _extra_inputs(fp: FieldParams, xt, d):
    parts = []
    if fp.use_posenc:
        parts.append(positional_encoding(xt, fp.pos_freqs))
    if fp.use_direction:
        parts.append(positional_encoding(d, fp.dir_freqs))
    if not parts:
        return None
    return np.concatenate(parts, axis=1).astype(fp.dtype)


_EMPTY = {np.dtype(np.float32): np.zeros((0, 0), np.float32),
          np.dtype(np.float64): np.zeros((0, 0), np.float64)}


def field_forward(fp: FieldParams, x, d):
    """Evaluate the field at reference-frame points; returns (rgb, density, cache)."""
    x = np.ascontiguousarray(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    d = np.atleast_2d(np.asarray(d, dtype=np.float64))
    n = x.shape[0]
    dt = fp.dtype
    inside, xt, idx, w = _conditioning(fp, x)
    rows = np.flatnonzero(inside)
    m = rows.size
    c = fp.channels
    w1 = fp.mlp["W1"]
    w = w.astype(dt)
    proj = np.ascontiguousarray(fp.payload.reshape(-1, c) @ w1[:c])
    extra = _extra_inputs(fp, xt, np.broadcast_to(d, x.shape)[rows]) if m else None
    pre_extra = _EMPTY[dt] if extra is None else extra @ w1[c:]
    out = np.empty((m, 4), dtype=dt)
    hidden = np.empty((m, w1.shape[1]), dtype=dt)
    rgb = np.zeros((n, 3), dtype=dt)
    sigma = np.zeros(n, dtype=dt)
    _kernels.mlp_forward(proj, idx, w, rows, pre_extra, extra is not None, fp.mlp["b1"],
                         np.ascontiguousarray(fp.mlp["W2"].T), fp.mlp["b2"],
                         fp.hidden_activation == "relu", hidden, out, rgb, sigma)
    return rgb, sigma, FieldCache(n, rows, idx, w, proj, extra, hidden, out)


def field_backward(fp: FieldParams, cache, d_rgb=None, d_sigma=None) -> dict:
    """Reverse-mode gradients of sum(d_rgb * rgb + d_sigma * density).

    ``cache`` may also be a list of (cache, d_rgb, d_sigma) triples from
    several forward passes with the same parameters; their gradients are summed.
    """
    parts = cache if isinstance(cache, list) else [(cache, d_rgb, d_sigma)]
    dt = fp.dtype
    c = fp.channels
    w1 = fp.mlp["W1"]
    hdim = w1.shape[1]
    w2t = np.ascontiguousarray(fp.mlp["W2"].T)
    relu = fp.hidden_activation == "relu"
    d_proj = np.zeros((fp.payload.size // c, hdim), dtype=dt)
    d_w2t = np.zeros((4, hdim), dtype=dt)
    d_b1 = np.zeros(hdim, dtype=dt)
    d_b2 = np.zeros(4, dtype=dt)
    d_w1 = np.zeros_like(w1)
    for ch, g_rgb, g_sig in parts:
        g_rgb = np.ascontiguousarray(g_rgb, dtype=dt).reshape(ch.n, 3)
        g_sig = np.ascontiguousarray(g_sig, dtype=dt).reshape(ch.n)
        has_extra = ch.extra is not None
        g = np.empty((ch.rows.size, hdim), dtype=dt) if has_extra else _EMPTY[dt]
        _kernels.mlp_backward(ch.idx, ch.w, ch.rows, ch.hidden, ch.out, g_rgb, g_sig, w2t,
                              relu, d_proj, d_w2t, d_b1, d_b2, g, has_extra)
        if has_extra:
            d_w1[c:] += ch.extra.T @ g
    d_w1[:c] = fp.payload.reshape(-1, c).T @ d_proj
    return {
        "mlp.W2": np.ascontiguousarray(d_w2t.T),
        "mlp.b2": d_b2,
        "mlp.b1": d_b1,
        "mlp.W1": d_w1,
        fp.payload_name: (d_proj @ w1[:c].T).reshape(fp.payload.shape),
    }


def field_eval(fp: FieldParams, x, d=None):
    """(rgb, density) at reference-frame points ``x`` viewed along ``d``."""
    x = np.atleast_2d(x)
    if d is None:
        d = np.broadcast_to(np.array([0.0, 0.0, -1.0]), x.shape)
    fp.check_finite()
    rgb, sigma, _ = field_forward(fp, x, d)
    return rgb, sigma


def field_eval_backward(fp: FieldParams, x, d, upstream) -> dict:
    """Gradients of <upstream, [rgb, density]> w.r.t. all field parameters."""
    x = np.atleast_2d(x)
    if d is None:
        d = np.broadcast_to(np.array([0.0, 0.0, -1.0]), x.shape)
    up = np.atleast_2d(np.asarray(upstream))
    _, _, cache = field_forward(fp, x, d)
    return field_backward(fp, cache, up[:, :3], up[:, 3])


def save_field(fp: FieldParams, path) -> None:
    """Tensors go to ``path`` (NFD1); configuration to ``path + '.json'``."""
    tensorio.save_tensors(path, fp.parameters())
    intr = fp.intrinsics
    meta = {
        "mode": fp.mode,
        "intrinsics": {**intr.to_dict(), "width": intr.width, "height": intr.height},
        "near": fp.near,
        "far": fp.far,
        "ref_pose": {"r": fp.ref_pose.rotation.ravel().tolist(),
                     "t": fp.ref_pose.translation.tolist()},
        "use_direction": fp.use_direction,
        "dir_freqs": fp.dir_freqs,
        "use_posenc": fp.use_posenc,
        "pos_freqs": fp.pos_freqs,
        "hidden_activation": fp.hidden_activation,
    }
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=1))


def load_field(path) -> FieldParams:
    meta = json.loads(Path(str(path) + ".json").read_text())
    tensors = tensorio.load_tensors(path)
    k = meta["intrinsics"]
    intr = Intrinsics(k["fx"], k["fy"], k["cx"], k["cy"], k["width"], k["height"])
    payload_name = "triplane" if meta["mode"] == "triplane" else "features"
    mlp = {name[4:]: arr for name, arr in tensors.items() if name.startswith("mlp.")}
    pose = Pose(np.reshape(meta["ref_pose"]["r"], (3, 3)), np.asarray(meta["ref_pose"]["t"]))
    return FieldParams(mode=meta["mode"], payload=tensors[payload_name], mlp=mlp,
                       intrinsics=intr, near=meta["near"], far=meta["far"], ref_pose=pose,
                       use_direction=meta["use_direction"], dir_freqs=meta["dir_freqs"],
                       use_posenc=meta["use_posenc"], pos_freqs=meta["pos_freqs"],
                       hidden_activation=meta["hidden_activation"])
