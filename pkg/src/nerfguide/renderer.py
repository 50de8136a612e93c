"""Quadrature volume rendering with stratified + importance sampling.

Each sample owns the interval between the midpoints to its neighbours (the
first starts at the ray's near bound, the last ends at its far bound), so
the deltas of a ray always sum to far - near. Compositing uses
w_i = T_i (1 - exp(-sigma_i delta_i)), T_i = exp(-sum_{j<i} sigma_j delta_j),
over a constant background color.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from .field import FieldParams, field_backward, field_forward
from .geometry import Camera, Rays


@dataclass(frozen=True)
class RenderConfig:
    n_coarse: int = 64
    n_fine: int = 64
    jitter: bool = True
    background: tuple = (1.0, 1.0, 1.0)
    pdf_floor: float = 1e-2
    chunk: int = 4096


@dataclass
class RenderedImage:
    rgb: np.ndarray
    opacity: np.ndarray | None = None
    depth: np.ndarray | None = None


def _rng(seed):
    if seed is None or isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def interval_edges(t, near, far):
    """Edges (N, S+1) of the quadrature intervals around sorted samples ``t``."""
    t = np.asarray(t, dtype=np.float64)
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), t.shape[:1])
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), t.shape[:1])
    mid = 0.5 * (t[:, 1:] + t[:, :-1])
    return np.concatenate([near[:, None], mid, far[:, None]], axis=1)


def sample_stratified(near, far, n: int, rng=None) -> np.ndarray:
    """One draw per equal bin of [near, far]; bin midpoints when ``rng`` is None."""
    if n < 1:
        raise ValueError("need at least one sample per ray")
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    rng = _rng(rng)
    u = 0.5 if rng is None else rng.random((near.shape[0], n))
    s = (np.arange(n) + u) / n
    return near[:, None] + (far - near)[:, None] * s


def sample_importance(t, weights, n: int, rng=None, near=None, far=None,
                      floor: float = 1e-2) -> np.ndarray:
    """Inverse-CDF samples from the piecewise-constant pdf given by ``weights``.

    Bins are the quadrature intervals of ``t``; each bin gets mass
    weight + floor * mean(weight). Rays whose weights are all zero sample
    uniformly. Returned samples are sorted per ray.
    """
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    if np.any(w < 0):
        raise ValueError("importance weights must be non-negative")
    nr, s = t.shape
    near = t[:, 0] if near is None else near
    far = t[:, -1] if far is None else far
    edges = interval_edges(t, near, far)
    w = w + floor * w.mean(axis=1, keepdims=True)
    total = w.sum(axis=1, keepdims=True)
    w = np.where(total > 0, w, 1.0)
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((nr, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    rng = _rng(rng)
    xi = 0.5 if rng is None else rng.random((nr, n))
    u = (np.arange(n) + xi) / n
    # one searchsorted over all rays: offset row r by 2r to keep keys monotone
    off = 2.0 * np.arange(nr)[:, None]
    pos = np.searchsorted((cdf + off).ravel(), (u + off).ravel(), side="right")
    idx = pos.reshape(nr, n) - 1 - (s + 1) * np.arange(nr)[:, None]
    idx = np.clip(idx, 0, s - 1)
    c0 = np.take_along_axis(cdf, idx, 1)
    c1 = np.take_along_axis(cdf, idx + 1, 1)
    e0 = np.take_along_axis(edges, idx, 1)
    e1 = np.take_along_axis(edges, idx + 1, 1)
    frac = np.clip((u - c0) / np.maximum(c1 - c0, 1e-300), 0, 1)
    return e0 + frac * (e1 - e0)


@dataclass
class Composite:
    rgb: np.ndarray
    opacity: np.ndarray
    depth: np.ndarray
    weights: np.ndarray
    deltas: np.ndarray
    trans: np.ndarray  # T_i, (N, S+1) including the exit transmittance
    colors: np.ndarray
    background: np.ndarray
    t: np.ndarray  # sorted sample depths


def composite(t, rgb, sigma, near, far, background=(1.0, 1.0, 1.0)) -> Composite:
    """Alpha-composite samples along each ray over a constant background."""
    sigma = np.atleast_2d(sigma)
    if not np.all(np.isfinite(sigma)):
        raise FloatingPointError("non-finite densities in composite")
    dt = sigma.dtype
    deltas = np.diff(interval_edges(t, near, far), axis=1).astype(dt)
    tau = sigma * deltas
    acc = np.cumsum(tau, axis=1)
    trans = np.exp(-np.concatenate([np.zeros((tau.shape[0], 1), dt), acc], axis=1))
    weights = trans[:, :-1] * -np.expm1(-tau)
    bg = np.asarray(background, dtype=dt)
    opacity = weights.sum(axis=1)
    out = np.einsum("ns,nsc->nc", weights, rgb) + (1 - opacity)[:, None] * bg
    depth = (weights * np.asarray(t, dtype=dt)).sum(axis=1)
    return Composite(out, opacity, depth, weights, deltas, trans, rgb, bg, np.asarray(t))


def composite_backward(comp: Composite, d_rgb):
    """Gradients of <d_rgb, pixel rgb> w.r.t. per-sample colors and densities."""
    g = np.asarray(d_rgb, dtype=comp.weights.dtype)
    d_colors = comp.weights[:, :, None] * g[:, None, :]
    # s_i = <c_i - bg, g>; d sigma_i = delta_i (T_{i+1} s_i - sum_{k>i} w_k s_k)
    s = np.einsum("nsc,nc->ns", comp.colors - comp.background, g)
    ws = comp.weights * s
    tail = np.cumsum(ws[:, ::-1], axis=1)[:, ::-1] - ws
    d_sigma = comp.deltas * (comp.trans[:, 1:] * s - tail)
    return d_colors, d_sigma


def _flat_index(order):
    n, s = order.shape
    return (order + s * np.arange(n)[:, None]).ravel()


@dataclass
class RenderContext:
    caches: list
    sizes: list
    order: np.ndarray | None  # flat gather index of the depth sort
    comp: Composite
    n_rays: int


def _to_reference(fp: FieldParams, rays: Rays):
    o = fp.ref_pose.to_camera(rays.origins)
    d = rays.directions @ fp.ref_pose.rotation
    return o, d


def _eval_samples(fp, o, d, t):
    n, s = t.shape
    pts = (o[:, None, :] + t[..., None] * d[:, None, :]).reshape(-1, 3)
    if fp.use_direction:
        dirs = np.repeat(d, s, axis=0)
    else:
        dirs = np.broadcast_to(d[:1], (1, 3))
    rgb, sigma, cache = field_forward(fp, pts, dirs)
    return rgb.reshape(n, s, 3), sigma.reshape(n, s), cache


def render_rays(fp: FieldParams, rays: Rays, cfg: RenderConfig = RenderConfig(), rng=None,
                t_values=None):
    """Render a ray batch; returns (Composite, RenderContext for backward).

    ``t_values`` (N, S) bypasses the samplers and evaluates exactly those
    sorted depths.
    """
    rng = _rng(rng)
    o, d = _to_reference(fp, rays)
    bg = cfg.background
    if t_values is not None:
        t = np.atleast_2d(np.asarray(t_values, dtype=np.float64))
        rgb, sigma, cache = _eval_samples(fp, o, d, t)
        comp = composite(t, rgb, sigma, rays.near, rays.far, bg)
        return comp, RenderContext([cache], [t.shape[1]], None, comp, len(rays))
    jit = rng if cfg.jitter else None
    tc = sample_stratified(rays.near, rays.far, cfg.n_coarse, jit)
    rgb_c, sig_c, cache_c = _eval_samples(fp, o, d, tc)
    if cfg.n_fine == 0:
        comp = composite(tc, rgb_c, sig_c, rays.near, rays.far, bg)
        return comp, RenderContext([cache_c], [cfg.n_coarse], None, comp, len(rays))
    coarse = composite(tc, rgb_c, sig_c, rays.near, rays.far, bg)
    tf = sample_importance(tc, coarse.weights, cfg.n_fine, jit, rays.near, rays.far,
                           cfg.pdf_floor)
    rgb_f, sig_f, cache_f = _eval_samples(fp, o, d, tf)
    t_all = np.concatenate([tc, tf], axis=1)
    order = np.argsort(t_all, axis=1, kind="stable")
    flat = _flat_index(order)
    t_s = t_all.ravel()[flat].reshape(t_all.shape)
    rgb_s = np.concatenate([rgb_c, rgb_f], 1).reshape(-1, 3)[flat].reshape(t_all.shape + (3,))
    sig_s = np.concatenate([sig_c, sig_f], 1).ravel()[flat].reshape(t_all.shape)
    comp = composite(t_s, rgb_s, sig_s, rays.near, rays.far, bg)
    return comp, RenderContext([cache_c, cache_f], [cfg.n_coarse, cfg.n_fine], flat, comp,
                               len(rays))


def render_function(fn, rays: Rays, cfg: RenderConfig = RenderConfig(), rng=None) -> Composite:
    """Hierarchical render of a world-space field ``fn(points) -> (rgb, sigma)``.

    Same sampling and compositing as :func:`render_rays`, without gradients.
    """
    rng = _rng(rng)
    jit = rng if cfg.jitter else None
    tc = sample_stratified(rays.near, rays.far, cfg.n_coarse, jit)
    rgb, sigma = fn(rays.at(tc))
    comp = composite(tc, rgb, sigma, rays.near, rays.far, cfg.background)
    if cfg.n_fine == 0:
        return comp
    tf = sample_importance(tc, comp.weights, cfg.n_fine, jit, rays.near, rays.far, cfg.pdf_floor)
    t = np.sort(np.concatenate([tc, tf], axis=1), axis=1)
    rgb, sigma = fn(rays.at(t))
    return composite(t, rgb, sigma, rays.near, rays.far, cfg.background)


def render_backward(fp: FieldParams, ctx: RenderContext, d_rgb) -> dict:
    """Parameter gradients of <d_rgb, rendered rgb>; sample positions are constants."""
    d_col, d_sig = composite_backward(ctx.comp, d_rgb)
    if ctx.order is not None:
        # undo the depth sort: sorted slot k came from unsorted slot order[k]
        d_col_u = np.empty_like(d_col)
        d_sig_u = np.empty_like(d_sig)
        d_col_u.reshape(-1, 3)[ctx.order] = d_col.reshape(-1, 3)
        d_sig_u.ravel()[ctx.order] = d_sig.ravel()
        d_col, d_sig = d_col_u, d_sig_u
    parts = []
    start = 0
    for cache, size in zip(ctx.caches, ctx.sizes):
        parts.append((cache, d_col[:, start:start + size], d_sig[:, start:start + size]))
        start += size
    return field_backward(fp, parts)


def render_pixel(fp: FieldParams, ray: Rays, cfg: RenderConfig = RenderConfig(), seed=0):
    """Color of a single ray (plus opacity and expected depth)."""
    comp, _ = render_rays(fp, ray[:1], cfg, seed)
    return comp.rgb[0], comp.opacity[0], comp.depth[0]


def camera_rays(fp: FieldParams, camera: Camera, near=None, far=None) -> Rays:
    return geometry.generate_rays(camera, fp.near if near is None else near,
                                  fp.far if far is None else far)


def render_image(fp: FieldParams, camera: Camera, cfg: RenderConfig = RenderConfig(), seed=0,
                 near=None, far=None) -> RenderedImage:
    """Render every pixel of ``camera``; deterministic given ``seed``."""
    rays = camera_rays(fp, camera, near, far)
    rng = _rng(seed)
    rgb, acc, depth = [], [], []
    for s in range(0, len(rays), cfg.chunk):
        comp, _ = render_rays(fp, rays[s:s + cfg.chunk], cfg, rng)
        rgb.append(comp.rgb)
        acc.append(comp.opacity)
        depth.append(comp.depth)
    h, w = camera.intrinsics.height, camera.intrinsics.width
    return RenderedImage(
        np.concatenate(rgb).reshape(h, w, 3),
        np.concatenate(acc).reshape(h, w),
        np.concatenate(depth).reshape(h, w),
    )


def render_image_with_grad(fp: FieldParams, camera: Camera, cfg: RenderConfig, seed=0,
                           near=None, far=None):
    """Render a full image and return a closure mapping d_image -> gradients."""
    rays = camera_rays(fp, camera, near, far)
    comp, ctx = render_rays(fp, rays, cfg, seed)
    h, w = camera.intrinsics.height, camera.intrinsics.width

    def backward(d_image):
        return render_backward(fp, ctx, np.asarray(d_image).reshape(-1, 3))

    return comp.rgb.reshape(h, w, 3), backward
