"""Field-guided multi-view DDIM interleaved with field finetuning, the
direct-distillation and score-distillation baselines, and the virtual
camera priors (spiral and circle).

Guidance. With the model's noise prediction eps and its denoised image
I_t = (Z - sigma eps) / alpha, the guided prediction is

    eps~ = eps + gamma (sigma / alpha) (I_t - I_nerf)

whose denoised image is I_t + (gamma / SNR) (I_nerf - I_t), SNR = alpha^2 / sigma^2.
``gamma="snr"`` therefore replaces the denoised image by the NeRF render; it
stays finite at t = 1 where alpha = 0.

By default the finetuning loss of an outer step pulls each view's render
towards the model's own denoised image I_t at the current state;
``target="guided"`` uses the guided prediction instead, which under the SNR
weight is the render itself.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry, renderer
from .diffusion import COSINE, NoiseSchedule, add_noise, ddim_sample, ddim_step, time_grid
from .field import FieldParams
from .geometry import Camera, Intrinsics
from .optimize import DEFAULT_LRS, Adam, FitConfig, RayPool, fit_scene, photometric_step

WORLD_UP = np.array([0.0, 0.0, 1.0])


def guided_eps(eps_hat, i_t, i_nerf, sched: NoiseSchedule, t, gamma):
    """eps + gamma (sigma / alpha) (I_t - I_nerf); ``gamma`` may be "snr"."""
    a, s = sched.alpha_sigma(t)
    if a <= 0:
        raise ValueError("guided_eps is undefined at t = 1 (alpha = 0)")
    g = a * a / (s * s) if gamma == "snr" else float(gamma)
    if g < 0:
        raise ValueError("guidance weight must be non-negative")
    return np.asarray(eps_hat) + g * (s / a) * (np.asarray(i_t) - np.asarray(i_nerf))


def guidance_blend(sched: NoiseSchedule, t, gamma) -> tuple[float, float]:
    """(w, k): the guided x0 is I_t + w (I_nerf - I_t), the guided eps is
    eps + k (I_t - I_nerf)."""
    a, s = sched.alpha_sigma(t)
    if s == 0:
        raise ValueError("guidance needs t > 0")
    if gamma == "snr":
        return 1.0, a / s
    if callable(gamma):
        gamma = gamma(t)
    gamma = float(gamma)
    if gamma < 0:
        raise ValueError("guidance weight must be non-negative")
    if gamma == 0:
        return 0.0, 0.0
    if a == 0:
        raise ValueError("a constant guidance weight is unbounded at t = 1; use gamma='snr'")
    return gamma * s * s / (a * a), gamma * s / a


# ---------------------------------------------------------------- camera priors

def spiral_indices(n_points: int, k: int, stride: int) -> np.ndarray:
    idx = np.arange(0, n_points, stride)[:k]
    if idx.size < k:
        raise ValueError(f"{n_points} spiral points with stride {stride} give fewer than {k} cameras")
    return idx


def sample_prior_spiral(k: int, radius: float, intrinsics: Intrinsics, turns: float = 4.0,
                        stride: int = 5, n_points: int | None = None, target=(0.0, 0.0, 0.0),
                        up=WORLD_UP) -> list[Camera]:
    """Every ``stride``-th camera of an Archimedean spiral over the sphere,
    all looking at ``target``."""
    if k < 1:
        raise ValueError("need at least one virtual view")
    n = n_points if n_points is not None else k * stride + 1
    eyes = geometry.spiral_positions(n, radius, turns)[spiral_indices(n, k, stride)]
    target = np.asarray(target, dtype=np.float64)
    return [Camera(intrinsics, geometry.look_at(target + e, target, up)) for e in eyes]


def estimate_origin_from_axes(origins, directions) -> np.ndarray:
    """Least-squares point closest to all lines o_i + s d_i."""
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = geometry.normalize(np.atleast_2d(np.asarray(directions, dtype=np.float64)))
    if o.shape[0] < 2 or o.shape != d.shape:
        raise ValueError("need at least two axes given as matching (N, 3) arrays")
    proj = np.eye(3)[None] - d[:, :, None] * d[:, None, :]
    a = proj.sum(0)
    b = np.einsum("nij,nj->i", proj, o)
    if np.linalg.eigvalsh(a)[0] < 1e-10 * o.shape[0]:
        raise ValueError("optical axes are (nearly) parallel; origin is undetermined")
    return np.linalg.solve(a, b)


def estimate_up(centers, forwards) -> np.ndarray:
    """Unit normal of the best-fit plane through the camera centers, signed so
    that it points against the viewing directions on average."""
    c = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if c.shape[0] < 3:
        raise ValueError("need at least three camera centers")
    _, sv, vt = np.linalg.svd(c - c.mean(0))
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise ValueError("camera centers are collinear; plane normal is undetermined")
    n = vt[2]
    if np.mean(np.atleast_2d(forwards) @ n) > 0:
        n = -n
    return n / np.linalg.norm(n)


def sample_prior_circle(k: int, origin, up, radius: float, intrinsics: Intrinsics,
                        plane_point=None, start=None) -> list[Camera]:
    """``k`` cameras evenly spaced on the circle of the camera plane at distance
    ``radius`` from ``origin``, looking at ``origin``.

    The plane has normal ``up`` and passes through ``plane_point`` (default:
    ``origin`` itself).
    """
    if k < 1:
        raise ValueError("need at least one virtual view")
    origin = np.asarray(origin, dtype=np.float64)
    up = geometry.normalize(up)
    h = 0.0 if plane_point is None else float((np.asarray(plane_point) - origin) @ up)
    if radius <= abs(h):
        raise ValueError("radius does not reach the camera plane")
    center = origin + h * up
    eyes = geometry.circle_positions(k, center, up, np.sqrt(radius ** 2 - h ** 2), start)
    return [Camera(intrinsics, geometry.look_at(e, origin, up)) for e in eyes]


# ---------------------------------------------------------------- distillation

@dataclass
class GuidanceConfig:
    gamma: object = "snr"  # "snr", a float, or a callable t -> gamma
    steps: int = 64  # T, DDIM steps
    nerf_steps: int = 64  # N, NeRF steps per DDIM step
    batch_rays: int = 4096  # B
    lrs: dict = field(default_factory=lambda: dict(DEFAULT_LRS))
    guide_render: renderer.RenderConfig = field(
        default_factory=lambda: renderer.RenderConfig(n_coarse=32, n_fine=32))
    train_render: renderer.RenderConfig = field(
        default_factory=lambda: renderer.RenderConfig(n_coarse=16, n_fine=16))
    clip_norm: float | None = None
    sched: NoiseSchedule = COSINE
    target: str = "model"  # "model": denoised I_t; "guided": the guided prediction

    def __post_init__(self):
        if self.target not in ("model", "guided"):
            raise ValueError("target must be 'model' or 'guided'")
        if self.steps < 1 or self.batch_rays < 1 or self.nerf_steps < 0:
            raise ValueError("T and B must be >= 1 and N >= 0")
        if not (self.gamma == "snr" or callable(self.gamma) or float(self.gamma) >= 0):
            raise ValueError("gamma must be 'snr', a callable or a non-negative number")


@dataclass
class VirtualViewSet:
    """Per-view diffusion states sharing one time index."""

    cameras: list
    z: list
    i_t: list
    t: float = 1.0

    def __len__(self) -> int:
        return len(self.cameras)

    @property
    def shape(self) -> tuple:
        intr = self.cameras[0].intrinsics
        return (intr.height, intr.width, 3)

    @classmethod
    def start(cls, cameras, seed) -> "VirtualViewSet":
        """Independent N(0, I) states for every view at t = 1."""
        if len(cameras) < 1:
            raise ValueError("need at least one virtual view")
        rng = np.random.default_rng(seed)
        intr = cameras[0].intrinsics
        z = [rng.standard_normal((intr.height, intr.width, 3)) for _ in cameras]
        return cls(list(cameras), z, [None] * len(cameras), 1.0)


def _per_view(model, k: int) -> list:
    models = list(model) if isinstance(model, (list, tuple)) else [model] * k
    if len(models) != k:
        raise ValueError("need one score model per virtual view")
    return models


def render_views(fp: FieldParams, cameras, cfg: renderer.RenderConfig, seed) -> list[np.ndarray]:
    return [renderer.render_image(fp, cam, cfg, seed=np.random.default_rng([*seed, v])).rgb
            .astype(np.float64) for v, cam in enumerate(cameras)]


def psnr_db(a, b) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    return float("inf") if mse == 0 else 10 * np.log10(1.0 / mse)


@dataclass
class NGDResult:
    params: FieldParams
    views: VirtualViewSet
    diagnostics: list  # rows (outer_step, t, eq8_loss, mean_view_psnr)
    renders: list


def _train_pool(cameras, targets, fp, input_view):
    cams, imgs = list(cameras), list(targets)
    if input_view is not None:
        cams.append(input_view[0])
        imgs.append(input_view[1])
    return RayPool(cams, imgs, fp.near, fp.far)


def ngd_finetune(fp: FieldParams, model, cameras, cfg: GuidanceConfig = GuidanceConfig(),
                 seed: int = 0, input_view=None) -> NGDResult:
    """Guided finetuning of ``fp`` over the virtual ``cameras``.

    Each outer step (t -> t_next on the uniform grid):
      1. every view's model predicts eps and I_t, conditioned on its current render;
      2. N Adam steps on the MSE between renders and I_t over B rays drawn from all views;
      3. views are re-rendered and advanced with a guided DDIM step.
    ``model`` is one ScoreModel or a list with one per view. ``input_view``,
    an optional (camera, image) pair, adds the observed view to the ray pool.
    """
    fp = fp.copy()
    k = len(cameras)
    models = _per_view(model, k)
    sched = cfg.sched
    views = VirtualViewSet.start(cameras, [seed, 0])
    rng_batch = np.random.default_rng([seed, 1])
    rng_render = np.random.default_rng([seed, 2])
    opt = Adam(fp.parameters(), cfg.lrs, clip_norm=cfg.clip_norm)
    ts = time_grid(cfg.steps)
    renders = render_views(fp, cameras, cfg.guide_render, (seed, 3, 0))
    diagnostics = []
    for step, (t, t_next) in enumerate(zip(ts[:-1], ts[1:])):
        if views.t != t:
            raise RuntimeError("virtual views fell out of sync")
        eps, i_t = [], []
        for v in range(k):
            e, x0 = models[v].denoise(views.z[v], t, renders[v])
            eps.append(e)
            i_t.append(x0)
        views.i_t = i_t
        if cfg.target == "guided":
            w, _ = guidance_blend(sched, t, cfg.gamma)
            targets = [np.clip(x + w * (r - x), 0.0, 1.0) for x, r in zip(i_t, renders)]
        else:
            targets = [np.clip(x, 0.0, 1.0) for x in i_t]
        target_loss = float(np.mean([np.mean((r - x) ** 2) for r, x in zip(renders, targets)]))
        if not np.isfinite(target_loss):
            raise FloatingPointError(f"non-finite finetuning loss at outer step {step} (t={t})")
        diagnostics.append((step, float(t), target_loss,
                            float(np.mean([psnr_db(x, r) for r, x in zip(renders, targets)]))))
        if cfg.nerf_steps:
            pool = _train_pool(cameras, targets, fp, input_view)
            for _ in range(cfg.nerf_steps):
                rays, tgt = pool.batch(rng_batch.integers(0, len(pool), cfg.batch_rays))
                try:
                    _, grads, _ = photometric_step(fp, rays, tgt, cfg.train_render, rng_render)
                except FloatingPointError as exc:
                    raise FloatingPointError(f"outer step {step} (t={t}): {exc}") from exc
                opt.step(grads)
            fp.check_finite()
            renders = render_views(fp, cameras, cfg.guide_render, (seed, 3, step + 1))
        w, kk = guidance_blend(sched, t, cfg.gamma)
        for v in range(k):
            x0 = i_t[v] + w * (renders[v] - i_t[v])
            e = eps[v] + kk * (i_t[v] - renders[v])
            views.z[v] = ddim_step(views.z[v], e, sched, t, t_next, x0)
        views.t = float(t_next)
    return NGDResult(fp, views, diagnostics, renders)


def direct_distill(fp: FieldParams, model, cameras, cfg: GuidanceConfig = GuidanceConfig(),
                   seed: int = 0, iterations: int | None = None, input_view=None):
    """Sample every view unguided to t = 0, then fit the NeRF to the samples.

    The default fit budget is T * N steps, matching :func:`ngd_finetune`.
    Returns (fitted params, sampled images).
    """
    k = len(cameras)
    models = _per_view(model, k)
    conds = render_views(fp, cameras, cfg.guide_render, (seed, 3, 0))
    shape = conds[0].shape
    samples = [np.clip(ddim_sample(models[v], conds[v], shape, cfg.steps, seed=[seed, 0, v]), 0, 1)
               for v in range(k)]
    iters = cfg.steps * cfg.nerf_steps if iterations is None else iterations
    cams, imgs = list(cameras), list(samples)
    if input_view is not None:
        cams.append(input_view[0])
        imgs.append(input_view[1])
    fit = FitConfig(iterations=iters, batch_rays=cfg.batch_rays, lrs=cfg.lrs,
                    render=cfg.train_render, seed=seed, clip_norm=cfg.clip_norm)
    return fit_scene(fp, cams, imgs, fit).params, samples


def sds_grads(fp: FieldParams, model, rays, shape, t: float, noise, sel, cfg: GuidanceConfig,
              rng_render) -> dict:
    """Gradient of the score-distillation pull for one view.

    The view is rendered, noised to ``t`` with ``noise`` and denoised by
    ``model`` (conditioned on the render); the MSE towards that clipped
    prediction over the pixels ``sel`` is back-propagated into ``fp``.
    """
    comp, ctx = renderer.render_rays(fp, rays, cfg.train_render, rng_render)
    img = comp.rgb.astype(np.float64).reshape(shape)
    z = add_noise(img, noise, cfg.sched, t)
    _, x0 = model.denoise(z, t, img)
    target = np.clip(x0, 0, 1).reshape(-1, 3)
    d_rgb = np.zeros_like(comp.rgb)
    diff = comp.rgb[sel] - target[sel]
    d_rgb[sel] = 2 * diff / diff.size
    return renderer.render_backward(fp, ctx, d_rgb)


def sds_finetune(fp: FieldParams, model, cameras, cfg: GuidanceConfig = GuidanceConfig(),
                 seed: int = 0, iterations: int | None = None, t_range=(0.02, 0.98),
                 input_view=None) -> FieldParams:
    """Score distillation: noise a view's render at a random t and pull the
    render towards the model's denoised image.

    Each iteration renders B rays of one random view (all pixels when B covers
    the image); the default budget is T * N iterations.
    """
    fp = fp.copy()
    k = len(cameras)
    models = _per_view(model, k)
    iters = cfg.steps * cfg.nerf_steps if iterations is None else iterations
    rng = np.random.default_rng([seed, 0])
    rng_render = np.random.default_rng([seed, 2])
    opt = Adam(fp.parameters(), cfg.lrs, clip_norm=cfg.clip_norm)
    all_rays = [renderer.camera_rays(fp, cam) for cam in cameras]
    pool = None if input_view is None else RayPool([input_view[0]], [input_view[1]], fp.near, fp.far)
    intr = cameras[0].intrinsics
    shape = (intr.height, intr.width, 3)
    for _ in range(iters):
        v = int(rng.integers(0, k))
        t = float(rng.uniform(*t_range))
        noise = rng.standard_normal(shape)
        sel = rng.permutation(len(all_rays[v]))[:cfg.batch_rays]
        grads = sds_grads(fp, models[v], all_rays[v], shape, t, noise, sel, cfg, rng_render)
        if pool is not None:
            rays, tgt = pool.batch(rng.integers(0, len(pool), cfg.batch_rays))
            _, g2, _ = photometric_step(fp, rays, tgt, cfg.train_render, rng_render)
            grads = {n: grads[n] + g2[n] for n in grads}
        opt.step(grads)
        fp.check_finite()
    return fp


def write_diagnostics(path, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["outer_step", "t", "eq8_loss", "mean_view_psnr"])
        for step, t, loss, p in rows:
            w.writerow([step, repr(t), repr(loss), repr(p)])
