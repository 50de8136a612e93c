"""Losses, Adam with per-group learning rates, EMA and the fitting loops."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels, geometry, renderer
from .field import FieldParams
from .geometry import Rays

DEFAULT_LRS = {"mlp": 1e-4, "triplane": 5e-2}


def mse_ray_loss(rendered, target):
    """Mean squared channel error and its gradient w.r.t. ``rendered``."""
    r = np.asarray(rendered)
    t = np.asarray(target)
    if r.shape != t.shape:
        raise ValueError(f"shape mismatch: {r.shape} vs {t.shape}")
    diff = r - t
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def param_group(name: str) -> str:
    """MLP weights form one group; the conditioning payload the other."""
    return "mlp" if name.startswith("mlp.") else "triplane"


class Adam:
    """Bias-corrected Adam that updates a dict of arrays in place.

    ``lrs`` maps group names to learning rates (or is a single float);
    ``group_of`` assigns each parameter name to a group.
    """

    def __init__(self, params: dict, lrs=None, betas=(0.9, 0.999), eps=1e-8,
                 clip_norm: float | None = None, group_of=param_group):
        self.params = params
        if lrs is None:
            lrs = DEFAULT_LRS
        self.lrs = {g: float(lrs) for g in map(group_of, params)} if np.isscalar(lrs) else dict(lrs)
        self.groups = {k: group_of(k) for k in params}
        missing = set(self.groups.values()) - set(self.lrs)
        if missing:
            raise ValueError(f"no learning rate for parameter groups {sorted(missing)}")
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict) -> None:
        for k, g in grads.items():
            if g.shape != self.params[k].shape:
                raise ValueError(f"gradient shape mismatch for {k}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {k}")
        scale = 1.0
        if self.clip_norm is not None:
            norm = np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        self.step_count += 1
        c1 = 1 - self.beta1 ** self.step_count
        c2 = 1 - self.beta2 ** self.step_count
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                g = np.zeros_like(p)
            _kernels.adam_update(p.reshape(-1), np.ascontiguousarray(g, dtype=p.dtype).reshape(-1),
                                 self.m[k].reshape(-1), self.v[k].reshape(-1),
                                 self.lrs[self.groups[k]], self.beta1, self.beta2, c1, c2,
                                 self.eps, scale)


def ema_update(ema: dict, params: dict, decay: float = 0.9999) -> dict:
    """In-place ema <- decay * ema + (1 - decay) * params; returns ``ema``."""
    for k, p in params.items():
        if ema[k].shape != p.shape:
            raise ValueError(f"shape mismatch for {k}")
        ema[k] *= decay
        ema[k] += (1 - decay) * p
    return ema


@dataclass
class FitConfig:
    iterations: int = 2000
    batch_rays: int = 4096
    lrs: dict = field(default_factory=lambda: dict(DEFAULT_LRS))
    render: renderer.RenderConfig = field(
        default_factory=lambda: renderer.RenderConfig(n_coarse=16, n_fine=16))
    seed: int = 0
    clip_norm: float | None = None


class RayPool:
    """All pixel rays of a set of posed images, for uniform batch sampling."""

    def __init__(self, cameras, images, near, far):
        if len(cameras) == 0 or len(cameras) != len(images):
            raise ValueError("need one image per camera and at least one view")
        o, d, c = [], [], []
        for cam, img in zip(cameras, images):
            r = geometry.generate_rays(cam, near, far)
            o.append(r.origins)
            d.append(r.directions)
            c.append(np.asarray(img, dtype=np.float64).reshape(-1, 3))
        self.origins = np.concatenate(o)
        self.directions = np.concatenate(d)
        self.colors = np.concatenate(c)
        self.near, self.far = near, far

    def __len__(self) -> int:
        return self.origins.shape[0]

    def batch(self, idx) -> tuple[Rays, np.ndarray]:
        return (Rays(self.origins[idx], self.directions[idx], self.near, self.far),
                self.colors[idx])


def photometric_step(fp: FieldParams, rays: Rays, target, cfg: renderer.RenderConfig, rng):
    """Render a ray batch; return (loss, grads, rendered rgb)."""
    comp, ctx = renderer.render_rays(fp, rays, cfg, rng)
    loss, d_rgb = mse_ray_loss(comp.rgb, target.astype(comp.rgb.dtype))
    if not np.isfinite(loss):
        raise FloatingPointError("loss became non-finite")
    return loss, renderer.render_backward(fp, ctx, d_rgb), comp.rgb


@dataclass
class FitResult:
    params: FieldParams
    losses: np.ndarray


def fit_scene(fp: FieldParams, cameras, images, cfg: FitConfig = FitConfig(), near=None,
              far=None, optimizer: Adam | None = None) -> FitResult:
    """Photometric MSE fit of ``fp`` (a copy) to posed images."""
    fp = fp.copy()
    near = fp.near if near is None else near
    far = fp.far if far is None else far
    pool = RayPool(cameras, images, near, far)
    rng_batch = np.random.default_rng([cfg.seed, 0])
    rng_render = np.random.default_rng([cfg.seed, 1])
    opt = optimizer or Adam(fp.parameters(), cfg.lrs, clip_norm=cfg.clip_norm)
    losses = np.empty(cfg.iterations)
    for it in range(cfg.iterations):
        rays, target = pool.batch(rng_batch.integers(0, len(pool), cfg.batch_rays))
        loss, grads, _ = photometric_step(fp, rays, target, cfg.render, rng_render)
        losses[it] = loss
        opt.step(grads)
        fp.check_finite()
    return FitResult(fp, losses)


def write_loss_csv(path, rows) -> None:
    """Rows of (step, loss_ic, loss_dm, total)."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss_ic", "loss_dm", "total"])
        for row in rows:
            w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])


@dataclass
class JointConfig:
    iterations: int = 1000
    batch_rays: int = 4096
    lrs: dict = field(default_factory=lambda: {**DEFAULT_LRS, "den": 1e-3})
    render: renderer.RenderConfig = field(
        default_factory=lambda: renderer.RenderConfig(n_coarse=16, n_fine=16))
    seed: int = 0
    clip_norm: float | None = None


@dataclass
class JointResult:
    fields: list
    denoiser: object
    rows: list  # (step, loss_ic, loss_dm, total)


def _joint_group(name: str) -> str:
    if name.startswith("den."):
        return "den"
    return param_group(name.split("/", 1)[-1])


def joint_parameters(fields, den) -> dict:
    """Flat parameter dict: per-scene payloads ``scene{i}/<name>``, one shared
    ``mlp.*`` set, and the denoiser under ``den.*``."""
    out = {}
    for i, fp in enumerate(fields):
        out[f"scene{i}/{fp.payload_name}"] = fp.payload
    out.update({f"mlp.{k}": v for k, v in fields[0].mlp.items()})
    out.update({f"den.{k}": v for k, v in den.params.items()})
    return out


def _rename(grads: dict, scene: int) -> dict:
    return {(k if k.startswith("mlp.") else f"scene{scene}/{k}"): v for k, v in grads.items()}


def joint_terms(fp: FieldParams, den, scene: int, rays: Rays, target, camera, view_image,
                t, eps, render_cfg: renderer.RenderConfig, render_rng, cond_seed) -> dict:
    """Both loss terms of one joint step and their separate gradients.

    The reconstruction term is the photometric MSE on a ray batch. The
    denoising term renders ``camera`` (with gradient), uses it as the
    conditioning of ``den`` and scores the v-prediction on ``view_image``
    noised at time ``t`` with ``eps``; its gradient reaches both networks.
    """
    from .diffusion import v_loss

    loss_ic, g_ic, _ = photometric_step(fp, rays, target, render_cfg, render_rng)
    cond, back = renderer.render_image_with_grad(fp, camera, render_cfg, cond_seed)
    loss_dm, cache, d_v = v_loss(den, cond[None], np.asarray(view_image)[None],
                                 np.atleast_1d(t), eps[None])
    g_den, d_cond = den.backward(cache, d_v)
    g_dm = {f"den.{k}": v for k, v in g_den.items()}
    if d_cond is not None:
        g_dm.update(_rename(back(d_cond[0].astype(fp.dtype)), scene))
    return {"loss_ic": loss_ic, "grads_ic": _rename(g_ic, scene),
            "loss_dm": loss_dm, "grads_dm": g_dm}


def combine_grads(terms: dict, lam_ic: float, lam_dm: float) -> dict:
    """lam_ic * grads_ic + lam_dm * grads_dm over the union of keys."""
    out = {}
    for lam, grads in ((lam_ic, terms["grads_ic"]), (lam_dm, terms["grads_dm"])):
        if lam == 0:
            continue
        for k, g in grads.items():
            out[k] = out[k] + lam * g if k in out else lam * g
    return out


def train_joint(fields, den, scenes, lam_ic: float = 1.0, lam_dm: float = 1.0,
                cfg: JointConfig = JointConfig()) -> JointResult:
    """Jointly optimize per-scene fields (shared MLP) and the denoiser.

    Step k visits scene ``k mod len(scenes)``. Ray batches and render jitter
    draw from the same seeded streams as :func:`fit_scene`, so with
    ``lam_dm = 0`` and a single scene the reconstruction losses coincide.
    The denoising target is a random non-input view of the scene; its
    conditioning is the field's render from that camera.
    """
    from .diffusion import draw_noise

    if isinstance(fields, FieldParams):
        fields = [fields]
    if len(fields) != len(scenes) or not scenes:
        raise ValueError("need one field per scene and at least one scene")
    for ds in scenes:
        if len(ds.cameras) < 2:
            raise ValueError(f"scene {ds.scene_id!r} has fewer than two views")
    shared = {k: v.copy() for k, v in fields[0].mlp.items()}
    fields = [replace_mlp(fp.copy(), shared) for fp in fields]
    den = den.copy()
    pools = [RayPool(ds.cameras, ds.images, fp.near, fp.far) for fp, ds in zip(fields, scenes)]
    rng_batch = np.random.default_rng([cfg.seed, 0])
    rng_render = np.random.default_rng([cfg.seed, 1])
    rng_dm = np.random.default_rng([cfg.seed, 2])
    opt = Adam(joint_parameters(fields, den), cfg.lrs, clip_norm=cfg.clip_norm,
               group_of=_joint_group)
    rows = []
    for it in range(cfg.iterations):
        s = it % len(scenes)
        fp, ds, pool = fields[s], scenes[s], pools[s]
        rays, target = pool.batch(rng_batch.integers(0, len(pool), cfg.batch_rays))
        others = [j for j in range(len(ds.cameras)) if j != ds.input_index]
        j = others[int(rng_dm.integers(0, len(others)))]
        t, eps = draw_noise(rng_dm, 1, np.shape(ds.images[j]))
        cond_seed = int(rng_dm.integers(0, 2 ** 31))
        terms = joint_terms(fp, den, s, rays, target, ds.cameras[j], ds.images[j], t[0], eps[0],
                            cfg.render, rng_render, cond_seed)
        total = lam_ic * terms["loss_ic"] + lam_dm * terms["loss_dm"]
        if not np.isfinite(total):
            raise FloatingPointError(f"joint loss became non-finite at step {it}")
        rows.append((it, terms["loss_ic"], terms["loss_dm"], total))
        opt.step(combine_grads(terms, lam_ic, lam_dm))
    return JointResult(fields, den, rows)


def replace_mlp(fp: FieldParams, mlp: dict) -> FieldParams:
    """``fp`` with its MLP dict swapped for ``mlp`` (shared, not copied)."""
    fp.mlp = mlp
    return fp
