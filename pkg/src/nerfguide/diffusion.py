"""Cosine-schedule diffusion: noising, parameterization changes, DDIM,
closed-form Gaussian-mixture score oracles and a tiny trainable denoiser.

Notation: Z_t = alpha_t x0 + sigma_t eps with alpha = cos(pi t / 2),
sigma = sin(pi t / 2); the velocity is v = alpha eps - sigma x0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import tensorio
from .optimize import Adam


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str = "cosine"

    def __post_init__(self):
        if self.kind != "cosine":
            raise ValueError(f"unsupported schedule {self.kind!r}")

    def alpha_sigma(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(~np.isfinite(t)) or np.any(t < 0) or np.any(t > 1):
            raise ValueError(f"diffusion time must lie in [0, 1], got {t}")
        a = np.cos(0.5 * np.pi * t)
        s = np.sin(0.5 * np.pi * t)
        # cos(pi/2) is 6e-17 in floating point; make the endpoint exact
        a = np.where(t == 1, 0.0, a)
        if a.ndim == 0:
            return float(a), float(s)
        return a, s


COSINE = NoiseSchedule()


def alpha_sigma(sched: NoiseSchedule, t):
    return sched.alpha_sigma(t)


def _same_shape(*arrays):
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def add_noise(image, eps, sched: NoiseSchedule, t):
    _same_shape(image, eps)
    a, s = sched.alpha_sigma(t)
    return a * np.asarray(image) + s * np.asarray(eps)


def velocity(image, eps, sched: NoiseSchedule, t):
    """v = alpha eps - sigma x0."""
    a, s = sched.alpha_sigma(t)
    return a * np.asarray(eps) - s * np.asarray(image)


def velocity_convert(value, kind: str, z, sched: NoiseSchedule, t) -> dict:
    """Given one of v / eps / x0 at state ``z``, return all three."""
    a, s = sched.alpha_sigma(t)
    value = np.asarray(value)
    z = np.asarray(z)
    _same_shape(value, z)
    if kind == "v":
        v = value
    elif kind == "eps":
        if a == 0:
            raise ValueError("eps does not determine v at alpha = 0")
        v = (value - s * z) / a
    elif kind == "x0":
        if s == 0:
            raise ValueError("x0 does not determine v at sigma = 0")
        v = (a * z - value) / s
    else:
        raise ValueError(f"unknown parameterization {kind!r}")
    out = {"v": v, "eps": a * v + s * z, "x0": a * z - s * v}
    out[kind] = value
    return out


def predict_x0(z, eps_hat, sched: NoiseSchedule, t):
    """I_t = (Z_t - sigma eps) / alpha."""
    _same_shape(z, eps_hat)
    a, s = sched.alpha_sigma(t)
    if a <= 0:
        raise ValueError("predict_x0 is undefined at t = 1 (alpha = 0)")
    return (np.asarray(z) - s * np.asarray(eps_hat)) / a


def ddim_step(z, eps_hat, sched: NoiseSchedule, t, t_next, x0=None):
    """Deterministic DDIM update Z_t -> Z_{t_next}.

    ``x0`` may be supplied by models that predict it directly, which is what
    makes the step well defined at t = 1.
    """
    if not 0 <= t_next <= t <= 1:
        raise ValueError(f"ddim_step needs 0 <= t_next <= t <= 1, got t={t}, t_next={t_next}")
    if x0 is None:
        x0 = predict_x0(z, eps_hat, sched, t)
    a, s = sched.alpha_sigma(t_next)
    return a * x0 + s * np.asarray(eps_hat)


def time_grid(steps: int) -> np.ndarray:
    if steps < 1:
        raise ValueError("need at least one sampling step")
    return np.linspace(1.0, 0.0, steps + 1)


class ScoreModel:
    """Noise predictor interface. Subclasses implement :meth:`eps`; models that
    can also predict x0 at alpha = 0 override :meth:`denoise`."""

    sched: NoiseSchedule = COSINE

    def eps(self, z, t, cond=None):
        raise NotImplementedError

    def denoise(self, z, t, cond=None):
        """(eps_hat, x0_hat) at state ``z``."""
        e = self.eps(z, t, cond)
        return e, predict_x0(z, e, self.sched, t)


def ddim_sample(model: ScoreModel, cond, shape, steps: int = 64, seed=0, z=None):
    """Run DDIM from Z_1 ~ N(0, I) (drawn from ``seed``) down to t = 0."""
    ts = time_grid(steps)
    if z is None:
        z = np.random.default_rng(seed).standard_normal(shape)
    for t, t_next in zip(ts[:-1], ts[1:]):
        e, x0 = model.denoise(z, t, cond)
        z = ddim_step(z, e, model.sched, t, t_next, x0)
    return z


class GaussianMixtureOracle(ScoreModel):
    """Exact noise predictor for data ~ sum_i w_i N(mu_i, s^2 I)."""

    def __init__(self, weights, means, s: float = 0.0, sched: NoiseSchedule = COSINE):
        w = np.asarray(weights, dtype=np.float64)
        mu = np.asarray(means, dtype=np.float64)
        if w.ndim != 1 or w.size != mu.shape[0] or np.any(w <= 0):
            raise ValueError("need one positive weight per mean image")
        if s < 0:
            raise ValueError("component std must be non-negative")
        self.weights = w / w.sum()
        self.means = mu
        self.s = float(s)
        self.sched = sched

    @classmethod
    def single(cls, mean, s: float = 0.0, sched: NoiseSchedule = COSINE):
        return cls([1.0], np.asarray(mean)[None], s, sched)

    @classmethod
    def from_json(cls, path) -> "GaussianMixtureOracle":
        """``{"weights": [...], "means": [float image paths], "s": float}``."""
        p = Path(path)
        spec = json.loads(p.read_text())
        means = [tensorio.load_float_image(p.parent / m).astype(np.float64)
                 for m in spec["means"]]
        return cls(spec["weights"], np.stack(means), spec.get("s", 0.0))

    def _parts(self, z, t):
        a, s = self.sched.alpha_sigma(t)
        var = a * a * self.s ** 2 + s * s
        if var <= 0:
            raise ValueError("mixture oracle is degenerate at t = 0 with s = 0")
        z = np.asarray(z, dtype=np.float64)
        if z.shape != self.means.shape[1:]:
            raise ValueError(f"state shape {z.shape} does not match means {self.means.shape[1:]}")
        axes = tuple(range(1, self.means.ndim))
        d2 = np.sum((z - a * self.means) ** 2, axis=axes)
        logits = np.log(self.weights) - d2 / (2 * var)
        r = np.exp(logits - logsumexp(logits))
        mbar = np.tensordot(r, self.means, axes=1)
        return a, s, var, mbar

    def eps(self, z, t, cond=None):
        a, s, var, mbar = self._parts(z, t)
        return s * (np.asarray(z) - a * mbar) / var

    def denoise(self, z, t, cond=None):
        a, s, var, mbar = self._parts(z, t)
        z = np.asarray(z)
        return s * (z - a * mbar) / var, (a * self.s ** 2 * z + s * s * mbar) / var

    def log_density(self, z, t) -> float:
        """log p_t(z) of the noised mixture."""
        a, s = self.sched.alpha_sigma(t)
        var = a * a * self.s ** 2 + s * s
        z = np.asarray(z, dtype=np.float64)
        axes = tuple(range(1, self.means.ndim))
        d2 = np.sum((z - a * self.means) ** 2, axis=axes)
        dim = z.size
        return float(logsumexp(np.log(self.weights) - d2 / (2 * var))
                     - 0.5 * dim * np.log(2 * np.pi * var))


def gm_oracle_eps(oracle: GaussianMixtureOracle, z, t):
    if t <= 0:
        raise ValueError("gm_oracle_eps needs t in (0, 1]")
    return oracle.eps(z, t)


# ---------------------------------------------------------------- tiny denoiser

WINDOW = 3


def image_windows(img: np.ndarray) -> np.ndarray:
    """(..., H, W, C) -> (..., H, W, 9C) stacking each pixel's 3x3 neighbourhood
    (edge replicated), neighbour-major."""
    pad = [(0, 0)] * (img.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    p = np.pad(img, pad, mode="edge")
    h, w = img.shape[-3], img.shape[-2]
    parts = [p[..., i:i + h, j:j + w, :] for i in range(WINDOW) for j in range(WINDOW)]
    return np.concatenate(parts, axis=-1)


def image_windows_backward(g: np.ndarray, channels: int) -> np.ndarray:
    """Adjoint of :func:`image_windows`."""
    h, w = g.shape[-3], g.shape[-2]
    lead = g.shape[:-3]
    p = np.zeros(lead + (h + 2, w + 2, channels), dtype=g.dtype)
    k = 0
    for i in range(WINDOW):
        for j in range(WINDOW):
            p[..., i:i + h, j:j + w, :] += g[..., k * channels:(k + 1) * channels]
            k += 1
    # fold the replicated border back onto the edge pixels
    p[..., 1, :, :] += p[..., 0, :, :]
    p[..., h, :, :] += p[..., h + 1, :, :]
    p[..., :, 1, :] += p[..., :, 0, :]
    p[..., :, w, :] += p[..., :, w + 1, :]
    return p[..., 1:h + 1, 1:w + 1, :]


def time_embedding(t, num_freqs: int = 4) -> np.ndarray:
    """[alpha, sigma, sin(2^k pi t), cos(2^k pi t)] for each t."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    a, s = COSINE.alpha_sigma(t)
    f = (2.0 ** np.arange(num_freqs)) * np.pi * t[:, None]
    return np.concatenate([a[:, None], s[:, None], np.sin(f), np.cos(f)], axis=1)


class TinyDenoiser(ScoreModel):
    """Per-pixel MLP over 3x3 windows of the noisy image (and the conditioning
    image when ``conditional``) plus a time embedding; predicts v."""

    def __init__(self, params: dict, conditional: bool = True, num_freqs: int = 4,
                 channels: int = 3, sched: NoiseSchedule = COSINE):
        self.params = params
        self.conditional = conditional
        self.num_freqs = num_freqs
        self.channels = channels
        self.sched = sched

    @classmethod
    def create(cls, seed=0, conditional=True, hidden=64, num_freqs=4, channels=3):
        rng = np.random.default_rng(seed)
        d_in = WINDOW * WINDOW * channels * (2 if conditional else 1) + 2 + 2 * num_freqs
        dims = [d_in, hidden, hidden, channels]
        params = {}
        for k in range(3):
            scale = np.sqrt(2.0 / dims[k]) if k < 2 else np.sqrt(1.0 / dims[k])
            params[f"W{k + 1}"] = rng.normal(0, scale, (dims[k], dims[k + 1]))
            params[f"b{k + 1}"] = np.zeros(dims[k + 1])
        return cls(params, conditional, num_freqs, channels)

    def copy(self) -> "TinyDenoiser":
        return TinyDenoiser({k: v.copy() for k, v in self.params.items()}, self.conditional,
                            self.num_freqs, self.channels, self.sched)

    def config(self) -> dict:
        return {"conditional": self.conditional, "num_freqs": self.num_freqs,
                "channels": self.channels, "hidden": int(self.params["W1"].shape[1])}

    def _inputs(self, z, t, cond):
        z = np.asarray(z, dtype=np.float64)
        batched = z.ndim == 4
        zb = z if batched else z[None]
        b, h, w, _ = zb.shape
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        parts = [image_windows(zb)]
        if self.conditional:
            if cond is None:
                raise ValueError("conditional denoiser needs a conditioning image")
            cb = np.asarray(cond, dtype=np.float64)
            cb = np.broadcast_to(cb if cb.ndim == 4 else cb[None], zb.shape)
            parts.append(image_windows(cb))
        emb = time_embedding(t, self.num_freqs)
        parts.append(np.broadcast_to(emb[:, None, None, :], (b, h, w, emb.shape[1])))
        return np.concatenate(parts, axis=-1), batched, t

    def forward(self, z, t, cond=None):
        """v-prediction plus the activations needed by :meth:`backward`."""
        x, batched, tb = self._inputs(z, t, cond)
        p = self.params
        h1 = np.maximum(x @ p["W1"] + p["b1"], 0)
        h2 = np.maximum(h1 @ p["W2"] + p["b2"], 0)
        v = h2 @ p["W3"] + p["b3"]
        return v if batched else v[0], (x, h1, h2, batched, tb)

    def backward(self, cache, d_v):
        """Parameter grads and the gradient w.r.t. the conditioning image."""
        x, h1, h2, batched, _ = cache
        g = np.asarray(d_v) if batched else np.asarray(d_v)[None]
        p = self.params
        flat = lambda a: a.reshape(-1, a.shape[-1])
        grads = {"W3": flat(h2).T @ flat(g), "b3": flat(g).sum(0)}
        g2 = (g @ p["W3"].T) * (h2 > 0)
        grads["W2"] = flat(h1).T @ flat(g2)
        grads["b2"] = flat(g2).sum(0)
        g1 = (g2 @ p["W2"].T) * (h1 > 0)
        grads["W1"] = flat(x).T @ flat(g1)
        grads["b1"] = flat(g1).sum(0)
        d_cond = None
        if self.conditional:
            n = WINDOW * WINDOW * self.channels
            gx = g1 @ p["W1"][n:2 * n].T
            d_cond = image_windows_backward(gx, self.channels)
            if not batched:
                d_cond = d_cond[0]
        return grads, d_cond

    def predict_v(self, z, t, cond=None):
        return self.forward(z, t, cond)[0]

    def eps(self, z, t, cond=None):
        return self.denoise(z, t, cond)[0]

    def denoise(self, z, t, cond=None):
        v = self.predict_v(z, t, cond)
        a, s = self.sched.alpha_sigma(t)
        return a * v + s * np.asarray(z), a * np.asarray(z) - s * v

    def save(self, path) -> None:
        tensorio.save_tensors(path, {f"den.{k}": v for k, v in self.params.items()})
        Path(str(path) + ".json").write_text(json.dumps(self.config()))

    @classmethod
    def load(cls, path) -> "TinyDenoiser":
        cfg = json.loads(Path(str(path) + ".json").read_text())
        t = tensorio.load_tensors(path)
        params = {k[4:]: v.astype(np.float64) for k, v in t.items()}
        return cls(params, cfg["conditional"], cfg["num_freqs"], cfg["channels"])


def v_loss(den: TinyDenoiser, cond, target, t, eps):
    """Mean squared v error for batched (cond, target) at times ``t``; returns
    (loss, forward cache, d loss / d v_hat)."""
    target = np.asarray(target, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    a, s = COSINE.alpha_sigma(t)
    a = np.reshape(a, (-1, 1, 1, 1))
    s = np.reshape(s, (-1, 1, 1, 1))
    z = a * target + s * eps
    v_true = a * eps - s * target
    v_hat, cache = den.forward(z, t, cond if den.conditional else None)
    diff = v_hat - v_true
    return float(np.mean(diff ** 2)), cache, 2 * diff / diff.size


@dataclass
class DenoiserTrainConfig:
    steps: int = 3000
    batch_images: int = 16
    lr: float = 1e-3
    seed: int = 0


@dataclass
class DenoiserTrainResult:
    model: TinyDenoiser
    losses: np.ndarray = field(default_factory=lambda: np.zeros(0))


def draw_noise(rng, n: int, shape):
    """Uniform t in (0, 1] and standard normal noise for ``n`` images."""
    t = 1.0 - rng.random(n)
    return t, rng.standard_normal((n,) + tuple(shape))


def denoiser_train(den: TinyDenoiser, conds, targets, cfg: DenoiserTrainConfig = DenoiserTrainConfig()
                   ) -> DenoiserTrainResult:
    """Adam on the v-prediction MSE over (conditioning, target) image pairs."""
    targets = np.asarray(targets, dtype=np.float64)
    conds = np.asarray(conds, dtype=np.float64)
    if targets.shape[0] == 0:
        raise ValueError("empty training set")
    den = den.copy()
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(den.params, cfg.lr, group_of=lambda k: "den")
    losses = np.empty(cfg.steps)
    for it in range(cfg.steps):
        pick = rng.integers(0, targets.shape[0], cfg.batch_images)
        t, eps = draw_noise(rng, cfg.batch_images, targets.shape[1:])
        loss, cache, d_v = v_loss(den, conds[pick], targets[pick], t, eps)
        if not np.isfinite(loss):
            raise FloatingPointError(f"denoiser loss became non-finite at step {it}")
        losses[it] = loss
        grads, _ = den.backward(cache, d_v)
        opt.step(grads)
    return DenoiserTrainResult(den, losses)


def heldout_v_loss(den: TinyDenoiser, conds, targets, seed: int = 0, repeats: int = 4):
    """Seeded held-out v-loss and the zero-predictor loss on the same draws."""
    targets = np.asarray(targets, dtype=np.float64)
    rng = np.random.default_rng(seed)
    total = zero = 0.0
    for _ in range(repeats):
        t, eps = draw_noise(rng, targets.shape[0], targets.shape[1:])
        loss, _, _ = v_loss(den, conds, targets, t, eps)
        a, s = COSINE.alpha_sigma(t)
        v = a[:, None, None, None] * eps - s[:, None, None, None] * targets
        total += loss
        zero += float(np.mean(v ** 2))
    return total / repeats, zero / repeats
