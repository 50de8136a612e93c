"""Image metrics, run configuration and the ``nerfguide`` command line.

Metrics
    psnr: 10 log10(1 / MSE) for images in [0, 1]; identical images give +inf.
    ssim: mean of the windowed SSIM map over the valid region, computed on
    luma (0.299 R + 0.587 G + 0.114 B) with an 11x11 Gaussian window of
    std 1.5, K1 = 0.01, K2 = 0.03 and dynamic range L = 1.

Configuration
    A run is described by a JSON file of sections (see ``DEFAULTS``). Any
    key can be overridden with ``--set section.key=value`` where ``value``
    is parsed as JSON when possible and kept as a string otherwise.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import sys
from pathlib import Path

import numpy as np
from scipy.signal import correlate2d
from threadpoolctl import threadpool_limits

from . import diffusion, field, ngd, optimize, renderer, scenes, tensorio
from .geometry import Camera

LUMA = np.array([0.299, 0.587, 0.114])
SSIM_SIGMA = 1.5


# ---------------------------------------------------------------- metrics

def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    return float("inf") if mse == 0 else float(10 * np.log10(1.0 / mse))


def to_luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[-1] == 3:
        return img @ LUMA
    if img.ndim == 3 and img.shape[-1] == 1:
        return img[..., 0]
    if img.ndim == 2:
        return img
    raise ValueError(f"expected (H, W), (H, W, 1) or (H, W, 3), got {img.shape}")


def gaussian_window(size: int = 11, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(a, b, window: int = 11, K1: float = 0.01, K2: float = 0.03,
             data_range: float = 1.0) -> np.ndarray:
    a, b = _pair(a, b)
    x, y = to_luma(a), to_luma(b)
    if x.shape[0] < window or x.shape[1] < window:
        raise ValueError(f"image {x.shape} is smaller than the {window}x{window} window")
    w = gaussian_window(window)
    filt = lambda img: correlate2d(img, w, mode="valid")
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(a, b, window: int = 11, K1: float = 0.01, K2: float = 0.03) -> float:
    return float(np.mean(ssim_map(a, b, window, K1, K2)))


def cross_view_consistency(renders, cameras, truths, cfg: renderer.RenderConfig | None = None,
                           seed: int = 0) -> dict:
    """Per-view PSNR/SSIM against ``truths`` plus mean and min aggregates.

    ``renders`` is a list of images or a FieldParams rendered at ``cameras``.
    """
    if len(cameras) != len(truths):
        raise ValueError(f"{len(cameras)} cameras but {len(truths)} ground-truth images")
    if isinstance(renders, field.FieldParams):
        cfg = cfg or renderer.RenderConfig(64, 64, jitter=False)
        renders = [renderer.render_image(renders, c, cfg, seed=seed).rgb for c in cameras]
    if len(renders) != len(truths):
        raise ValueError(f"{len(renders)} renders but {len(truths)} ground-truth images")
    p = np.array([psnr(r, t) for r, t in zip(renders, truths)])
    s = np.array([ssim(r, t) for r, t in zip(renders, truths)])
    return {
        "psnr": p.tolist(),
        "ssim": s.tolist(),
        "mean_psnr": float(np.mean(p)),
        "min_psnr": float(np.min(p)),
        "min_psnr_index": int(np.argmin(p)),
        "mean_ssim": float(np.mean(s)),
        "min_ssim": float(np.min(s)),
    }


def write_metrics_csv(path, psnrs, ssims) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["view_index", "psnr_db", "ssim"])
        for i, (p, s) in enumerate(zip(psnrs, ssims)):
            w.writerow([i, repr(float(p)), repr(float(s))])


# ---------------------------------------------------------------- configuration

DEFAULTS = {
    "data": {"scene": None, "scenes": None, "root": None},
    "field": {"mode": "triplane", "channels": 48, "hidden": 64, "resolution": None,
              "checkpoint": None},
    "fit": {"iterations": 2000, "batch_rays": 4096, "n_coarse": 16, "n_fine": 16,
            "lr_mlp": 1e-4, "lr_triplane": 5e-2, "clip_norm": None, "views": "all"},
    "denoiser": {"steps": 3000, "batch_images": 16, "lr": 1e-3, "hidden": 64,
                 "conditional": True, "joint": False, "lambda_ic": 1.0, "lambda_dm": 1.0,
                 "joint_iterations": 200},
    "prior": {"kind": "spiral", "k": 8, "radius": 2.5, "turns": 4.0, "stride": 5},
    "model": {"kind": "truth", "path": None, "s": 0.0, "components": 4,
              "sigma_color": 0.1, "sigma_shift": 2.0, "truth_samples": 512},
    "ngd": {"gamma_mode": "snr", "gamma": 1.0, "steps": 64, "nerf_steps": 64,
            "batch_rays": 4096, "guide_coarse": 32, "guide_fine": 32, "train_coarse": 16,
            "train_fine": 16, "use_input": True, "prefit_iterations": 0, "iterations": None,
            "sds_t_min": 0.02, "sds_t_max": 0.98},
    "render": {"n_coarse": 64, "n_fine": 64, "jitter": False, "cameras": "dataset"},
    "eval": {"metrics": ["psnr", "ssim"]},
}

SUPPORTED_METRICS = ("psnr", "ssim")


class UsageError(Exception):
    """Bad invocation or configuration; reported with exit status 2."""


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    key, sep, value = assignment.partition("=")
    if not sep:
        raise UsageError(f"--set expects section.key=value, got {assignment!r}")
    section, dot, name = key.partition(".")
    if not dot or section not in cfg or name not in cfg[section]:
        raise UsageError(f"unknown configuration key {key!r}")
    cfg[section][name] = parse_value(value)


def load_config(path=None, overrides=()) -> dict:
    """Defaults, updated by the JSON file at ``path``, then by ``overrides``."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
        for section, values in user.items():
            if section not in cfg or not isinstance(values, dict):
                raise UsageError(f"unknown configuration section {section!r}")
            for k, v in values.items():
                if k not in cfg[section]:
                    raise UsageError(f"unknown configuration key {section}.{k}")
                cfg[section][k] = v
    for a in overrides:
        apply_override(cfg, a)
    return cfg


def _require_path(value, what: str) -> Path:
    if value is None:
        raise UsageError(f"{what} is not set")
    p = Path(value)
    if not p.exists():
        raise UsageError(f"{what} does not exist: {p}")
    return p


def validate(cfg: dict, command: str) -> None:
    """Check that every path the command will read exists."""
    d = cfg["data"]
    if command in ("fit", "ngd", "distill-direct", "distill-sds"):
        _require_path(d["scene"], "data.scene")
    if command == "train-denoiser":
        if d["scenes"] is None and d["root"] is None:
            raise UsageError("train-denoiser needs data.scenes or data.root")
        for s in d["scenes"] or []:
            _require_path(s, "data.scenes entry")
        if d["root"] is not None:
            _require_path(d["root"], "data.root")
    if cfg["field"]["checkpoint"] is not None:
        _require_path(cfg["field"]["checkpoint"], "field.checkpoint")
    if command in ("ngd", "distill-direct", "distill-sds"):
        m = cfg["model"]
        if m["kind"] not in ("truth", "perturbed", "mixture", "denoiser"):
            raise UsageError(f"unknown model.kind {m['kind']!r}")
        if m["kind"] in ("mixture", "denoiser"):
            _require_path(m["path"], "model.path")
    if command == "render" and cfg["render"]["cameras"] == "dataset":
        _require_path(d["scene"], "data.scene")


# ---------------------------------------------------------------- pipeline pieces

def _lrs(section: dict) -> dict:
    return {"mlp": float(section["lr_mlp"]), "triplane": float(section["lr_triplane"])}


def _initial_field(cfg: dict, ds: scenes.SceneDataset, seed: int) -> field.FieldParams:
    f = cfg["field"]
    if f["checkpoint"] is not None:
        return field.load_field(f["checkpoint"])
    cam = ds.input_camera
    return field.init_field(cam.intrinsics, ds.near, ds.far, seed, mode=f["mode"],
                            resolution=f["resolution"], channels=int(f["channels"]),
                            hidden=int(f["hidden"]), ref_pose=cam.pose)


def _fit_config(cfg: dict, seed: int, iterations=None) -> optimize.FitConfig:
    f = cfg["fit"]
    return optimize.FitConfig(iterations=int(f["iterations"] if iterations is None else iterations),
                              batch_rays=int(f["batch_rays"]), lrs=_lrs(f),
                              render=renderer.RenderConfig(int(f["n_coarse"]), int(f["n_fine"])),
                              seed=seed, clip_norm=f["clip_norm"])


def _virtual_cameras(cfg: dict, ds: scenes.SceneDataset) -> list[Camera]:
    p = cfg["prior"]
    intr = ds.input_camera.intrinsics
    k = int(p["k"])
    if p["kind"] == "spiral":
        return ngd.sample_prior_spiral(k, float(p["radius"]), intr, float(p["turns"]),
                                       int(p["stride"]))
    if p["kind"] == "circle":
        centers = np.array([c.pose.translation for c in ds.cameras])
        forwards = np.array([c.pose.forward for c in ds.cameras])
        origin = ngd.estimate_origin_from_axes(centers, forwards)
        up = ngd.estimate_up(centers, forwards)
        radius = float(np.linalg.norm(centers - origin, axis=1).mean())
        return ngd.sample_prior_circle(k, origin, up, radius, intr, plane_point=centers.mean(0))
    raise UsageError(f"unknown prior.kind {p['kind']!r}")


def _truth_images(cfg: dict, ds: scenes.SceneDataset, cams) -> list[np.ndarray] | None:
    if ds.scene is None:
        return None
    n = int(cfg["model"]["truth_samples"])
    return [scenes.render_ground_truth(ds.scene, c, ds.near, ds.far, n).rgb for c in cams]


def _score_models(cfg: dict, truths, seed: int):
    m = cfg["model"]
    kind = m["kind"]
    if kind in ("truth", "perturbed") and truths is None:
        raise ValueError(f"model.kind={kind!r} needs a dataset that records its analytic scene")
    if kind == "truth":
        return [diffusion.GaussianMixtureOracle.single(g, float(m["s"])) for g in truths]
    if kind == "perturbed":
        draws = [scenes.perturb_views(truths, seed * 1000 + c, float(m["sigma_color"]),
                                      float(m["sigma_shift"]))
                 for c in range(int(m["components"]))]
        return [diffusion.GaussianMixtureOracle(np.ones(len(draws)), [d[v] for d in draws],
                                                float(m["s"]))
                for v in range(len(truths))]
    if kind == "mixture":
        return diffusion.GaussianMixtureOracle.from_json(m["path"])
    return diffusion.TinyDenoiser.load(m["path"])


def _guidance_config(cfg: dict) -> ngd.GuidanceConfig:
    g = cfg["ngd"]
    if g["gamma_mode"] == "snr":
        gamma = "snr"
    elif g["gamma_mode"] == "constant":
        gamma = float(g["gamma"])
    else:
        raise UsageError(f"unknown ngd.gamma_mode {g['gamma_mode']!r}")
    return ngd.GuidanceConfig(
        gamma=gamma, steps=int(g["steps"]), nerf_steps=int(g["nerf_steps"]),
        batch_rays=int(g["batch_rays"]), lrs=_lrs(cfg["fit"]),
        guide_render=renderer.RenderConfig(int(g["guide_coarse"]), int(g["guide_fine"])),
        train_render=renderer.RenderConfig(int(g["train_coarse"]), int(g["train_fine"])),
        clip_norm=cfg["fit"]["clip_norm"])


def save_images(directory, images) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        tensorio.save_float_image(d / f"view_{i:03d}.f32", img)
        tensorio.save_ppm(d / f"view_{i:03d}.ppm", img)


def load_images(directory) -> list[np.ndarray]:
    d = Path(directory)
    if (d / "meta.json").is_file():
        return scenes.load_dataset(d).images
    files = sorted(d.glob("view_*.f32"))
    if not files:
        raise FileNotFoundError(f"no view_*.f32 images in {d}")
    return [tensorio.load_float_image(f).astype(np.float64) for f in files]


def render_cameras(fp, cams, cfg: dict, seed: int) -> list[np.ndarray]:
    rc = renderer.RenderConfig(int(cfg["render"]["n_coarse"]), int(cfg["render"]["n_fine"]),
                               jitter=bool(cfg["render"]["jitter"]))
    return [renderer.render_image(fp, c, rc, seed=[seed, i]).rgb.astype(np.float64)
            for i, c in enumerate(cams)]


def _write_outputs(out: Path, fp, cams, truths, cfg, seed, ds) -> None:
    field.save_field(fp, out / "field.nfd")
    renders = render_cameras(fp, cams, cfg, seed)
    save_images(out / "renders", renders)
    if truths is not None:
        tds = scenes.SceneDataset(f"{ds.scene_id}_virtual", list(cams), truths, ds.near, ds.far,
                                  0, "virtual", ds.scene)
        scenes.save_dataset(tds, out / "truth")
        m = cross_view_consistency(renders, cams, truths)
        write_metrics_csv(out / "metrics.csv", m["psnr"], m["ssim"])


# ---------------------------------------------------------------- commands

def cmd_gen_scenes(args, cfg) -> None:
    scenes.generate_dataset(args.out, args.seed, args.num, args.views, args.res, args.rig,
                            args.samples)


def cmd_fit(args, cfg) -> None:
    ds = scenes.load_dataset(cfg["data"]["scene"])
    fp = _initial_field(cfg, ds, args.seed)
    if cfg["fit"]["views"] == "input":
        cams, imgs = [ds.input_camera], [ds.images[ds.input_index]]
    elif cfg["fit"]["views"] == "all":
        cams, imgs = ds.cameras, ds.images
    else:
        raise UsageError("fit.views must be 'all' or 'input'")
    res = optimize.fit_scene(fp, cams, imgs, _fit_config(cfg, args.seed), ds.near, ds.far)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    field.save_field(res.params, out / "field.nfd")
    optimize.write_loss_csv(out / "losses.csv",
                            [(i, l, 0.0, l) for i, l in enumerate(res.losses)])


def _denoiser_datasets(cfg) -> list[scenes.SceneDataset]:
    d = cfg["data"]
    dirs = [Path(s) for s in d["scenes"] or []]
    if d["root"] is not None:
        dirs += sorted(p.parent for p in Path(d["root"]).glob("*/meta.json"))
    if not dirs:
        raise ValueError("no scenes found for denoiser training")
    return [scenes.load_dataset(p) for p in dirs]


def cmd_train_denoiser(args, cfg) -> None:
    dc = cfg["denoiser"]
    datasets = _denoiser_datasets(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    den = diffusion.TinyDenoiser.create(seed=[args.seed, 0], conditional=bool(dc["conditional"]),
                                        hidden=int(dc["hidden"]))
    if dc["joint"]:
        fields = [_initial_field(cfg, ds, args.seed) for ds in datasets]
        jc = optimize.JointConfig(
            iterations=int(dc["joint_iterations"]), batch_rays=int(cfg["fit"]["batch_rays"]),
            lrs={**_lrs(cfg["fit"]), "den": float(dc["lr"])},
            render=renderer.RenderConfig(int(cfg["fit"]["n_coarse"]), int(cfg["fit"]["n_fine"])),
            seed=args.seed, clip_norm=cfg["fit"]["clip_norm"])
        res = optimize.train_joint(fields, den, datasets, float(dc["lambda_ic"]),
                                   float(dc["lambda_dm"]), jc)
        res.denoiser.save(out / "denoiser.nfd")
        (out / "fields").mkdir(exist_ok=True)
        for ds, fp in zip(datasets, res.fields):
            field.save_field(fp, out / "fields" / f"{ds.scene_id}.nfd")
        optimize.write_loss_csv(out / "losses.csv", res.rows)
        return
    # paired mode: the clean target doubles as the conditioning rendering
    targets = np.stack([img for ds in datasets for img in ds.images])
    tc = diffusion.DenoiserTrainConfig(int(dc["steps"]), int(dc["batch_images"]),
                                       float(dc["lr"]), args.seed)
    res = diffusion.denoiser_train(den, targets, targets, tc)
    res.model.save(out / "denoiser.nfd")
    optimize.write_loss_csv(out / "losses.csv",
                            [(i, 0.0, l, l) for i, l in enumerate(res.losses)])


def _distill_setup(args, cfg):
    ds = scenes.load_dataset(cfg["data"]["scene"])
    fp = _initial_field(cfg, ds, args.seed)
    pre = int(cfg["ngd"]["prefit_iterations"])
    if pre > 0:
        fp = optimize.fit_scene(fp, [ds.input_camera], [ds.images[ds.input_index]],
                                _fit_config(cfg, args.seed, pre), ds.near, ds.far).params
    cams = _virtual_cameras(cfg, ds)
    truths = _truth_images(cfg, ds, cams)
    models = _score_models(cfg, truths, args.seed)
    inp = (ds.input_camera, ds.images[ds.input_index]) if cfg["ngd"]["use_input"] else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return ds, fp, cams, truths, models, inp, out


def cmd_ngd(args, cfg) -> None:
    ds, fp, cams, truths, models, inp, out = _distill_setup(args, cfg)
    res = ngd.ngd_finetune(fp, models, cams, _guidance_config(cfg), args.seed, inp)
    ngd.write_diagnostics(out / "diagnostics.csv", res.diagnostics)
    _write_outputs(out, res.params, cams, truths, cfg, args.seed, ds)


def cmd_distill_direct(args, cfg) -> None:
    ds, fp, cams, truths, models, inp, out = _distill_setup(args, cfg)
    it = cfg["ngd"]["iterations"]
    params, samples = ngd.direct_distill(fp, models, cams, _guidance_config(cfg), args.seed,
                                         None if it is None else int(it), inp)
    save_images(out / "samples", samples)
    _write_outputs(out, params, cams, truths, cfg, args.seed, ds)


def cmd_distill_sds(args, cfg) -> None:
    ds, fp, cams, truths, models, inp, out = _distill_setup(args, cfg)
    g = cfg["ngd"]
    it = g["iterations"]
    params = ngd.sds_finetune(fp, models, cams, _guidance_config(cfg), args.seed,
                              None if it is None else int(it),
                              (float(g["sds_t_min"]), float(g["sds_t_max"])), inp)
    _write_outputs(out, params, cams, truths, cfg, args.seed, ds)


def cmd_render(args, cfg) -> None:
    ckpt = args.field or cfg["field"]["checkpoint"]
    if ckpt is None:
        raise UsageError("render needs --field or field.checkpoint")
    _require_path(ckpt, "field checkpoint")
    fp = field.load_field(ckpt)
    if cfg["render"]["cameras"] == "dataset":
        cams = scenes.load_dataset(cfg["data"]["scene"]).cameras
    elif cfg["render"]["cameras"] == "prior":
        ds = scenes.SceneDataset("prior", [Camera(fp.intrinsics, fp.ref_pose)], [], fp.near,
                                 fp.far)
        cams = _virtual_cameras(cfg, ds)
    else:
        raise UsageError("render.cameras must be 'dataset' or 'prior'")
    save_images(args.out, render_cameras(fp, cams, cfg, args.seed))


def cmd_eval(args, cfg) -> None:
    for m in cfg["eval"]["metrics"]:
        if m not in SUPPORTED_METRICS:
            print(f"note: metric {m!r} is not available (needs a pretrained network); skipped",
                  file=sys.stderr)
    renders = load_images(_require_path(args.renders, "--renders"))
    truths = load_images(_require_path(args.truth, "--truth"))
    if len(renders) != len(truths):
        raise ValueError(f"{len(renders)} renders but {len(truths)} ground-truth views")
    p = [psnr(r, t) for r, t in zip(renders, truths)]
    s = [ssim(r, t) for r, t in zip(renders, truths)]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out, p, s)


COMMANDS = {
    "gen-scenes": (cmd_gen_scenes, "write random analytic scenes with ground-truth views"),
    "fit": (cmd_fit, "fit a field to the views of one scene"),
    "train-denoiser": (cmd_train_denoiser, "train the tiny conditional denoiser"),
    "ngd": (cmd_ngd, "guided finetuning of the field over virtual views"),
    "distill-direct": (cmd_distill_direct, "sample views unguided, then fit to them"),
    "distill-sds": (cmd_distill_sds, "score distillation baseline"),
    "render": (cmd_render, "render a field checkpoint"),
    "eval": (cmd_eval, "PSNR/SSIM of renders against ground truth"),
}
STOCHASTIC = {"gen-scenes", "fit", "train-denoiser", "ngd", "distill-direct", "distill-sds",
              "render"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nerfguide", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one configuration key (repeatable)")
        p.add_argument("--seed", type=int, required=name in STOCHASTIC)
        p.add_argument("--out", required=True, help="output directory (CSV path for eval)")
        p.add_argument("--threads", type=int, default=None,
                       help="cap BLAS threads; 1 gives the bit-reproducible path")
        if name == "gen-scenes":
            p.add_argument("--num", type=int, default=4)
            p.add_argument("--views", type=int, default=8)
            p.add_argument("--res", type=int, default=64)
            p.add_argument("--rig", choices=("spiral", "circle"), default="spiral")
            p.add_argument("--samples", type=int, default=512)
        if name == "render":
            p.add_argument("--field", help="field checkpoint to render")
        if name == "eval":
            p.add_argument("--renders", required=True)
            p.add_argument("--truth", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        cfg = load_config(args.config, args.set)
        validate(cfg, args.command)
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        fn = COMMANDS[args.command][0]
        if args.threads is None:
            fn(args, cfg)
        else:
            with threadpool_limits(limits=args.threads):
                fn(args, cfg)
    except UsageError as exc:
        sub.print_usage(sys.stderr)
        print(f"nerfguide {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report any failure as one line
        print(f"nerfguide {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
