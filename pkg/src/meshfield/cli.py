"""Command-line entry point: ``meshfield <command> ...``.

Failures print one line ``error: <kind>: <message>`` to stderr and exit
non-zero with a code per kind.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as dataio
from . import geometry
from .config import ConfigError, RunConfig, load_config
from .container import ContainerError
from .field import EncodingConfig, RadianceField, load_checkpoint, save_checkpoint
from .head import FaceParams, ParameterShapeError, deform, load_assets
from .metrics import psnr, ssim
from .render import Camera, RenderSettings, render_image
from .retarget import render_retargeted
from .training import init_state, train_step

log = logging.getLogger("meshfield")

EXIT_CODES = {
    "internal": 1,
    "missing-file": 3,
    "missing-checkpoint": 4,
    "malformed-config": 5,
    "asset-mismatch": 6,
    "malformed-file": 7,
}


class CliError(Exception):
    def __init__(self, kind, message):
        super().__init__(message)
        self.kind = kind


class AssetMismatchError(ValueError):
    pass


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _on_off(value):
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on|off")
    return value == "on"


# ---------------------------------------------------------------------------
# checkpoint bundle

def write_bundle(path, field, params: FaceParams, assets_path, cfg: RunConfig, iteration, size):
    meta = {
        "iteration": iteration,
        "face_params": params.to_dict(),
        "assets_path": str(Path(assets_path).resolve()),
        "assets_sha256": _sha256(assets_path),
        "render": cfg.to_dict()["render"],
        "image_size": list(size),
    }
    save_checkpoint(path, field, meta)


def read_bundle(path, assets_override=None):
    path = Path(path) if path else None
    if path is None or not path.exists():
        raise CliError("missing-checkpoint", f"checkpoint not found: {path}")
    field, meta, _ = load_checkpoint(path)
    assets_path = Path(assets_override or meta["assets_path"])
    if not assets_path.exists():
        raise CliError("missing-file", f"head assets not found: {assets_path}")
    if _sha256(assets_path) != meta["assets_sha256"]:
        raise AssetMismatchError(f"{assets_path} is not the asset file {path.name} was trained with")
    assets = load_assets(assets_path)
    params = FaceParams.from_dict(meta["face_params"])
    try:
        params.check(assets)
    except ParameterShapeError as exc:
        raise AssetMismatchError(str(exc)) from None
    render = dict(meta["render"])
    if render.get("background") is not None:
        render["background"] = tuple(render["background"])
    settings = RenderSettings(**render)
    return field, assets, params, settings, meta


def _camera_from_json(path, default_size):
    path = Path(path)
    if not path.exists():
        raise CliError("missing-file", f"camera file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    w = int(doc.get("w", default_size[0]))
    h = int(doc.get("h", default_size[1]))
    return Camera.from_fov(w, h, float(doc.get("camera_angle_x", dataio.SCENE_FOV)),
                           np.asarray(doc["transform_matrix"], dtype=float))


def _front_camera(size):
    return Camera.from_fov(size[0], size[1], dataio.SCENE_FOV,
                           dataio.look_at((0.0, 0.0, dataio.SCENE_RADIUS)))


def _save_frame(out_dir, name, img, save_float):
    dataio.write_png(out_dir / f"{name}.png", img)
    if save_float:
        np.save(out_dir / f"{name}.npy", img)


# ---------------------------------------------------------------------------
# commands

def cmd_make_synthetic(args, cfg):
    out = Path(args.out or cfg.out or "scene")
    t0 = time.time()
    gt = dataio.make_synthetic(out, n_views=args.views, n_test=args.test_views, seed=args.seed,
                               size=args.size, eps=args.eps, samples=args.samples or 512,
                               n_subdiv=args.subdiv)
    print(f"wrote {args.views}+{args.test_views} views of {args.size}x{args.size} to {out} "
          f"in {time.time() - t0:.1f}s; psi*={gt['params']['psi']}")


def cmd_train(args, cfg):
    data_dir = Path(args.data or cfg.data or "")
    out = Path(args.out or cfg.out or "run")
    manifest = dataio.load_manifest(data_dir / "transforms_train.json")
    dataset = dataio.load_dataset(manifest)
    assets_path = data_dir / dataio.ASSET_FILE
    if not assets_path.exists():
        raise CliError("missing-file", f"head assets not found: {assets_path}")
    assets = load_assets(assets_path)
    tc = cfg.train
    net = cfg.network
    dtype = np.float32 if net.dtype == "float32" else np.float64
    field = RadianceField.create(EncodingConfig(net.num_frequencies), tc.eps0, hidden=net.hidden,
                                 depth=net.depth, skip=net.skip, seed=tc.seed, dtype=dtype)
    state = init_state(field, assets.zero_params(), assets, tc)
    settings = cfg.render
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "report").mkdir(exist_ok=True)
    (out / "config.json").write_text(cfg.dumps())
    size = dataset.image_size
    n_face = len(state.params.flat())
    rows = []
    with open(out / "train_log.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss", "eps", "phase"] + [f"face_{k}" for k in range(n_face)])
        t0 = time.time()
        while state.iteration < tc.total_iters:
            state, entry = train_step(state, assets, dataset, tc, settings)
            writer.writerow([entry.iteration, repr(entry.loss), repr(entry.eps), entry.phase]
                            + [repr(float(v)) for v in entry.face])
            rows.append({"iteration": entry.iteration, "loss": entry.loss, "eps": entry.eps,
                         **{f"face_{k}": float(v) for k, v in enumerate(entry.face)}})
            if entry.iteration % cfg.log_every == 0:
                log.info("iter %d loss %.6f eps %.4f phase %s (%.1fs)", entry.iteration, entry.loss,
                         entry.eps, entry.phase, time.time() - t0)
            if entry.iteration % cfg.checkpoint_every == 0:
                write_bundle(out / "checkpoints" / f"iter_{entry.iteration:06d}.ckpt", state.field,
                             state.params, assets_path, cfg, entry.iteration, size)
    write_bundle(out / "model.ckpt", state.field, state.params, assets_path, cfg, state.iteration, size)
    truth = None
    gt_path = data_dir / dataio.GT_FILE
    if gt_path.exists():
        truth = dataio.load_gt_params(gt_path).flat()
    if rows:
        from .plotting import plot_training

        plot_training(rows, out / "report" / "training.png", tc.phase_switch_iter, truth)
    print(f"trained {state.iteration} iterations; face params {np.round(state.params.flat(), 4).tolist()}")


def cmd_render(args, cfg):
    field, assets, params, settings, meta = read_bundle(args.checkpoint, args.assets)
    settings = replace(settings, samples_per_ray=cfg.eval_samples, stratified=False)
    size = tuple(meta["image_size"]) if args.size is None else (args.size, args.size)
    out = Path(args.out or cfg.out or "renders")
    out.mkdir(parents=True, exist_ok=True)
    if args.camera:
        cams = [_camera_from_json(args.camera, size)]
    else:
        cams = [Camera.from_fov(size[0], size[1], dataio.SCENE_FOV, m)
                for m in dataio.orbit_poses(args.orbit, dataio.SCENE_RADIUS)]
    mesh = deform(assets, params)
    bvh = geometry.build_bvh(mesh)
    for k, cam in enumerate(cams):
        img = render_image(field, mesh, cam, settings, bvh=bvh)
        _save_frame(out, f"view_{k:03d}", img, args.save_float)
    print(f"rendered {len(cams)} views to {out}")


def _keyframes(path, trained: FaceParams):
    path = Path(path)
    if not path.exists():
        raise CliError("missing-file", f"keyframes file not found: {path}")
    try:
        doc = json.loads(path.read_text())
        frames = doc["keyframes"] if isinstance(doc, dict) else doc
        out = []
        for fr in frames:
            base = trained.to_dict()
            base.update({k: fr[k] for k in ("beta", "psi", "phi") if k in fr})
            out.append(FaceParams.from_dict(base))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: malformed keyframes ({exc})") from None
    camera = doc.get("camera") if isinstance(doc, dict) else None
    return out, camera


def cmd_animate(args, cfg):
    field, assets, params, settings, meta = read_bundle(args.checkpoint, args.assets)
    settings = replace(settings, samples_per_ray=cfg.eval_samples, stratified=False)
    size = tuple(meta["image_size"]) if args.size is None else (args.size, args.size)
    frames, cam_doc = _keyframes(args.keyframes, params)
    if args.camera:
        cam = _camera_from_json(args.camera, size)
    elif cam_doc:
        cam = Camera.from_fov(int(cam_doc.get("w", size[0])), int(cam_doc.get("h", size[1])),
                              float(cam_doc.get("camera_angle_x", dataio.SCENE_FOV)),
                              np.asarray(cam_doc["transform_matrix"], dtype=float))
    else:
        cam = _front_camera(size)
    out = Path(args.out or cfg.out or "frames")
    out.mkdir(parents=True, exist_ok=True)
    for k, fp in enumerate(frames):
        try:
            fp.check(assets)
        except ParameterShapeError as exc:
            raise AssetMismatchError(f"keyframe {k}: {exc}") from None
        img = render_retargeted(field, assets, params, fp, cam, settings,
                                density=cfg.retarget_density, mouth_filter=cfg.mouth_filter)
        _save_frame(out, f"frame_{k:04d}", img, args.save_float)
    print(f"rendered {len(frames)} frames to {out}")


def cmd_eval(args, cfg):
    field, assets, params, settings, _ = read_bundle(args.checkpoint, args.assets)
    settings = replace(settings, samples_per_ray=cfg.eval_samples, stratified=False)
    manifest = dataio.load_manifest(args.manifest)
    dataset = dataio.load_dataset(manifest)
    out = Path(args.out or cfg.out or "eval")
    (out / "report").mkdir(parents=True, exist_ok=True)
    mesh = deform(assets, params)
    bvh = geometry.build_bvh(mesh)
    bg = settings.background
    rows, grid = [], []
    for k, cam in enumerate(dataset.cameras):
        img = render_image(field, mesh, cam, settings, bvh=bvh)
        target = dataset.images[k]
        rows.append({"view": Path(manifest.frames[k][0]).stem, "psnr": psnr(img, target, bg),
                     "ssim": ssim(img, target, bg)})
        if len(grid) < 4:
            grid.append([target, img])
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["view", "psnr", "ssim"])
        for r in rows:
            writer.writerow([r["view"], f"{r['psnr']:.4f}", f"{r['ssim']:.6f}"])
        mean_psnr = float(np.mean([r["psnr"] for r in rows]))
        mean_ssim = float(np.mean([r["ssim"] for r in rows]))
        writer.writerow(["mean", f"{mean_psnr:.4f}", f"{mean_ssim:.6f}"])
    from .plotting import image_grid, plot_metrics

    plot_metrics(rows, out / "report" / "metrics.png")
    image_grid(grid, out / "report" / "comparison.png", titles=["target", "render"], background=bg)
    print(f"PSNR {mean_psnr:.2f} dB  SSIM {mean_ssim:.4f} over {len(rows)} views")


def cmd_export_mesh(args, cfg):
    _, assets, params, _, _ = read_bundle(args.checkpoint, args.assets)
    out = Path(args.out or cfg.out or "mesh.obj")
    if out.suffix != ".obj":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "mesh.obj"
    deform(assets, params).write_obj(out)
    print(f"wrote {out}")


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--mouth-filter", type=_on_off, metavar="on|off")
    common.add_argument("--retarget-density", choices=["analytic", "learned"])
    common.add_argument("--iters", type=int)
    common.add_argument("--eps0", type=float)
    common.add_argument("--eps-final", type=float)
    common.add_argument("--phase-switch", type=int)
    common.add_argument("--batch", type=int, help="rays per batch")
    common.add_argument("--samples", type=int, help="samples per ray")
    common.add_argument("--eval-samples", type=int)
    common.add_argument("--checkpoint-every", type=int)
    common.add_argument("--log-every", type=int)
    common.add_argument("--assets", help="override the head asset file recorded in a checkpoint")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="meshfield", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-synthetic", parents=[common], help="generate a toy-head scene")
    s.add_argument("--views", type=int, default=100)
    s.add_argument("--test-views", type=int, default=20)
    s.add_argument("--size", type=int, default=200)
    s.add_argument("--eps", type=float, default=0.02, help="shell width of the ground-truth render")
    s.add_argument("--subdiv", type=int, default=3)
    s.set_defaults(func=cmd_make_synthetic)

    s = sub.add_parser("train", parents=[common], help="fit field and face parameters")
    s.add_argument("--data", help="scene directory with transforms_train.json")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", parents=[common], help="novel views from a checkpoint")
    s.add_argument("checkpoint", nargs="?")
    s.add_argument("--camera", help="JSON with transform_matrix [, camera_angle_x, w, h]")
    s.add_argument("--orbit", type=int, default=8)
    s.add_argument("--size", type=int)
    s.add_argument("--save-float", action="store_true", help="also write float .npy frames")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("animate", parents=[common], help="re-posed renders from keyframes")
    s.add_argument("checkpoint", nargs="?")
    s.add_argument("keyframes")
    s.add_argument("--camera")
    s.add_argument("--size", type=int)
    s.add_argument("--save-float", action="store_true")
    s.set_defaults(func=cmd_animate)

    s = sub.add_parser("eval", parents=[common], help="PSNR/SSIM table against a manifest")
    s.add_argument("checkpoint", nargs="?")
    s.add_argument("manifest")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("export-mesh", parents=[common], help="write the fitted mesh as OBJ")
    s.add_argument("checkpoint", nargs="?")
    s.set_defaults(func=cmd_export_mesh)
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    t = cfg.train
    overrides = {"total_iters": args.iters, "eps0": args.eps0, "eps_final": args.eps_final,
                 "phase_switch_iter": args.phase_switch, "seed": args.seed, "rays_per_batch": args.batch}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if args.iters is not None and args.phase_switch is None and t.phase_switch_iter > args.iters:
        overrides["phase_switch_iter"] = args.iters
    try:
        cfg.train = replace(t, **overrides)
        if args.samples is not None:
            cfg.render = replace(cfg.render, samples_per_ray=args.samples)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if args.seed is not None:
        cfg.render = replace(cfg.render, seed=args.seed)
    if args.eval_samples is not None:
        cfg.eval_samples = args.eval_samples
    if args.checkpoint_every is not None:
        cfg.checkpoint_every = args.checkpoint_every
    if args.log_every is not None:
        cfg.log_every = args.log_every
    if args.mouth_filter is not None:
        cfg.mouth_filter = args.mouth_filter
    if args.retarget_density is not None:
        cfg.retarget_density = args.retarget_density
    cfg.validate()
    return cfg


def _apply_thread_cap():
    cap = os.environ.get("MESHFIELD_THREADS")
    if not cap:
        return
    import numba

    numba.set_num_threads(max(1, min(int(cap), numba.config.NUMBA_NUM_THREADS)))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "make-synthetic" and args.seed is None:
        args.seed = 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        _apply_thread_cap()
        cfg = resolve_config(args)
        args.func(args, cfg)
    except CliError as exc:
        return _fail(exc.kind, str(exc))
    except AssetMismatchError as exc:
        return _fail("asset-mismatch", str(exc))
    except (ConfigError, dataio.ManifestError) as exc:
        return _fail("malformed-config", str(exc))
    except ContainerError as exc:
        return _fail("malformed-file", str(exc))
    except FileNotFoundError as exc:
        return _fail("missing-file", str(exc))
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled error", exc_info=True)
        return _fail("internal", f"{type(exc).__name__}: {exc}")
    return 0


def _fail(kind, message) -> int:
    print(f"error: {kind}: {' '.join(str(message).split())}", file=sys.stderr)
    return EXIT_CODES[kind]


if __name__ == "__main__":
    sys.exit(main())
