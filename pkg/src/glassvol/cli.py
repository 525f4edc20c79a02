"""Command-line entry point exposing every workflow: render, relight,
envrelight, lens, register, train, fit, gradcheck, synth, eval.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure. Each
run writes a JSON-lines log (step, loss components, metrics) alongside its
primary output. A --config JSON file supplies flag defaults; explicit flags
win. All randomness flows from --seed through named streams.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import fileio, gradcheck, lens as lens_mod, scenes
from .errors import DataError, FileFormatError, GlassvolError, NumericError, TriangulationError
from .morph import decoders as dec
from .morph import train as train_mod
from .morph.losses import LossWeights
from .raymarch import RenderConfig, psnr, render, render_mask, ssim
from .relight import PointLight, env_relight, relight_render
from .rig import SkinWeights, TriMesh, register_to_face
from .seeds import named_rng

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class RunLog:
    """JSON-lines log written alongside the primary output."""

    def __init__(self, out_path):
        self.path = Path(str(out_path) + ".log.jsonl") if out_path else None
        self.records = []

    def __call__(self, record: dict):
        self.records.append(record)
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(record, default=float) + "\n")


def _save_image(path, image):
    path = Path(path)
    if path.suffix == ".png":
        fileio.save_png_preview(path, image)
    else:
        fileio.save_pfm(path, image)


def _render_config(args) -> RenderConfig:
    return RenderConfig(
        step_size=args.step,
        max_steps=args.max_steps,
        early_stop_transmittance=args.early_stop,
    )


def _load_ckpt(path):
    blocks, manifest = fileio.load_checkpoint(path)
    cfg = dec.MorphConfig(**manifest["dims"])
    return blocks, cfg, manifest


def _save_ckpt(path, params, cfg, extra=None):
    manifest = {
        "dims": {
            "latent_dim": cfg.latent_dim,
            "expression_input_dim": cfg.expression_input_dim,
            "n_glasses_ids": cfg.n_glasses_ids,
            "n_face_ids": cfg.n_face_ids,
            "face_prims": cfg.face_prims,
            "glasses_prims": cfg.glasses_prims,
            "grid_resolution": cfg.grid_resolution,
            "trunk_hidden": cfg.trunk_hidden,
            "head_hidden": cfg.head_hidden,
            "voxel_embed_dim": cfg.voxel_embed_dim,
            "roughness": tuple(cfg.roughness),
            "scale_floor": cfg.scale_floor,
        },
        "loss_weights": vars(LossWeights()),
        "roughness": list(cfg.roughness),
    }
    if extra:
        manifest.update(extra)
    fileio.save_checkpoint(path, params, manifest)


def _latents_for(params, cfg, head_id, glasses_id, expression):
    z_e, _ = dec.encode_expression(params, cfg, expression)
    latents = {
        "z_e": z_e,
        "z_ftex": params["face_embed.tex"][head_id],
        "z_fgeo": params["face_embed.geo"][head_id],
    }
    if glasses_id is not None:
        one_hot = np.zeros(cfg.n_glasses_ids)
        one_hot[glasses_id] = 1.0
        z_geo, z_tex, _, _, _ = dec.encode_glasses(params, cfg, one_hot)
        latents["z_ggeo"] = z_geo
        latents["z_gtex"] = z_tex
    return latents


def appearance_bundle(params, cfg, latents, include_face_residual):
    def face_fn(ctx):
        out, _ = dec.decode_appearance(params, cfg, "face", ctx, latents)
        if include_face_residual:
            res, _ = dec.decode_appearance(params, cfg, "face_residual", ctx, latents)
            out = out + res
        return out

    def glasses_fn(ctx):
        out, _ = dec.decode_appearance(params, cfg, "glasses", ctx, latents)
        return out

    return {"face": face_fn, "glasses": glasses_fn}


def _parse_meshes(mesh_args):
    meshes = {}
    for spec in mesh_args or []:
        label, _, path = spec.partition("=")
        if not path:
            raise DataError(f"--mesh expects label=path, got {spec!r}")
        v, f, n = fileio.load_obj(path)
        meshes[label] = TriMesh(v, f, n)
    return meshes


# ---------------------------------------------------------------------------
# Subcommands


def cmd_render(args):
    scene = fileio.load_scene(args.scene)
    camera = fileio.load_camera(args.camera)
    config = _render_config(args)
    log = RunLog(args.out)
    t0 = time.time()
    if args.mask:
        mask, ownership = render_mask(scene, camera, config, args.mask, workers=args.workers)
        _save_image(args.out, mask)
        if args.ownership_out:
            _save_image(args.ownership_out, ownership)
    else:
        img = render(scene, camera, config, workers=args.workers)
        _save_image(args.out, img)
    log({"step": "render", "seconds": time.time() - t0, "out": str(args.out)})
    return 0


def cmd_relight(args):
    scene = fileio.load_scene(args.scene)
    camera = fileio.load_camera(args.camera)
    light_doc = fileio.load_lights(args.light)
    entry = light_doc[0]
    light = PointLight(entry["position"], entry.get("weight", entry.get("intensity", (1, 1, 1))))
    params, cfg, _ = _load_ckpt(args.decoders)
    latents = _latents_for(params, cfg, args.head_id, args.glasses_id, args.expression)
    bundle = appearance_bundle(params, cfg, latents, "glasses" in scene.labels)
    meshes = _parse_meshes(args.mesh)
    config = _render_config(args)
    log = RunLog(args.out)
    t0 = time.time()
    img = relight_render(scene, camera, light, bundle, config, meshes=meshes, workers=args.workers)
    _save_image(args.out, img)
    log({"step": "relight", "seconds": time.time() - t0, "out": str(args.out)})
    return 0


def cmd_envrelight(args):
    scene = fileio.load_scene(args.scene)
    camera = fileio.load_camera(args.camera)
    entries = fileio.load_lights(args.lights)
    lights = []
    for entry in entries:
        if "position" in entry:
            pos = np.asarray(entry["position"], dtype=float)
        else:
            direction = np.asarray(entry["direction"], dtype=float)
            pos = 1e4 * direction / np.linalg.norm(direction)
        lights.append((PointLight(pos, (1.0, 1.0, 1.0)), np.asarray(entry["weight"], dtype=float)))
    params, cfg, _ = _load_ckpt(args.decoders)
    latents = _latents_for(params, cfg, args.head_id, args.glasses_id, args.expression)
    bundle = appearance_bundle(params, cfg, latents, "glasses" in scene.labels)
    meshes = _parse_meshes(args.mesh)
    config = _render_config(args)
    log = RunLog(args.out)
    t0 = time.time()
    img = env_relight(scene, camera, lights, bundle, config, meshes=meshes, workers=args.workers)
    _save_image(args.out, img)
    log({"step": "envrelight", "lights": len(lights), "seconds": time.time() - t0})
    return 0


def cmd_lens(args):
    scene = fileio.load_scene(args.scene)
    camera = fileio.load_camera(args.camera)
    lenses = [lens_mod.lens_spec_from_dict(fileio.load_lens_spec(p)) for p in args.lens]
    env = None
    if args.env:
        env = lens_mod.EnvironmentMap(fileio.load_pfm(args.env))
    config = _render_config(args)
    log = RunLog(args.out)
    t0 = time.time()
    img = lens_mod.render_with_lens(scene, camera, lenses, env, config, workers=args.workers)
    _save_image(args.out, img)
    log({"step": "lens", "lenses": len(lenses), "seconds": time.time() - t0})
    return 0


def cmd_synth(args):
    spec = scenes.default_spec(
        args.seed,
        image_size=args.size,
        n_cameras=args.cameras,
        face_prims_side=args.face_side,
        glasses_prims=args.glasses_prims,
        grid_resolution=args.grid,
        fully_lit_per_combo=args.fully_lit,
        group_lit_between=args.group_lit,
    )
    log = RunLog(Path(args.out) / "synth")
    t0 = time.time()
    ds = scenes.build_dataset(spec, workers=args.workers)
    scenes.save_dataset(ds, args.out)
    log({"step": "synth", "frames": len(ds.frames), "seconds": time.time() - t0})
    return 0


def cmd_train(args):
    ds = scenes.load_dataset(args.data)
    spec = ds.spec
    cfg = dec.MorphConfig(
        latent_dim=args.latent_dim,
        n_glasses_ids=len(spec.glasses),
        n_face_ids=len(spec.heads),
        face_prims=spec.face_prims,
        glasses_prims=spec.glasses_prims,
        grid_resolution=spec.grid_resolution,
        trunk_hidden=args.trunk_hidden,
        head_hidden=args.head_hidden,
        voxel_embed_dim=args.embed_dim,
    )
    tconf = train_mod.TrainConfig(
        lr=args.lr,
        seed=args.seed,
        render_step=args.step,
        iterations_face=args.iters_face,
        iterations_joint=args.iters,
        iterations_app_face=args.iters_face,
        iterations_app_joint=args.iters,
        workers=args.workers,
    )
    log = RunLog(args.out)
    if args.stage == "geometry":
        params, _ = train_mod.train_stage_geometry(ds, cfg, tconf, log=log)
        _save_ckpt(args.out, params, cfg, {"stage": "geometry"})
    else:
        if not args.ckpt:
            raise DataError("appearance stage requires --ckpt with the geometry checkpoint")
        params, cfg, _ = _load_ckpt(args.ckpt)
        params, _ = train_mod.train_stage_appearance(ds, cfg, tconf, params, log=log)
        _save_ckpt(args.out, params, cfg, {"stage": "appearance"})
    return 0


def cmd_fit(args):
    params, cfg, _ = _load_ckpt(args.ckpt)
    image_dir = Path(args.images)
    views = sorted(image_dir.glob("view*.pfm"))[: args.views]
    if not views:
        raise DataError(f"{image_dir}: no view*.pfm images found")
    images, cameras = {}, {}
    for path in views:
        cam_path = Path(str(path)[: -len(".pfm")] + ".camera.json")
        if not cam_path.exists():
            raise DataError(f"{path}: missing pose file {cam_path.name}")
        images[path.stem] = fileio.load_pfm(path)
        cameras[path.stem] = fileio.load_camera(cam_path)
    log = RunLog(args.out)
    rng = named_rng(args.seed, "fit")
    z_geo, z_tex, info = train_mod.fit_few_shot(
        images, cameras, params, cfg,
        iterations=args.iters, lr=args.lr, seed=int(rng.integers(2**31)),
        workers=args.workers, log=log,
    )
    Path(args.out).write_text(json.dumps({
        "z_geo": z_geo.tolist(), "z_tex": z_tex.tolist(), "best_loss": info["best_loss"],
    }, indent=1))
    log({"step": "fit", "best_loss": info["best_loss"], "views": len(images)})
    return 0


def cmd_register(args):
    v, f, n = fileio.load_obj(args.mesh)
    mesh = TriMesh(v, f, n)
    weights = SkinWeights(fileio.load_weights(args.weights))
    kp_doc = fileio.load_keypoints(args.keypoints)
    keypoints = np.asarray(kp_doc["keypoints3d"])
    target_doc = fileio.load_keypoints(args.target_keypoints)
    target_kp = np.asarray(target_doc["keypoints3d"])
    mask = fileio.load_pfm(args.mask) if args.mask else None
    camera = fileio.load_camera(args.camera) if args.camera else None
    log = RunLog(args.out)
    transforms, info = register_to_face(
        mesh, weights, keypoints, target_kp, mask, camera,
        iterations=args.iters, lr=args.lr,
    )
    Path(args.out).write_text(json.dumps({
        "matrices": transforms.matrices.tolist(),
        "keypoint_rms": info["keypoint_rms"],
    }, indent=1))
    log({"step": "register", "keypoint_rms": info["keypoint_rms"], **info["final"]})
    print(f"keypoint RMS: {info['keypoint_rms']:.3e}")
    return 0


def cmd_gradcheck(args):
    rng = named_rng(args.seed, "gradcheck")
    seeds = [int(rng.integers(2**31)) for _ in range(args.scenes)]
    worst = gradcheck.run(seeds)
    max_err = max(worst.values())
    for cls, err in worst.items():
        print(f"{cls:>10}: max relative error {err:.3e}")
    print(f"max relative error {max_err:.3e} (threshold 1e-3)")
    if args.out:
        RunLog(args.out)({"step": "gradcheck", **worst, "max": max_err})
    if max_err >= 1e-3:
        print("gradcheck FAILED", file=sys.stderr)
        return EXIT_NUMERIC
    print("gradcheck passed")
    return 0


def cmd_eval(args):
    ds = scenes.load_dataset(args.data)
    params, cfg, _ = _load_ckpt(args.ckpt)
    held = sorted(ds.cameras)[-1] if args.camera is None else args.camera
    rows = []
    cache = {}
    for frame in ds.frames:
        if frame.glasses_id is None or held not in frame.images:
            continue
        if frame.kind == "fully_lit":
            img = train_mod.render_fully_lit(params, cfg, ds, frame, held)
        elif args.group_lit:
            img = train_mod.render_group_lit(params, cfg, ds, frame, held, feature_cache=cache)
        else:
            continue
        gt = frame.images[held]
        rows.append((
            frame.kind,
            float(np.mean(np.abs(img.data - gt.data))),
            psnr(img, gt),
            ssim(img, gt),
        ))
    log = RunLog(args.out) if args.out else RunLog(None)
    print(f"{'kind':>10}  l1(↓)    PSNR(↑)  SSIM(↑)")
    for kind in ("fully_lit", "group_lit"):
        sel = [r for r in rows if r[0] == kind]
        if not sel:
            continue
        l1 = np.mean([r[1] for r in sel])
        ps = np.mean([r[2] for r in sel])
        ss = np.mean([r[3] for r in sel])
        print(f"{kind:>10}  {l1:.4f}   {ps:6.2f}   {ss:.4f}")
        log({"step": "eval", "kind": kind, "l1": l1, "psnr": ps, "ssim": ss, "camera": held})
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glassvol",
        description="Compositional volumetric-primitive rendering of faces with eyeglasses.",
    )
    parser.add_argument("--config", help="JSON file of flag defaults (flags win)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--workers", type=int, default=1)
        if out:
            p.add_argument("--out", required=True)

    def render_flags(p):
        p.add_argument("--step", type=float, default=0.01)
        p.add_argument("--max-steps", type=int, default=2048, dest="max_steps")
        p.add_argument("--early-stop", type=float, default=1e-3, dest="early_stop")

    p = sub.add_parser("render", help="render a scene to an image")
    p.add_argument("--scene", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--mask", help="render this label's silhouette mask instead of RGB")
    p.add_argument("--ownership-out", dest="ownership_out")
    render_flags(p)
    common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("relight", help="point-light relighting via appearance decoders")
    p.add_argument("--scene", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--light", required=True)
    p.add_argument("--decoders", required=True)
    p.add_argument("--mesh", action="append", help="label=path guiding mesh (repeatable)")
    p.add_argument("--head-id", type=int, default=0, dest="head_id")
    p.add_argument("--glasses-id", type=int, default=0, dest="glasses_id")
    p.add_argument("--expression", type=float, nargs=2, default=(0.0, 0.0))
    render_flags(p)
    common(p)
    p.set_defaults(func=cmd_relight)

    p = sub.add_parser("envrelight", help="environment relighting by light blending")
    p.add_argument("--scene", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--lights", required=True, help="envmap light-list file")
    p.add_argument("--decoders", required=True)
    p.add_argument("--mesh", action="append")
    p.add_argument("--head-id", type=int, default=0, dest="head_id")
    p.add_argument("--glasses-id", type=int, default=0, dest="glasses_id")
    p.add_argument("--expression", type=float, nargs=2, default=(0.0, 0.0))
    render_flags(p)
    common(p)
    p.set_defaults(func=cmd_envrelight)

    p = sub.add_parser("lens", help="render with analytic lens refraction/reflection")
    p.add_argument("--scene", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--lens", action="append", required=True)
    p.add_argument("--env", help="equirectangular PFM environment map")
    render_flags(p)
    common(p)
    p.set_defaults(func=cmd_lens)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--size", type=int, default=48)
    p.add_argument("--cameras", type=int, default=6)
    p.add_argument("--face-side", type=int, default=8, dest="face_side")
    p.add_argument("--glasses-prims", type=int, default=16, dest="glasses_prims")
    p.add_argument("--grid", type=int, default=4)
    p.add_argument("--fully-lit", type=int, default=3, dest="fully_lit")
    p.add_argument("--group-lit", type=int, default=2, dest="group_lit")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="two-stage training on a dataset")
    p.add_argument("--stage", choices=("geometry", "appearance"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", help="geometry checkpoint (appearance stage)")
    p.add_argument("--iters", type=int, default=1600)
    p.add_argument("--iters-face", type=int, default=400, dest="iters_face")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--step", type=float, default=0.04)
    p.add_argument("--latent-dim", type=int, default=16, dest="latent_dim")
    p.add_argument("--trunk-hidden", type=int, default=64, dest="trunk_hidden")
    p.add_argument("--head-hidden", type=int, default=48, dest="head_hidden")
    p.add_argument("--embed-dim", type=int, default=8, dest="embed_dim")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fit", help="few-shot latent fitting to posed images")
    p.add_argument("--images", required=True, help="dir with view<k>.pfm + view<k>.camera.json")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--iters", type=int, default=300)
    p.add_argument("--lr", type=float, default=0.03)
    common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("register", help="fit bone transforms to keypoints (+mask)")
    p.add_argument("--mesh", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--keypoints", required=True, help="rest keypoints file")
    p.add_argument("--target-keypoints", required=True, dest="target_keypoints")
    p.add_argument("--mask")
    p.add_argument("--camera")
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--lr", type=float, default=1e-3)
    common(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("gradcheck", help="adjoint vs finite differences")
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("eval", help="L1 / PSNR / SSIM against dataset ground truth")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--camera", help="camera id (default: last = held out)")
    p.add_argument("--group-lit", action="store_true", dest="group_lit")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    return parser


def _apply_config_file(parser, argv):
    # pull --config out of argv wherever it appears, then splice the config's
    # flags in right after the subcommand so explicit argv flags win
    stripped = []
    config_path = None
    i = 0
    while i < len(argv):
        tok = argv[i]
        if tok == "--config":
            if i + 1 >= len(argv):
                raise DataError("--config needs a file path")
            config_path = argv[i + 1]
            i += 2
            continue
        if tok.startswith("--config="):
            config_path = tok.split("=", 1)[1]
            i += 1
            continue
        stripped.append(tok)
        i += 1
    if config_path is None:
        return argv
    doc = json.loads(Path(config_path).read_text())
    if not isinstance(doc, dict):
        raise DataError(f"{config_path}: config must be a JSON object")
    flags = []
    for key, val in doc.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(val, bool):
            if val:
                flags.append(flag)
        elif isinstance(val, (list, tuple)):
            flags.append(flag)
            flags.extend(str(x) for x in val)
        else:
            flags.extend([flag, str(val)])
    out = []
    inserted = False
    for tok in stripped:
        out.append(tok)
        if not tok.startswith("-") and not inserted:
            out.extend(flags)
            inserted = True
    if not inserted:
        out.extend(flags)
    return out


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
    except (DataError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (FileFormatError, DataError, TriangulationError, FileNotFoundError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except GlassvolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
