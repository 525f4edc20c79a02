"""Lens insertion demo: render a synthetic head with glasses, then insert
lenses with different prescriptions and reflection blends and save previews.

Usage: python3 scripts/lens_demo.py --out runs/lens
"""

import argparse
from pathlib import Path

import numpy as np

from glassvol import fileio, scenes
from glassvol.lens import EnvironmentMap, LensSpec, lens_boundary, render_with_lens
from glassvol.raymarch import Image, RenderConfig, render
from glassvol.volprim import Scene


def gradient_sky(height=32, width=64):
    v = np.linspace(0, 1, height)[:, None, None]
    sky = (1 - v) * np.array([0.35, 0.55, 0.9]) + v * np.array([0.9, 0.85, 0.7])
    return Image(np.broadcast_to(sky, (height, width, 3)).copy())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    spec = scenes.default_spec(args.seed, image_size=args.size, n_cameras=1,
                               face_prims_side=8, glasses_prims=16, grid_resolution=4)
    scene = scenes.assemble_scene(spec, 0, 0, np.zeros(2))
    cam = scenes.camera_ring(spec)["cam0"]
    cfg = RenderConfig(step_size=0.008)

    plain = render(scene, cam, cfg, workers=8)
    fileio.save_png_preview(out / "plain.png", plain)

    # lens boundaries from the ring keypoints, snapped to glasses primitives
    style = spec.glasses[0]
    kp = scenes.glasses_keypoints_canonical(style)
    rot_q, trans = scenes.worn_transform(spec, 0, np.zeros(2))
    widen = scenes.head_fit_widen(spec, 0)
    kp_worn = scenes.worn_points(kp, rot_q, trans, widen)
    glasses = scene.get("glasses")
    env = EnvironmentMap(gradient_sky())
    for f, tag in ((0.9, "farsighted"), (-0.9, "nearsighted")):
        lenses = []
        for ring in (kp_worn[:8], kp_worn[8:16]):
            boundary = lens_boundary(ring[::2], glasses.positions, subdivisions=2)
            lenses.append(LensSpec(boundary, focal_length=f,
                                   sphere_radius=4.0 * 2 * style.ring_radius,
                                   alpha=0.9, beta=0.1,
                                   plane_normal=np.array([0.0, 0.0, -1.0]),
                                   tint=(0.95, 0.95, 1.0)))
        img = render_with_lens(scene, cam, lenses, env, cfg, workers=8)
        fileio.save_png_preview(out / f"lens_{tag}.png", img)
        fileio.save_pfm(out / f"lens_{tag}.pfm", img)
        print(f"wrote lens_{tag}.png (f={f})")
    print(f"outputs in {out}")


if __name__ == "__main__":
    main()
