"""Reference quadrature renderer, deliberately independent of raymarch.py.

Ground-truth renders, masks, and shadow transmittances come from this module
so the fast renderer's tests never compare it against itself. Differences
from the production path: primitives are culled per ray by bounding spheres
(not a BVH over oriented slabs), samples are interpolated with
scipy.ndimage.map_coordinates (not the renderer's gather kernel), rays march
a global [0, far] grid (not a per-ray entry-anchored grid), and transmittance
comes from an explicit optical-depth cumsum. Expect it to be roughly an order
of magnitude slower at the same step size.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import map_coordinates

from .raymarch import Camera, Image
from .volprim import Scene


def _accumulate_field(scene, origins, dirs, t0, step, nsteps, own_label):
    """Sample density / weighted color on per-ray grids t0 + (k+0.5)*step.

    origins, dirs (p, 3) with unit dirs; t0, step (p,). Returns sigma
    (p, nsteps), weighted color (p, nsteps, 3), and labeled density or None.
    """
    p = origins.shape[0]
    sigma = np.zeros((p, nsteps))
    wcol = np.zeros((p, nsteps, 3))
    sig_tag = np.zeros((p, nsteps)) if own_label is not None else None
    for label, pset in scene.sets:
        m = pset.grid_resolution
        rot = pset.rotation_matrices()
        radius = np.linalg.norm(pset.scales, axis=1)
        for j in range(pset.count):
            rel0 = origins - pset.positions[j]
            tstar = -np.einsum("pi,pi->p", rel0, dirs)
            h2 = radius[j] ** 2 - (np.einsum("pi,pi->p", rel0, rel0) - tstar**2)
            rows = np.nonzero(h2 > 0.0)[0]
            if rows.size == 0:
                continue
            h = np.sqrt(h2[rows])
            k0 = np.ceil((tstar[rows] - h - t0[rows]) / step[rows] - 0.5)
            k1 = np.floor((tstar[rows] + h - t0[rows]) / step[rows] - 0.5)
            k0 = np.clip(k0, 0, nsteps).astype(np.int64)
            k1 = np.clip(k1, -1, nsteps - 1).astype(np.int64)
            counts = np.maximum(k1 - k0 + 1, 0)
            total = int(counts.sum())
            if total == 0:
                continue
            rr = np.repeat(rows, counts)
            offs = np.concatenate([[0], np.cumsum(counts)[:-1]])
            kk = np.arange(total) - np.repeat(offs, counts) + np.repeat(k0, counts)
            t = t0[rr] + (kk + 0.5) * step[rr]
            pts = origins[rr] + t[:, None] * dirs[rr]
            local = (pts - pset.positions[j]) @ rot[j] / pset.scales[j]
            inside = np.all(np.abs(local) <= 1.0, axis=-1)
            if not inside.any():
                continue
            rr, kk, local = rr[inside], kk[inside], local[inside]
            coords = ((local + 1.0) * 0.5 * (m - 1)).T
            s = map_coordinates(pset.opacity[j], coords, order=1, mode="nearest")
            np.add.at(sigma, (rr, kk), s)
            for ch in range(3):
                c = map_coordinates(pset.color[j, ch], coords, order=1, mode="nearest")
                np.add.at(wcol, (rr, kk, np.full_like(rr, ch)), s * c)
            if own_label is not None and label == own_label:
                np.add.at(sig_tag, (rr, kk), s)
    return sigma, wcol, sig_tag


def _far_bound(scene: Scene, origins: np.ndarray) -> float:
    corners = []
    for _, pset in scene.sets:
        half = np.einsum("nij,nj->ni", np.abs(pset.rotation_matrices()), pset.scales)
        corners.append(pset.positions - half)
        corners.append(pset.positions + half)
    corners = np.concatenate(corners)
    return float(np.max(np.linalg.norm(corners[None, :, :] - origins[:, None, :], axis=-1)))


def trace_rays(
    scene: Scene,
    origins: np.ndarray,
    dirs: np.ndarray,
    step: float,
    t_near: float = 0.0,
    t_far: float | None = None,
    own_label: str | None = None,
    batch: int = 1024,
):
    """March rays on a uniform midpoint grid over [t_near, t_far]; returns
    (rgb, alpha, ownership) per ray."""
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    if t_far is None:
        t_far = _far_bound(scene, origins)
    nsteps = max(int(np.ceil((t_far - t_near) / step)), 1)
    p = origins.shape[0]
    rgb = np.empty((p, 3))
    alpha = np.empty(p)
    own = np.zeros(p)
    for lo in range(0, p, batch):
        sl = slice(lo, min(lo + batch, p))
        n = sl.stop - sl.start
        sigma, wcol, sig_tag = _accumulate_field(
            scene,
            origins[sl],
            dirs[sl],
            np.full(n, t_near),
            np.full(n, step),
            nsteps,
            own_label,
        )
        depth = np.cumsum(sigma * step, axis=1)
        t_before = np.exp(-(depth - sigma * step))
        absorb = -np.expm1(-sigma * step)
        weights = t_before * absorb
        with np.errstate(invalid="ignore"):
            cbar = wcol / sigma[:, :, None]
        cbar = np.where(sigma[:, :, None] > 0, cbar, 0.0)
        t_end = np.exp(-depth[:, -1])
        rgb[sl] = np.einsum("pk,pkc->pc", weights, cbar) + t_end[:, None] * scene.background
        alpha[sl] = 1.0 - t_end
        if own_label is not None:
            with np.errstate(invalid="ignore"):
                frac = sig_tag / sigma
            frac = np.where(sigma > 0, frac, 0.0)
            own[sl] = np.einsum("pk,pk->p", weights, frac)
    return rgb, alpha, own


def render_reference(scene: Scene, camera: Camera, step: float) -> Image:
    """Reference render; ground truth for renderer agreement tests."""
    origins, dirs = camera.rays()
    rgb, _, _ = trace_rays(scene, origins, dirs, step)
    return Image(rgb.reshape(camera.height, camera.width, 3))


def masks_reference(scene: Scene, camera: Camera, step: float, label: str) -> tuple[Image, Image]:
    """Reference silhouette (label-only alpha) and ownership images."""
    origins, dirs = camera.rays()
    sub = Scene(tuple((lbl, p) for lbl, p in scene.sets if lbl == label), scene.background)
    _, alpha, _ = trace_rays(sub, origins, dirs, step)
    _, _, own = trace_rays(scene, origins, dirs, step, own_label=label)
    h, w = camera.height, camera.width
    return Image(alpha.reshape(h, w, 1)), Image(own.reshape(h, w, 1))


def transmittance_reference(
    scene: Scene, points_a: np.ndarray, points_b: np.ndarray, steps: int = 512
) -> np.ndarray:
    """exp(-integral of density) along straight segments a -> b, with `steps`
    midpoint samples per segment."""
    points_a = np.atleast_2d(np.asarray(points_a, dtype=float))
    points_b = np.atleast_2d(np.asarray(points_b, dtype=float))
    seg = points_b - points_a
    length = np.linalg.norm(seg, axis=-1)
    safe = np.where(length == 0, 1.0, length)
    dirs = seg / safe[:, None]
    step = length / steps
    sigma, _, _ = _accumulate_field(
        scene, points_a, dirs, np.zeros(len(points_a)), np.where(step == 0, 1.0, step), steps, None
    )
    tau = np.sum(sigma * step[:, None], axis=1)
    return np.exp(-tau)
