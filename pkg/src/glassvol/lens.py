"""Analytical lens model: boundary estimation, lens meshing, thin-lens
refraction, sphere-approximated reflection, and blended rendering.

Refraction bends a camera ray at its first lens hit p toward a virtual
camera center c' = f (c - o) / (f + u) + o with u = (c - o) . n, then
continues the march from p. The refracted direction keeps the original
ray's forward orientation (the raw formula flips sign across the focal
plane). Orientation convention: with the lens plane normal n facing the
scene (away from the camera), focal_length > 0 acts as a converging
(farsighted) lens and focal_length < 0 as diverging (nearsighted); flipping
n swaps the behavior. focal_length = inf is a flat prescription and returns
rays unchanged. Reflections treat the lens as a sphere of radius
sphere_radius centered at o' = o - sphere_radius * n.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError, DimensionError, SingularLensError
from .raymarch import Camera, Image, RenderConfig, render_rays
from .volprim import Scene


@dataclass(frozen=True)
class LensSpec:
    """Planar boundary loop, optical center (mean of the boundary), plane
    normal, signed focal length in world units, reflection sphere radius, and
    (refraction, reflection) blend ratios."""

    boundary: np.ndarray
    focal_length: float
    sphere_radius: float
    alpha: float = 0.92
    beta: float = 0.08
    tint: np.ndarray | None = None
    plane_normal: np.ndarray | None = None

    def __post_init__(self):
        boundary = np.asarray(self.boundary, dtype=float).reshape(-1, 3)
        if boundary.shape[0] < 3:
            raise DimensionError("lens boundary needs at least 3 points")
        center = boundary.mean(axis=0)
        normal = self.plane_normal
        if normal is None:
            # least-squares plane normal of the loop
            rel = boundary - center
            _, _, vt = np.linalg.svd(rel)
            normal = vt[-1]
        normal = np.asarray(normal, dtype=float).reshape(3)
        normal = normal / np.linalg.norm(normal)
        rel = boundary - center
        diameter = 2.0 * np.max(np.linalg.norm(rel, axis=1))
        off_plane = np.abs(rel @ normal)
        if off_plane.max() > 0.05 * diameter:
            raise DimensionError(
                f"boundary not planar: offset {off_plane.max():.4g} exceeds 5% of diameter {diameter:.4g}"
            )
        if self.sphere_radius <= 0:
            raise ValueError("sphere_radius must be positive")
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValueError("blend ratios must lie in [0, 1]")
        tint = self.tint
        if tint is not None:
            tint = np.ascontiguousarray(np.asarray(tint, dtype=float).reshape(3))
            tint.flags.writeable = False
        boundary = np.ascontiguousarray(boundary)
        boundary.flags.writeable = False
        normal = np.ascontiguousarray(normal)
        normal.flags.writeable = False
        object.__setattr__(self, "boundary", boundary)
        object.__setattr__(self, "plane_normal", normal)
        object.__setattr__(self, "tint", tint)

    @property
    def optical_center(self) -> np.ndarray:
        return self.boundary.mean(axis=0)

    @property
    def diameter(self) -> float:
        rel = self.boundary - self.optical_center
        return 2.0 * float(np.max(np.linalg.norm(rel, axis=1)))


@dataclass(frozen=True)
class LensMesh:
    """Triangle fan connecting the optical center to consecutive boundary
    points, wound so face normals agree with the lens plane normal."""

    vertices: np.ndarray  # center followed by the boundary loop
    faces: np.ndarray

    @classmethod
    def from_spec(cls, spec: LensSpec) -> "LensMesh":
        center = spec.optical_center
        boundary = spec.boundary
        n = boundary.shape[0]
        verts = np.concatenate([center[None], boundary])
        faces = []
        for i in range(n):
            a, b = 1 + i, 1 + (i + 1) % n
            e1 = verts[a] - center
            e2 = verts[b] - center
            if np.cross(e1, e2) @ spec.plane_normal >= 0:
                faces.append([0, a, b])
            else:
                faces.append([0, b, a])
        return cls(verts, np.asarray(faces))


def lens_spec_from_dict(doc: dict) -> LensSpec:
    """Build a LensSpec from a lens-file document. Focal length comes either
    from `focal_length` (world units, inf allowed as the string "inf") or
    from `diopters` with `unit_scale` (f = unit_scale / diopters; 0 diopters
    is flat). sphere_radius defaults to 4x the lens diameter."""
    boundary = np.asarray(doc["boundary"], dtype=float)
    if "focal_length" in doc:
        f = float(doc["focal_length"])
    elif "diopters" in doc:
        diopters = float(doc["diopters"])
        unit_scale = float(doc.get("unit_scale", 1.0))
        f = math.inf if diopters == 0.0 else unit_scale / diopters
    else:
        raise DataError("lens file needs focal_length or diopters")
    center = boundary.mean(axis=0)
    diameter = 2.0 * float(np.max(np.linalg.norm(boundary - center, axis=1)))
    return LensSpec(
        boundary=boundary,
        focal_length=f,
        sphere_radius=float(doc.get("sphere_radius", 4.0 * diameter)),
        alpha=float(doc.get("alpha", 0.92)),
        beta=float(doc.get("beta", 0.08)),
        tint=doc.get("tint"),
        plane_normal=doc.get("plane_normal"),
    )


def lens_boundary(
    keypoints: np.ndarray, primitive_positions: np.ndarray, subdivisions: int = 3
) -> np.ndarray:
    """Refine a coarse keypoint loop into a lens boundary: each round inserts
    edge midpoints then snaps every point to its nearest primitive position;
    with 0 subdivisions the input loop is snapped once. A loop of n points
    becomes n * 2^k points after k rounds."""
    loop = np.asarray(keypoints, dtype=float).reshape(-1, 3)
    if loop.shape[0] < 3:
        raise DimensionError("lens boundary needs at least 3 keypoints")
    prims = np.asarray(primitive_positions, dtype=float).reshape(-1, 3)
    if prims.shape[0] == 0:
        raise DimensionError("no primitive positions to snap to")
    tree = cKDTree(prims)

    def snap(points):
        _, idx = tree.query(points)
        return prims[idx]

    loop = snap(loop)
    for _ in range(subdivisions):
        mids = 0.5 * (loop + np.roll(loop, -1, axis=0))
        woven = np.empty((2 * loop.shape[0], 3))
        woven[0::2] = loop
        woven[1::2] = mids
        loop = snap(woven)
    return loop


def intersect_fan(mesh: LensMesh, origins: np.ndarray, dirs: np.ndarray):
    """First-hit distances of rays against the fan (Moller-Trumbore batched
    over triangles). Returns (t, hit_mask); t is inf where there is no hit."""
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    p = origins.shape[0]
    best = np.full(p, np.inf)
    v = mesh.vertices
    for tri in mesh.faces:
        a, b, c = v[tri[0]], v[tri[1]], v[tri[2]]
        e1, e2 = b - a, c - a
        h = np.cross(dirs, e2)
        det = h @ e1
        ok = np.abs(det) > 1e-14
        inv = np.where(ok, 1.0 / np.where(det == 0, 1.0, det), 0.0)
        s = origins - a
        u = np.einsum("pi,pi->p", s, h) * inv
        q = np.cross(s, e1)
        w = np.einsum("pi,pi->p", dirs, q) * inv
        t = (q @ e2) * inv
        hit = ok & (u >= 0) & (w >= 0) & (u + w <= 1) & (t > 1e-9)
        best = np.where(hit & (t < best), t, best)
    return best, np.isfinite(best)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray


def refract_ray(ray: Ray, lens: LensSpec, mesh: LensMesh | None = None) -> Ray:
    """Bend a ray at its first lens hit toward the virtual camera center.

    Rays that miss the lens pass through unchanged, as does a flat
    prescription (focal_length = inf). A camera on the front focal plane
    (f + u = 0) is a singular configuration.
    """
    mesh = mesh or LensMesh.from_spec(lens)
    o = np.asarray(ray.origin, dtype=float)
    d = np.asarray(ray.direction, dtype=float)
    d = d / np.linalg.norm(d)
    t, hit = intersect_fan(mesh, o[None], d[None])
    if not hit[0]:
        return Ray(o, d)
    if math.isinf(lens.focal_length):
        return Ray(o, d)
    p = o + t[0] * d
    center = lens.optical_center
    n = lens.plane_normal
    u = (o - center) @ n
    denom = lens.focal_length + u
    if abs(denom) < 1e-12 * max(abs(lens.focal_length), 1.0):
        raise SingularLensError("camera sits on the front focal plane (f + u = 0)")
    virtual = lens.focal_length * (o - center) / denom + center
    new_dir = p - virtual
    norm = np.linalg.norm(new_dir)
    if norm < 1e-15:
        raise SingularLensError("hit point coincides with the virtual camera center")
    new_dir = new_dir / norm
    if new_dir @ d < 0:
        new_dir = -new_dir
    return Ray(p, new_dir)


def reflect_ray(ray: Ray, lens: LensSpec, mesh: LensMesh | None = None) -> Ray:
    """Mirror a ray off the lens approximated as a sphere of radius
    sphere_radius centered at o' = o - sphere_radius * n."""
    mesh = mesh or LensMesh.from_spec(lens)
    o = np.asarray(ray.origin, dtype=float)
    d = np.asarray(ray.direction, dtype=float)
    d = d / np.linalg.norm(d)
    t, hit = intersect_fan(mesh, o[None], d[None])
    if not hit[0]:
        return Ray(o, d)
    p = o + t[0] * d
    sphere_center = lens.optical_center - lens.sphere_radius * lens.plane_normal
    rvec = p - sphere_center
    norm = np.linalg.norm(rvec)
    if norm < 1e-15:
        raise SingularLensError("hit point coincides with the reflection sphere center")
    rvec = rvec / norm
    new_dir = d - 2.0 * (d @ rvec) * rvec
    return Ray(p, new_dir)


def _refract_batch(origins, dirs, t_hit, lens):
    """Batched refraction at known hit distances (origins share one camera)."""
    p = origins + t_hit[:, None] * dirs
    if math.isinf(lens.focal_length):
        return origins.copy(), dirs.copy(), np.zeros(len(t_hit))
    center = lens.optical_center
    n = lens.plane_normal
    u = (origins[0] - center) @ n
    denom = lens.focal_length + u
    if abs(denom) < 1e-12 * max(abs(lens.focal_length), 1.0):
        raise SingularLensError("camera sits on the front focal plane (f + u = 0)")
    virtual = lens.focal_length * (origins[0] - center) / denom + center
    new_dir = p - virtual
    new_dir = new_dir / np.linalg.norm(new_dir, axis=1, keepdims=True)
    flip = np.einsum("pi,pi->p", new_dir, dirs) < 0
    new_dir[flip] *= -1.0
    return p, new_dir, None


def _reflect_batch(origins, dirs, t_hit, lens):
    p = origins + t_hit[:, None] * dirs
    sphere_center = lens.optical_center - lens.sphere_radius * lens.plane_normal
    rvec = p - sphere_center
    rvec = rvec / np.linalg.norm(rvec, axis=1, keepdims=True)
    new_dir = dirs - 2.0 * np.einsum("pi,pi->p", dirs, rvec)[:, None] * rvec
    return p, new_dir


class EnvironmentMap:
    """Equirectangular float environment queried by direction (sphere-mapped
    lookup with bilinear filtering)."""

    def __init__(self, image: Image):
        if image.channels != 3:
            raise DimensionError("environment map must have 3 channels")
        self.data = image.data

    def sample(self, dirs: np.ndarray) -> np.ndarray:
        dirs = np.atleast_2d(dirs)
        d = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        theta = np.arccos(np.clip(d[:, 1], -1.0, 1.0))  # polar from +y
        phi = np.arctan2(d[:, 0], d[:, 2])  # azimuth around y
        h, w, _ = self.data.shape
        x = (phi / (2 * np.pi) + 0.5) * w - 0.5
        y = theta / np.pi * h - 0.5
        x0 = np.floor(x).astype(int)
        y0 = np.clip(np.floor(y).astype(int), 0, h - 2)
        fx = x - x0
        fy = y - y0
        x0m = np.mod(x0, w)
        x1m = np.mod(x0 + 1, w)
        out = (
            self.data[y0, x0m] * ((1 - fx) * (1 - fy))[:, None]
            + self.data[y0, x1m] * (fx * (1 - fy))[:, None]
            + self.data[y0 + 1, x0m] * ((1 - fx) * fy)[:, None]
            + self.data[y0 + 1, x1m] * (fx * fy)[:, None]
        )
        return out


def render_with_lens(
    scene: Scene,
    camera: Camera,
    lenses: list,
    env_map: EnvironmentMap | None,
    config: RenderConfig,
    workers: int = 1,
) -> Image:
    """Render with lens pixels replaced by alpha * refraction + beta *
    reflection. Refracted rays march the scene from the hit point; reflected
    rays march the scene and composite onto the sphere-mapped environment
    where they escape all geometry. A lens tint multiplies the refracted
    image. Non-lens pixels render normally."""
    origins, dirs = camera.rays()
    p = origins.shape[0]
    rgb = np.zeros((p, 3))
    handled = np.zeros(p, dtype=bool)
    for lens in lenses:
        if lens.beta > 0 and env_map is None:
            raise DataError("reflection blending (beta > 0) requires an environment map")
        mesh = LensMesh.from_spec(lens)
        t_hit, hit = intersect_fan(mesh, origins, dirs)
        sel = hit & ~handled
        if not sel.any():
            continue
        o_s, d_s, t_s = origins[sel], dirs[sel], t_hit[sel]
        part = np.zeros((int(sel.sum()), 3))
        if lens.alpha > 0:
            if math.isinf(lens.focal_length):
                ro, rd = o_s, d_s
                refra, _ = render_rays(scene, ro, rd, config, workers=workers)
            else:
                ro, rd, _ = _refract_batch(o_s, d_s, t_s, lens)
                refra, _ = render_rays(scene, ro, rd, config, workers=workers)
            if lens.tint is not None:
                refra = refra * lens.tint
            part += lens.alpha * refra
        if lens.beta > 0:
            ro, rd = _reflect_batch(o_s, d_s, t_s, lens)
            env = env_map.sample(rd)
            refle, _ = render_rays(scene, ro, rd, config, background=env, workers=workers)
            part += lens.beta * refle
        rgb[sel] = part
        handled |= hit
    if not handled.all():
        plain, _ = render_rays(
            scene, origins[~handled], dirs[~handled], config, workers=workers
        )
        rgb[~handled] = plain
    return Image(rgb.reshape(camera.height, camera.width, 3))
