"""Physics-inspired lighting features and point-light / environment relighting.

Shadow is stored as transmittance (1 = fully lit), the deep-shadow-map
quantity; accumulated shadow opacity is 1 - transmittance. Specular features
are spherical-Gaussian lobes exp(r (h.n - 1)) at several roughness values.
Appearance decoders receive per-voxel features plus view/light directions and
return relit color payloads scaled by the light intensity, so zero light
yields exactly zero radiance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionError
from .raymarch import Camera, Image, RenderConfig, _run_tiles, render
from .rig import TriMesh
from .volprim import PrimitiveSet, Scene

DEFAULT_ROUGHNESS = (64.0, 128.0, 1000.0)


@dataclass(frozen=True)
class PointLight:
    position: np.ndarray
    intensity: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float).reshape(3)
        inten = np.asarray(self.intensity, dtype=float).reshape(3)
        if np.any(inten < 0):
            raise ValueError("light intensity must be nonnegative")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "intensity", inten)


@dataclass
class LightingFeatures:
    """Per-voxel lighting features for every set of a scene, keyed by label.

    shadow: (N, M, M, M) transmittance in [0, 1]
    specular: (N, R, M, M, M) spherical-Gaussian lobe values in (0, 1]
    normals: (N, 3, M, M, M) unit vectors (all zero when no mesh guides a set)
    """

    shadow: dict = field(default_factory=dict)
    specular: dict = field(default_factory=dict)
    normals: dict = field(default_factory=dict)


def voxel_centers(pset: PrimitiveSet) -> np.ndarray:
    """World positions of all voxel samples, shape (N, M^3, 3)."""
    m = pset.grid_resolution
    ax = 2.0 * np.arange(m) / (m - 1) - 1.0
    gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
    local = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)  # (M^3, 3)
    rot = pset.rotation_matrices()
    world = np.einsum("nij,nvj->nvi", rot, local[None, :, :] * pset.scales[:, None, :])
    return world + pset.positions[:, None, :]


def voxel_diagonal(pset: PrimitiveSet) -> np.ndarray:
    """World-space diagonal of one voxel cell per primitive, shape (N,)."""
    m = pset.grid_resolution
    return np.linalg.norm(2.0 * pset.scales / (m - 1), axis=1)


def shadow_feature(
    scene: Scene, light: PointLight, config: RenderConfig, workers: int = 1
) -> dict:
    """Transmittance from the light to every voxel center of every set.

    Marches the segment from the light position to each voxel, stopping a
    guard radius (one voxel diagonal) short of the voxel to avoid
    self-shadowing, and stores exp(-accumulated optical depth).
    """
    out = {}
    for label, pset in scene.sets:
        centers = voxel_centers(pset)  # (N, M^3, 3)
        n, v3, _ = centers.shape
        flat = centers.reshape(-1, 3)
        seg = flat - light.position
        dist = np.linalg.norm(seg, axis=1)
        guard = np.repeat(voxel_diagonal(pset), v3)
        t1 = np.maximum(dist - guard, 0.0)
        dirs = seg / np.where(dist[:, None] == 0, 1.0, dist[:, None])
        origins = np.broadcast_to(light.position, flat.shape)
        _, alpha, _, _ = _run_tiles(
            scene,
            origins.copy(),
            dirs,
            config,
            t1=t1,
            early_stop=False,
            workers=workers,
        )
        m = pset.grid_resolution
        out[label] = (1.0 - alpha).reshape(n, m, m, m)
    return out


def specular_feature(
    normals: np.ndarray,
    light_dir: np.ndarray,
    view_dir: np.ndarray,
    roughness=DEFAULT_ROUGHNESS,
) -> np.ndarray:
    """Spherical-Gaussian lobes exp(r (h.n - 1)) with h the half vector of
    unit light and view directions. Shapes broadcast over leading axes; the
    result gains a trailing roughness axis. The degenerate case v = -l (zero
    half vector) yields 0 for every lobe."""
    normals = np.asarray(normals, dtype=float)
    half = np.asarray(light_dir, dtype=float) + np.asarray(view_dir, dtype=float)
    norm = np.linalg.norm(half, axis=-1, keepdims=True)
    degenerate = norm[..., 0] < 1e-12
    half = half / np.where(norm == 0, 1.0, norm)
    cos = np.sum(half * normals, axis=-1)
    r = np.asarray(roughness, dtype=float)
    lobes = np.exp(r * (cos[..., None] - 1.0))
    lobes[degenerate] = 0.0
    return lobes


def assign_normals(pset: PrimitiveSet, mesh: TriMesh) -> np.ndarray:
    """Nearest-mesh-vertex normal for every voxel center, renormalized;
    shape (N, 3, M, M, M)."""
    if mesh.vertices.shape[0] == 0:
        raise DimensionError("empty mesh")
    normals = mesh.normals
    if normals is None:
        raise DimensionError("mesh has no per-vertex normals")
    centers = voxel_centers(pset)
    n, v3, _ = centers.shape
    _, idx = cKDTree(mesh.vertices).query(centers.reshape(-1, 3))
    near = normals[idx]
    ln = np.linalg.norm(near, axis=1, keepdims=True)
    near = near / np.where(ln == 0, 1.0, ln)
    m = pset.grid_resolution
    return near.reshape(n, m, m, m, 3).transpose(0, 4, 1, 2, 3)


def compute_features(
    scene: Scene,
    light: PointLight,
    config: RenderConfig,
    meshes: dict | None = None,
    workers: int = 1,
) -> LightingFeatures:
    """Shadow transmittance for every set plus normals for sets with a guiding
    mesh (others get zero normals, hence zero specular response)."""
    feats = LightingFeatures()
    feats.shadow = shadow_feature(scene, light, config, workers=workers)
    for label, pset in scene.sets:
        m = pset.grid_resolution
        if meshes and label in meshes:
            feats.normals[label] = assign_normals(pset, meshes[label])
        else:
            feats.normals[label] = np.zeros((pset.count, 3, m, m, m))
    return feats


@dataclass
class ShadingContext:
    """Everything an appearance decoder sees for one set under one light."""

    label: str
    pset: PrimitiveSet
    shadow: np.ndarray  # (N, M^3)
    specular: np.ndarray  # (N, M^3, R)
    normals: np.ndarray  # (N, M^3, 3)
    view_dir: np.ndarray  # (N, M^3, 3) unit, voxel -> camera
    light_dir: np.ndarray  # (N, M^3, 3) unit, voxel -> light
    light: PointLight
    fully_lit: np.ndarray  # (N, M^3, 3)


def _flatten_payload(arr: np.ndarray) -> np.ndarray:
    """(N, C, M, M, M) -> (N, M^3, C)"""
    n, c = arr.shape[:2]
    return arr.reshape(n, c, -1).transpose(0, 2, 1)


def build_shading_context(
    scene: Scene,
    label: str,
    features: LightingFeatures,
    camera: Camera,
    light: PointLight,
    roughness=DEFAULT_ROUGHNESS,
) -> ShadingContext:
    pset = scene.get(label)
    centers = voxel_centers(pset)
    cam_pos = camera.pose[:3, 3]
    view = cam_pos - centers
    view /= np.linalg.norm(view, axis=-1, keepdims=True)
    ldir = light.position - centers
    ldir /= np.linalg.norm(ldir, axis=-1, keepdims=True)
    normals = _flatten_payload(features.normals[label])
    spec = specular_feature(normals, ldir, view, roughness)
    n = pset.count
    return ShadingContext(
        label=label,
        pset=pset,
        shadow=features.shadow[label].reshape(n, -1),
        specular=spec,
        normals=normals,
        view_dir=view,
        light_dir=ldir,
        light=light,
        fully_lit=_flatten_payload(pset.color),
    )


def lambertian_stub(ctx: ShadingContext) -> np.ndarray:
    """Analytic diffuse decoder: albedo * max(0, n.l) * shadow * intensity.
    Albedo is the fully-lit color payload. Returns (N, 3, M, M, M)."""
    lambert = np.maximum(np.sum(ctx.normals * ctx.light_dir, axis=-1), 0.0)
    rgb = ctx.fully_lit * (lambert * ctx.shadow)[:, :, None] * ctx.light.intensity
    n = ctx.pset.count
    m = ctx.pset.grid_resolution
    return rgb.transpose(0, 2, 1).reshape(n, 3, m, m, m)


def relight_render(
    scene: Scene,
    camera: Camera,
    light: PointLight,
    appearance_decoders: dict,
    config: RenderConfig,
    features: LightingFeatures | None = None,
    meshes: dict | None = None,
    roughness=DEFAULT_ROUGHNESS,
    workers: int = 1,
) -> Image:
    """Per-frame relighting: compute lighting features, evaluate the per-label
    appearance decoders into relit color payloads, then render. Geometry
    payloads (opacity) are unchanged."""
    for label in scene.labels:
        if label not in appearance_decoders:
            raise KeyError(f"missing appearance decoder for set {label!r}")
    if features is None:
        features = compute_features(scene, light, config, meshes=meshes, workers=workers)
    colors = {}
    for label in scene.labels:
        ctx = build_shading_context(scene, label, features, camera, light, roughness)
        colors[label] = appearance_decoders[label](ctx)
    relit = scene.with_payloads(colors)
    return render(relit, camera, config, workers=workers)


def env_relight(
    scene: Scene,
    camera: Camera,
    lights: list,
    appearance_decoders: dict,
    config: RenderConfig,
    features_per_light: list | None = None,
    meshes: dict | None = None,
    workers: int = 1,
) -> Image:
    """Weighted sum of single-light relit renders, light by light.

    lights is a list of (PointLight, weight) with scalar or RGB weights;
    linearity in the weights holds exactly by construction."""
    if not lights:
        raise DimensionError("env_relight needs at least one light")
    total = np.zeros((camera.height, camera.width, 3))
    for i, (light, weight) in enumerate(lights):
        feats = features_per_light[i] if features_per_light else None
        img = relight_render(
            scene, camera, light, appearance_decoders, config,
            features=feats, meshes=meshes, workers=workers,
        )
        total = total + np.asarray(weight, dtype=float) * img.data
    return Image(total)
