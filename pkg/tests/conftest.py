"""Shared factories for synthetic primitives, scenes, meshes, and cameras."""

import numpy as np
import pytest

from glassvol.geom import look_at, quat_normalize
from glassvol.raymarch import Camera
from glassvol.rig import SkinWeights, TriMesh
from glassvol.volprim import PrimitiveSet, Scene


def taper_profile(m: int) -> np.ndarray:
    """Per-axis profile that is zero at the grid borders."""
    return np.sin(np.pi * np.arange(m) / (m - 1))


def taper_grid(m: int) -> np.ndarray:
    t = taper_profile(m)
    return t[:, None, None] * t[None, :, None] * t[None, None, :]


def make_set(
    rng=None,
    n=1,
    m=6,
    positions=None,
    rotations=None,
    scales=None,
    density=1.0,
    color=None,
    tapered=True,
) -> PrimitiveSet:
    """Primitive set with either supplied frames or random ones."""
    rng = rng or np.random.default_rng(0)
    if positions is None:
        positions = rng.uniform(-0.5, 0.5, size=(n, 3))
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    n = positions.shape[0]
    if rotations is None:
        rotations = np.zeros((n, 4))
        rotations[:, 0] = 1.0
    rotations = quat_normalize(np.atleast_2d(np.asarray(rotations, dtype=float)))
    if scales is None:
        scales = np.full((n, 3), 0.3)
    scales = np.broadcast_to(np.asarray(scales, dtype=float), (n, 3)).copy()
    profile = taper_grid(m) if tapered else np.ones((m, m, m))
    opacity = density * np.broadcast_to(profile, (n, m, m, m)).copy()
    if color is None:
        color = rng.uniform(0.1, 0.9, size=(n, 3))
    color = np.broadcast_to(np.asarray(color, dtype=float).reshape(-1, 3), (n, 3))
    col = np.broadcast_to(color[:, :, None, None, None], (n, 3, m, m, m)).copy()
    return PrimitiveSet(positions, rotations, scales, opacity, col)


def random_set(rng, n=4, m=5, tapered=True) -> PrimitiveSet:
    quats = quat_normalize(rng.normal(size=(n, 4)))
    opacity = rng.uniform(0.0, 3.0, size=(n, m, m, m))
    if tapered:
        opacity = opacity * taper_grid(m)
    return PrimitiveSet(
        positions=rng.uniform(-0.6, 0.6, size=(n, 3)),
        rotations=quats,
        scales=rng.uniform(0.15, 0.45, size=(n, 3)),
        opacity=opacity,
        color=rng.uniform(0.0, 1.0, size=(n, 3, m, m, m)),
    )


def make_camera(eye=(0.0, 0.0, 3.0), target=(0.0, 0.0, 0.0), width=32, height=32, fov_deg=40.0) -> Camera:
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    k = np.array([[f, 0, width / 2], [0, f, height / 2], [0, 0, 1.0]])
    return Camera(k, look_at(np.asarray(eye, float), np.asarray(target, float)), (width, height))


def grid_mesh(nx=6, ny=6, scale=1.0):
    """Flat triangulated sheet in the z=0 plane with +z normals."""
    xs, ys = np.meshgrid(np.linspace(-1, 1, nx), np.linspace(-1, 1, ny))
    verts = np.stack([xs.ravel() * scale, ys.ravel() * scale, np.zeros(nx * ny)], axis=-1)
    faces = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            faces.append([a, a + 1, a + nx])
            faces.append([a + 1, a + nx + 1, a + nx])
    normals = np.tile([0.0, 0.0, 1.0], (nx * ny, 1))
    return TriMesh(verts, np.asarray(faces), normals)


def inverse_distance_weights(vertices, bone_points, power=2.0):
    d = np.linalg.norm(vertices[None, :, :] - bone_points[:, None, :], axis=-1)
    w = 1.0 / np.maximum(d, 1e-6) ** power
    return SkinWeights(w / w.sum(axis=0, keepdims=True))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def two_prim_scene(rng):
    pset = random_set(rng, n=2, m=5)
    return Scene((("face", pset),), background=np.array([0.1, 0.2, 0.3]))
