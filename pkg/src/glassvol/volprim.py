"""Volumetric primitive sets: rigid frames with voxel payloads, residual
deformation, scene composition, temporal interpolation, and point sampling.

A primitive is an oriented box. Local coordinates live in [-1, 1]^3; a world
point maps to local via u = (R^T (x - t)) / s. Voxel grids have M samples per
axis with samples at the box corners (align-corners convention), stored
z-fastest: opacity (N, M, M, M) indexed [n, ix, iy, iz], color (N, 3, M, M, M).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionError
from .geom import quat_multiply, quat_normalize, quat_slerp_linear, quat_to_matrix

DEFAULT_SCALE_FLOOR = 1e-4
QUAT_UNIT_TOL = 1e-6


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class PrimitiveSet:
    """N oriented, scaled boxes with per-voxel density and linear-RGB color.

    positions (N, 3), rotations (N, 4) unit wxyz quaternions, scales (N, 3)
    strictly positive half-extents, opacity (N, M, M, M) nonnegative densities
    in inverse world units, color (N, 3, M, M, M).
    """

    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacity: np.ndarray
    color: np.ndarray

    def __post_init__(self):
        pos = _freeze(self.positions)
        rot = _freeze(self.rotations)
        scl = _freeze(self.scales)
        opa = _freeze(self.opacity)
        col = _freeze(self.color)
        n = pos.shape[0]
        if pos.shape != (n, 3) or rot.shape != (n, 4) or scl.shape != (n, 3):
            raise DimensionError(
                f"inconsistent primitive frames: positions {pos.shape}, "
                f"rotations {rot.shape}, scales {scl.shape}"
            )
        if n < 1:
            raise DimensionError("primitive set must contain at least one primitive")
        m = opa.shape[-1]
        if m < 2:
            raise DimensionError(f"grid resolution must be >= 2, got {m}")
        if opa.shape != (n, m, m, m):
            raise DimensionError(f"opacity shape {opa.shape} != ({n}, {m}, {m}, {m})")
        if col.shape != (n, 3, m, m, m):
            raise DimensionError(f"color shape {col.shape} != ({n}, 3, {m}, {m}, {m})")
        if not np.all(scl > 0):
            raise ValueError("scales must be strictly positive")
        if np.any(opa < 0):
            raise ValueError("densities must be nonnegative")
        norms = np.linalg.norm(rot, axis=-1)
        if np.any(np.abs(norms - 1.0) > QUAT_UNIT_TOL):
            raise ValueError("rotations must be unit quaternions (within 1e-6)")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "rotations", rot)
        object.__setattr__(self, "scales", scl)
        object.__setattr__(self, "opacity", opa)
        object.__setattr__(self, "color", col)

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @property
    def grid_resolution(self) -> int:
        return self.opacity.shape[-1]

    def rotation_matrices(self) -> np.ndarray:
        return quat_to_matrix(self.rotations)


@dataclass(frozen=True)
class ResidualDeformation:
    """Per-primitive deltas: positions add, rotations compose on the left,
    scales add (then clamp to a floor in apply_residuals)."""

    delta_positions: np.ndarray
    delta_rotations: np.ndarray
    delta_scales: np.ndarray

    def __post_init__(self):
        dp = _freeze(self.delta_positions)
        dr = _freeze(self.delta_rotations)
        ds = _freeze(self.delta_scales)
        n = dp.shape[0]
        if dp.shape != (n, 3) or dr.shape != (n, 4) or ds.shape != (n, 3):
            raise DimensionError(
                f"inconsistent residual shapes: {dp.shape}, {dr.shape}, {ds.shape}"
            )
        norms = np.linalg.norm(dr, axis=-1)
        if np.any(np.abs(norms - 1.0) > QUAT_UNIT_TOL):
            raise ValueError("delta rotations must be unit quaternions")
        object.__setattr__(self, "delta_positions", dp)
        object.__setattr__(self, "delta_rotations", dr)
        object.__setattr__(self, "delta_scales", ds)

    @property
    def count(self) -> int:
        return self.delta_positions.shape[0]

    @classmethod
    def identity(cls, n: int) -> "ResidualDeformation":
        quats = np.zeros((n, 4))
        quats[:, 0] = 1.0
        return cls(np.zeros((n, 3)), quats, np.zeros((n, 3)))

    def inverse(self) -> "ResidualDeformation":
        conj = self.delta_rotations.copy()
        conj[:, 1:] *= -1.0
        return ResidualDeformation(-self.delta_positions, conj, -self.delta_scales)


@dataclass(frozen=True)
class Scene:
    """Ordered labeled primitive sets plus a constant linear-RGB background."""

    sets: tuple
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        sets = tuple(self.sets)
        if not sets:
            raise DimensionError("scene must contain at least one primitive set")
        labels = [label for label, _ in sets]
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate set labels: {labels}")
        bg = _freeze(np.asarray(self.background, dtype=float).reshape(3))
        object.__setattr__(self, "sets", sets)
        object.__setattr__(self, "background", bg)

    @property
    def labels(self) -> list:
        return [label for label, _ in self.sets]

    def get(self, label: str) -> PrimitiveSet:
        for lbl, pset in self.sets:
            if lbl == label:
                return pset
        raise KeyError(f"no set labeled {label!r}; have {self.labels}")

    def with_payloads(self, colors: dict, opacities: dict | None = None) -> "Scene":
        """New scene with some sets' payloads replaced (used for relighting)."""
        new_sets = []
        for lbl, pset in self.sets:
            col = colors.get(lbl, pset.color)
            opa = pset.opacity if opacities is None else opacities.get(lbl, pset.opacity)
            new_sets.append((lbl, replace(pset, color=col, opacity=opa)))
        return Scene(tuple(new_sets), self.background)


def apply_residuals(
    pset: PrimitiveSet,
    residual: ResidualDeformation,
    scale_floor: float = DEFAULT_SCALE_FLOOR,
) -> PrimitiveSet:
    """Deform a primitive set: positions add, rotations compose (residual on
    the left, i.e. world side), scales add and clamp to `scale_floor`."""
    if residual.count != pset.count:
        raise DimensionError(
            f"residual count {residual.count} != set count {pset.count}"
        )
    rot = quat_normalize(quat_multiply(residual.delta_rotations, pset.rotations))
    return replace(
        pset,
        positions=pset.positions + residual.delta_positions,
        rotations=rot,
        scales=np.maximum(pset.scales + residual.delta_scales, scale_floor),
    )


def compose(
    face: PrimitiveSet, glasses: PrimitiveSet, background=(0.0, 0.0, 0.0)
) -> Scene:
    return Scene((("face", face), ("glasses", glasses)), np.asarray(background, dtype=float))


def interpolate_sets(a: PrimitiveSet, b: PrimitiveSet, t: float) -> PrimitiveSet:
    """Linear interpolation of two sets; rotations use hemisphere-corrected
    normalized linear quaternion interpolation. t=0 gives a, t=1 gives b."""
    if a.count != b.count:
        raise DimensionError(f"set counts differ: {a.count} vs {b.count}")
    if a.grid_resolution != b.grid_resolution:
        raise DimensionError(
            f"grid resolutions differ: {a.grid_resolution} vs {b.grid_resolution}"
        )
    if t == 0.0:
        return a
    if t == 1.0:
        return b
    return PrimitiveSet(
        positions=(1 - t) * a.positions + t * b.positions,
        rotations=quat_slerp_linear(a.rotations, b.rotations, t),
        scales=(1 - t) * a.scales + t * b.scales,
        opacity=(1 - t) * a.opacity + t * b.opacity,
        color=(1 - t) * a.color + t * b.color,
    )


def _trilinear_gather(grid_flat: np.ndarray, prim_idx, g, m: int):
    """Trilinear interpolation at grid coords g (n, 3) in [0, M-1]^3 from a
    flattened (N * M^3,) or (C, N * M^3) grid. Returns samples (n,) or (C, n)."""
    g = np.clip(g, 0.0, m - 1)
    i0 = np.minimum(g.astype(np.int64), m - 2)
    f = g - i0
    base = prim_idx * (m * m * m) + i0[:, 0] * (m * m) + i0[:, 1] * m + i0[:, 2]
    wx0, wy0, wz0 = 1 - f[:, 0], 1 - f[:, 1], 1 - f[:, 2]
    wx1, wy1, wz1 = f[:, 0], f[:, 1], f[:, 2]
    out = 0.0
    for dx, wx in ((0, wx0), (m * m, wx1)):
        for dy, wy in ((0, wy0), (m, wy1)):
            for dz, wz in ((0, wz0), (1, wz1)):
                out = out + grid_flat[..., base + dx + dy + dz] * (wx * wy * wz)
    return out


def sample_sets(
    sets: list,
    points: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Density and density-weighted color sums at world points.

    `sets` is a list of PrimitiveSet. Returns (sigma, weighted_color) where
    sigma (n,) is the density summed over every primitive whose box contains
    the point and weighted_color (n, 3) is sum(sigma_i * c_i); divide by sigma
    for the blended color. Points outside all primitives give zeros.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = points.shape[0]
    sigma = np.zeros(n)
    wcolor = np.zeros((n, 3))
    for pset in sets:
        m = pset.grid_resolution
        rot = pset.rotation_matrices()
        # local coords for all (point, primitive) pairs
        rel = points[:, None, :] - pset.positions[None, :, :]
        local = np.einsum("pji,npj->npi", rot, rel) / pset.scales[None, :, :]
        inside = np.all(np.abs(local) <= 1.0, axis=-1)
        pt_idx, pr_idx = np.nonzero(inside)
        if pt_idx.size == 0:
            continue
        g = (local[pt_idx, pr_idx] + 1.0) * 0.5 * (m - 1)
        opa_flat = pset.opacity.reshape(-1)
        col_flat = pset.color.transpose(1, 0, 2, 3, 4).reshape(3, -1)
        s = _trilinear_gather(opa_flat, pr_idx, g, m)
        c = _trilinear_gather(col_flat, pr_idx, g, m)
        np.add.at(sigma, pt_idx, s)
        np.add.at(wcolor, pt_idx, (s[None, :] * c).T)
    return sigma, wcolor


def sample_payload(scene: Scene, point) -> tuple[float, np.ndarray]:
    """Density and density-weighted mean color of a scene at one world point.

    Overlapping primitives blend by density sum with density-weighted color
    (the additive-media rule; the same rule the quadrature oracle integrates).
    Zero density returns a zero color independent of the background.
    """
    sigma, wcolor = sample_sets([pset for _, pset in scene.sets], np.asarray(point, dtype=float))
    s = float(sigma[0])
    if s <= 0.0:
        return 0.0, np.zeros(3)
    return s, wcolor[0] / s
