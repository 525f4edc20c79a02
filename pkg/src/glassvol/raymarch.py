"""Forward differentiable volumetric rendering and its hand-written adjoint.

The marcher samples the scene on a per-ray uniform step grid anchored at the
ray's first box entry, accumulates density-weighted colors per step, and
composites front to back with exponential transmittance:

    T_k = exp(-dt * sum_{k'<k} sigma_k'),   pixel = sum_k T_k * (1 - e^{-sigma_k dt}) * cbar_k

written internally as sum_k T_k * phi(sigma_k) * w_k with w_k the density-
weighted color sum and phi(s) = (1 - e^{-s dt}) / s, which is smooth at s = 0.
The adjoint replays the forward march (nothing is stored between passes) and
scatters gradients back to every primitive's pose and voxel payloads.

Step boundaries move with primitive poses, which the adjoint ignores; pose
gradients are exact in the limit of payloads that taper to zero at the voxel
grid borders (the same condition the continuity invariant needs).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DimensionError, RenderError
from .geom import quat_matrix_backward
from .volprim import PrimitiveSet, Scene

_TILE_RAYS = 1024


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics (3, 3), world-from-camera pose (4, 4),
    resolution (width, height). Camera frame is x right, y down, z forward;
    pixel centers sit at integer + 0.5."""

    intrinsics: np.ndarray
    pose: np.ndarray
    resolution: tuple

    def __post_init__(self):
        k = np.asarray(self.intrinsics, dtype=float).reshape(3, 3)
        pose = np.asarray(self.pose, dtype=float).reshape(4, 4)
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        rot = pose[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise ValueError("pose rotation must be orthonormal within 1e-6")
        w, h = int(self.resolution[0]), int(self.resolution[1])
        if w < 1 or h < 1:
            raise ValueError("resolution must be positive")
        k.flags.writeable = False
        pose.flags.writeable = False
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "pose", pose)
        object.__setattr__(self, "resolution", (w, h))

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Origins (H*W, 3) and unit directions (H*W, 3), row-major pixels."""
        w, h = self.resolution
        u, v = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
        pix = np.stack([u.ravel(), v.ravel(), np.ones(w * h)], axis=-1)
        dirs_cam = pix @ np.linalg.inv(self.intrinsics).T
        dirs_cam /= np.linalg.norm(dirs_cam, axis=-1, keepdims=True)
        dirs = dirs_cam @ self.pose[:3, :3].T
        origins = np.broadcast_to(self.pose[:3, 3], dirs.shape).copy()
        return origins, dirs

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project world points; returns pixel coords (n, 2) and depths (n,)."""
        points = np.atleast_2d(points)
        rot = self.pose[:3, :3]
        cam = (points - self.pose[:3, 3]) @ rot
        depths = cam[:, 2]
        proj = cam @ self.intrinsics.T
        return proj[:, :2] / proj[:, 2:3], depths

    def projection_matrix(self) -> np.ndarray:
        """3x4 matrix mapping homogeneous world points to pixel coordinates."""
        rot = self.pose[:3, :3].T
        t = -rot @ self.pose[:3, 3]
        return self.intrinsics @ np.concatenate([rot, t[:, None]], axis=1)


@dataclass(frozen=True)
class Image:
    """Float image, (height, width, channels) with channels 1 (mask) or 3."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise DimensionError(f"image must be (H, W, 1|3), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image contains non-finite samples")
        data = np.ascontiguousarray(data)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class RenderConfig:
    step_size: float = 0.01
    max_steps: int = 1024
    early_stop_transmittance: float = 1e-3

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if not (0.0 < self.early_stop_transmittance < 1.0):
            raise ValueError("early_stop_transmittance must be in (0, 1)")


@dataclass
class PrimitiveSetGradients:
    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacity: np.ndarray
    color: np.ndarray

    @classmethod
    def zeros(cls, pset: PrimitiveSet) -> "PrimitiveSetGradients":
        return cls(
            np.zeros_like(pset.positions),
            np.zeros_like(pset.rotations),
            np.zeros_like(pset.scales),
            np.zeros_like(pset.opacity),
            np.zeros_like(pset.color),
        )

    def add_(self, other: "PrimitiveSetGradients") -> None:
        self.positions += other.positions
        self.rotations += other.rotations
        self.scales += other.scales
        self.opacity += other.opacity
        self.color += other.color


@dataclass
class SceneGradients:
    """Per-label gradients of a scalar loss w.r.t. every primitive parameter."""

    sets: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, scene: Scene) -> "SceneGradients":
        return cls({label: PrimitiveSetGradients.zeros(pset) for label, pset in scene.sets})

    def add_(self, other: "SceneGradients") -> None:
        for label, grads in other.sets.items():
            self.sets[label].add_(grads)


# ---------------------------------------------------------------------------
# Acceleration structure


def _world_aabbs(pset: PrimitiveSet) -> tuple[np.ndarray, np.ndarray]:
    half = np.einsum("nij,nj->ni", np.abs(pset.rotation_matrices()), pset.scales)
    return pset.positions - half, pset.positions + half


class AccelStructure:
    """Median-split BVH over the scene's oriented primitive boxes.

    Queries run batched: AABB traversal prunes with per-node ray masks, then
    an exact oriented-slab test on the surviving (ray, primitive) pairs yields
    entry/exit distances. Grazing hits (entry == exit) are dropped.
    """

    def __init__(self, scene: Scene, leaf_size: int = 4):
        self.set_labels = [label for label, _ in scene.sets]
        self.set_offsets = np.cumsum([0] + [p.count for _, p in scene.sets])
        self.positions = np.concatenate([p.positions for _, p in scene.sets])
        self.rotmats = np.concatenate([p.rotation_matrices() for _, p in scene.sets])
        self.scales = np.concatenate([p.scales for _, p in scene.sets])
        lo, hi = zip(*[_world_aabbs(p) for _, p in scene.sets])
        self.aabb_lo = np.concatenate(lo)
        self.aabb_hi = np.concatenate(hi)
        n = self.positions.shape[0]
        self.order = np.arange(n)
        self._lo, self._hi, self._left, self._right = [], [], [], []
        self._start, self._count = [], []
        self._build(0, n, leaf_size)
        self.node_lo = np.array(self._lo)
        self.node_hi = np.array(self._hi)
        self.node_left = np.array(self._left)
        self.node_right = np.array(self._right)
        self.node_start = np.array(self._start)
        self.node_count = np.array(self._count)

    def _build(self, start: int, end: int, leaf_size: int) -> int:
        idx = self.order[start:end]
        lo = self.aabb_lo[idx].min(axis=0)
        hi = self.aabb_hi[idx].max(axis=0)
        node = len(self._lo)
        self._lo.append(lo)
        self._hi.append(hi)
        self._left.append(-1)
        self._right.append(-1)
        self._start.append(start)
        self._count.append(end - start)
        if end - start > leaf_size:
            axis = int(np.argmax(hi - lo))
            centers = 0.5 * (self.aabb_lo[idx, axis] + self.aabb_hi[idx, axis])
            half = (end - start) // 2
            part = np.argpartition(centers, half)
            self.order[start:end] = idx[part]
            self._count[node] = 0
            self._left[node] = self._build(start, start + half, leaf_size)
            self._right[node] = self._build(start + half, end, leaf_size)
        return node

    def _aabb_hits(self, node, origins, dirs, t0, t1, rays):
        o = origins[rays]
        inv = np.where(dirs[rays] != 0.0, 1.0 / np.where(dirs[rays] == 0, 1.0, dirs[rays]), np.inf)
        ta = (self.node_lo[node] - o) * inv
        tb = (self.node_hi[node] - o) * inv
        parallel = dirs[rays] == 0.0
        outside = parallel & ((o < self.node_lo[node]) | (o > self.node_hi[node]))
        tmin = np.where(parallel, -np.inf, np.minimum(ta, tb)).max(axis=1)
        tmax = np.where(parallel, np.inf, np.maximum(ta, tb)).min(axis=1)
        ok = (tmin <= tmax) & (tmax >= t0[rays]) & (tmin <= t1[rays]) & ~outside.any(axis=1)
        return rays[ok]

    def candidates(self, origins, dirs, t0, t1):
        """(ray_idx, prim_idx) pairs whose AABBs the rays hit."""
        pairs_r, pairs_p = [], []
        stack = [(0, np.arange(origins.shape[0]))]
        while stack:
            node, rays = stack.pop()
            rays = self._aabb_hits(node, origins, dirs, t0, t1, rays)
            if rays.size == 0:
                continue
            if self.node_count[node] > 0:
                s, c = self.node_start[node], self.node_count[node]
                prims = self.order[s : s + c]
                pairs_r.append(np.repeat(rays, prims.size))
                pairs_p.append(np.tile(prims, rays.size))
            else:
                stack.append((self.node_left[node], rays))
                stack.append((self.node_right[node], rays))
        if not pairs_r:
            e = np.empty(0, dtype=np.int64)
            return e, e.copy()
        return np.concatenate(pairs_r), np.concatenate(pairs_p)

    def query(self, origins, dirs, t0=None, t1=None):
        """Exact oriented-box hits for a batch of rays.

        Returns (ray_idx, prim_idx, t_entry, t_exit) sorted by (ray, prim),
        with the interval clipped to [t0, t1]. prim_idx is a global index;
        split per set with `set_offsets`.
        """
        origins = np.atleast_2d(np.asarray(origins, dtype=float))
        dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
        p = origins.shape[0]
        t0 = np.zeros(p) if t0 is None else np.broadcast_to(np.asarray(t0, dtype=float), (p,))
        t1 = np.full(p, np.inf) if t1 is None else np.broadcast_to(np.asarray(t1, dtype=float), (p,))
        ray_idx, prim_idx = self.candidates(origins, dirs, t0, t1)
        if ray_idx.size == 0:
            e = np.empty(0, dtype=np.int64)
            return e, e.copy(), np.empty(0), np.empty(0)
        rel = origins[ray_idx] - self.positions[prim_idx]
        rm = self.rotmats[prim_idx]
        o_l = np.einsum("nji,nj->ni", rm, rel) / self.scales[prim_idx]
        d_l = np.einsum("nji,nj->ni", rm, dirs[ray_idx]) / self.scales[prim_idx]
        parallel = np.abs(d_l) < 1e-300
        safe_d = np.where(parallel, 1.0, d_l)
        ta = (-1.0 - o_l) / safe_d
        tb = (1.0 - o_l) / safe_d
        inside = np.abs(o_l) <= 1.0
        tmin_ax = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(ta, tb))
        tmax_ax = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(ta, tb))
        t_in = np.maximum(tmin_ax.max(axis=1), t0[ray_idx])
        t_out = np.minimum(tmax_ax.min(axis=1), t1[ray_idx])
        keep = t_in < t_out
        ray_idx, prim_idx = ray_idx[keep], prim_idx[keep]
        t_in, t_out = t_in[keep], t_out[keep]
        order = np.lexsort((prim_idx, ray_idx))
        return ray_idx[order], prim_idx[order], t_in[order], t_out[order]


def build_accel(scene: Scene) -> AccelStructure:
    return AccelStructure(scene)


# ---------------------------------------------------------------------------
# March kernel


def _phi(sigma: np.ndarray, dt: float) -> np.ndarray:
    """(1 - exp(-sigma*dt)) / sigma, smooth at zero (limit dt)."""
    with np.errstate(invalid="ignore", divide="ignore"):
        out = -np.expm1(-sigma * dt) / sigma
    return np.where(sigma > 0.0, out, dt)


def _phi_prime(sigma: np.ndarray, dt: float) -> np.ndarray:
    x = sigma * dt
    small = x < 1e-3
    safe = np.where(small, 1.0, sigma)
    with np.errstate(invalid="ignore", divide="ignore"):
        direct = (dt * safe * np.exp(-x) + np.expm1(-x)) / safe**2
    series = dt * dt * (-0.5 + x / 3.0 - x * x / 8.0)
    return np.where(small, series, direct)


def _validate_scene(scene: Scene) -> None:
    for label, pset in scene.sets:
        for name, arr in (
            ("opacity", pset.opacity),
            ("color", pset.color),
            ("positions", pset.positions),
            ("scales", pset.scales),
        ):
            finite = np.isfinite(arr).reshape(arr.shape[0], -1).all(axis=1)
            if not finite.all():
                idx = int(np.argmin(finite))
                raise RenderError(
                    f"non-finite {name} in set {label!r}, primitive index {idx}"
                )


class _SetData:
    """Cached per-set arrays the kernel samples from."""

    def __init__(self, label: str, pset: PrimitiveSet, tagged: bool):
        self.label = label
        self.pset = pset
        self.tagged = tagged
        self.m = pset.grid_resolution
        self.rotmats = pset.rotation_matrices()
        self.opa_flat = pset.opacity.reshape(-1)
        self.col_flat = pset.color.transpose(1, 0, 2, 3, 4).reshape(3, -1)


def _expand_hits(t_in, t_out, anchor, ray_idx, dt, kmax):
    """Step indices covered by each hit interval on the per-ray grid
    t = anchor + (k + 0.5) * dt. Returns flat (hit_id, k) arrays."""
    a = anchor[ray_idx]
    k0 = np.maximum(np.ceil((t_in - a) / dt - 0.5), 0).astype(np.int64)
    k1 = np.minimum(np.floor((t_out - a) / dt - 0.5), kmax[ray_idx] - 1).astype(np.int64)
    counts = np.maximum(k1 - k0 + 1, 0)
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    hit_id = np.repeat(np.arange(len(counts)), counts)
    offs = np.concatenate([[0], np.cumsum(counts)[:-1]])
    k = np.arange(total) - np.repeat(offs, counts) + np.repeat(k0, counts)
    return hit_id, k


class _TileResult:
    __slots__ = ("rgb", "alpha", "own", "grads")

    def __init__(self, rgb, alpha, own, grads=None):
        self.rgb = rgb
        self.alpha = alpha
        self.own = own
        self.grads = grads


def _march_tile(
    sets: list,
    accel: AccelStructure,
    origins: np.ndarray,
    dirs: np.ndarray,
    background: np.ndarray,
    config: RenderConfig,
    *,
    t0=None,
    t1=None,
    own_label: str | None = None,
    early_stop: bool = True,
    grad_rgb=None,
    grad_alpha=None,
    grad_own=None,
) -> _TileResult:
    p = origins.shape[0]
    dt = config.step_size
    want_grads = grad_rgb is not None or grad_alpha is not None or grad_own is not None
    nch = 4 if own_label is not None else 3

    background = np.broadcast_to(np.asarray(background, dtype=float), (p, 3))
    ray_idx, prim_idx, t_in, t_out = accel.query(origins, dirs, t0, t1)
    if ray_idx.size == 0:
        grads = {s.label: PrimitiveSetGradients.zeros(s.pset) for s in sets} if want_grads else None
        return _TileResult(background.copy(), np.zeros(p), np.zeros(p), grads)

    anchor = np.full(p, np.inf)
    far = np.zeros(p)
    np.minimum.at(anchor, ray_idx, t_in)
    np.maximum.at(far, ray_idx, t_out)
    anchor = np.where(np.isfinite(anchor), anchor, 0.0)
    # snap the grid to global multiples of dt: sample positions then do not
    # move with primitive poses (clean adjoint) and interval splits partition
    anchor = np.floor(anchor / dt) * dt
    kmax = np.minimum(np.ceil((far - anchor) / dt), config.max_steps).astype(np.int64)
    kmax = np.maximum(kmax, 0)
    kcap = max(int(kmax.max()), 1)

    # per-hit set membership via global offsets
    offsets = accel.set_offsets
    set_of_hit = np.searchsorted(offsets, prim_idx, side="right") - 1

    sig = np.zeros(p * kcap)
    wch = np.zeros((nch, p * kcap))
    per_set = []
    for si, sd in enumerate(sets):
        sel = np.nonzero(set_of_hit == si)[0]
        r = ray_idx[sel]
        pr = prim_idx[sel] - offsets[si]
        hit_id, k = _expand_hits(t_in[sel], t_out[sel], anchor, r, dt, kmax)
        r = r[hit_id]
        pr = pr[hit_id]
        if r.size == 0:
            per_set.append(None)
            continue
        t = anchor[r] + (k + 0.5) * dt
        x = origins[r] + t[:, None] * dirs[r]
        rel = x - sd.pset.positions[pr]
        rm = sd.rotmats[pr]
        scl = sd.pset.scales[pr]
        local = np.einsum("nji,nj->ni", rm, rel) / scl
        g = np.clip((local + 1.0) * 0.5 * (sd.m - 1), 0.0, sd.m - 1)
        i0 = np.minimum(g.astype(np.int64), sd.m - 2)
        f = g - i0
        mm = sd.m
        base = pr * mm**3 + i0[:, 0] * mm**2 + i0[:, 1] * mm + i0[:, 2]
        wx = np.stack([1 - f[:, 0], f[:, 0]], axis=0)
        wy = np.stack([1 - f[:, 1], f[:, 1]], axis=0)
        wz = np.stack([1 - f[:, 2], f[:, 2]], axis=0)
        # corner order matches corner_off: z fastest, then y, then x
        wts = np.empty((8, r.size))
        ci = 0
        for ix in range(2):
            for iy in range(2):
                for iz in range(2):
                    wts[ci] = wx[ix] * wy[iy] * wz[iz]
                    ci += 1
        cidx = base[None, :] + np.array(
            [0, 1, mm, mm + 1, mm**2, mm**2 + 1, mm**2 + mm, mm**2 + mm + 1]
        )[:, None]
        s_t = np.einsum("cn,cn->n", wts, sd.opa_flat[cidx])
        c_t = np.einsum("cn,kcn->kn", wts, sd.col_flat[:, cidx])
        bins = r * kcap + k
        sig += np.bincount(bins, weights=s_t, minlength=p * kcap)
        for ch in range(3):
            wch[ch] += np.bincount(bins, weights=s_t * c_t[ch], minlength=p * kcap)
        if own_label is not None and sd.tagged:
            wch[3] += np.bincount(bins, weights=s_t, minlength=p * kcap)
        per_set.append(
            dict(r=r, pr=pr, bins=bins, x=x, rel=rel, local=local, g=g, i0=i0, f=f,
                 base=base, wts=wts, cidx=cidx, s_t=s_t, c_t=c_t)
            if want_grads
            else None
        )

    sig = sig.reshape(p, kcap)
    wch = wch.reshape(nch, p, kcap)

    # mask out steps beyond each ray's own range
    step_live = np.arange(kcap)[None, :] < kmax[:, None]
    sig = np.where(step_live, sig, 0.0)
    wch = np.where(step_live[None], wch, 0.0)

    tau = np.cumsum(sig * dt, axis=1)
    t_before = np.exp(-np.concatenate([np.zeros((p, 1)), tau[:, :-1]], axis=1))
    if early_stop and not want_grads:
        live = t_before >= config.early_stop_transmittance
        sig = np.where(live, sig, 0.0)
        wch = np.where(live[None], wch, 0.0)
        tau = np.cumsum(sig * dt, axis=1)
        t_before = np.exp(-np.concatenate([np.zeros((p, 1)), tau[:, :-1]], axis=1))
    t_final = np.exp(-tau[:, -1]) if kcap > 0 else np.ones(p)

    phi = _phi(sig, dt)
    contrib = t_before * phi  # (p, kcap)
    rgb = np.einsum("pk,cpk->pc", contrib, wch[:3]) + t_final[:, None] * background
    alpha = 1.0 - t_final
    own = np.einsum("pk,pk->p", contrib, wch[3]) if own_label is not None else np.zeros(p)

    if not want_grads:
        return _TileResult(rgb, alpha, own, None)

    # ------------------------------------------------------------------ adjoint
    g_rgb = np.zeros((p, 3)) if grad_rgb is None else grad_rgb
    g_alpha = np.zeros(p) if grad_alpha is None else grad_alpha
    g_own = np.zeros(p) if grad_own is None else grad_own

    gch = np.concatenate([g_rgb.T, g_own[None]], axis=0) if nch == 4 else g_rgb.T  # (nch, p)

    # w_bar[ch, p, k] = g_ch * T_k * phi_k
    w_bar = gch[:, :, None] * contrib[None]
    # radiance suffix per channel, weighted by upstream grads:
    # S[p, k] = sum_ch g_ch * ( sum_{k'>k} T phi w  + T_final * bg_ch )
    seg = np.einsum("cp,cpk->pk", gch, wch) * contrib
    suffix = np.cumsum(seg[:, ::-1], axis=1)[:, ::-1]
    suffix = np.concatenate([suffix[:, 1:], np.zeros((p, 1))], axis=1)
    bg_term = t_final * np.einsum("pc,pc->p", g_rgb, background)
    suffix = suffix + bg_term[:, None]
    sig_bar = (
        np.einsum("cp,cpk->pk", gch, wch) * t_before * _phi_prime(sig, dt)
        - dt * suffix
        + dt * (g_alpha * t_final)[:, None]
    )
    sig_bar = np.where(step_live, sig_bar, 0.0)
    w_bar = np.where(step_live[None], w_bar, 0.0)

    sig_bar_flat = sig_bar.reshape(-1)
    w_bar_flat = w_bar.reshape(nch, -1)

    grads = {}
    for si, sd in enumerate(sets):
        gout = PrimitiveSetGradients.zeros(sd.pset)
        grads[sd.label] = gout
        cache = per_set[si]
        if cache is None:
            continue
        r, pr = cache["r"], cache["pr"]
        bins = cache["bins"]
        wts, cidx = cache["wts"], cache["cidx"]
        s_t, c_t = cache["s_t"], cache["c_t"]
        f, i0 = cache["f"], cache["i0"]
        mm = sd.m
        sb = sig_bar_flat[bins]
        wb3 = w_bar_flat[:3, bins]
        # dL/ds_t: via sigma_k and via w_k = sum s_t * c_t (+ tag channel)
        ds = sb + np.einsum("kn,kn->n", wb3, c_t)
        if nch == 4 and sd.tagged:
            ds = ds + w_bar_flat[3, bins]
        dc = wb3 * s_t[None]  # (3, n)

        # voxel gradients
        n_vox = sd.opa_flat.size
        opa_g = np.zeros(n_vox)
        col_g = np.zeros((3, n_vox))
        for ci in range(8):
            idx = cidx[ci]
            opa_g += np.bincount(idx, weights=ds * wts[ci], minlength=n_vox)
            for ch in range(3):
                col_g[ch] += np.bincount(idx, weights=dc[ch] * wts[ci], minlength=n_vox)
        gout.opacity += opa_g.reshape(sd.pset.opacity.shape)
        gout.color += col_g.reshape(3, sd.pset.count, mm, mm, mm).transpose(1, 0, 2, 3, 4)

        # pose gradients via d sample / d local coords
        opa_c = sd.opa_flat[cidx]  # (8, n)
        col_c = sd.col_flat[:, cidx]  # (3, 8, n)
        w2 = [np.stack([1 - f[:, a], f[:, a]], axis=0) for a in range(3)]
        dwdg = np.empty((3, 8, r.size))
        ci = 0
        for ix in range(2):
            for iy in range(2):
                for iz in range(2):
                    sx = (1.0 if ix else -1.0)
                    sy = (1.0 if iy else -1.0)
                    sz = (1.0 if iz else -1.0)
                    dwdg[0, ci] = sx * w2[1][iy] * w2[2][iz]
                    dwdg[1, ci] = w2[0][ix] * sy * w2[2][iz]
                    dwdg[2, ci] = w2[0][ix] * w2[1][iy] * sz
                    ci += 1
        ds_dg = np.einsum("acn,cn->an", dwdg, opa_c)  # (3, n)
        dc_dg = np.einsum("acn,kcn->kan", dwdg, col_c)  # (3, 3axes, n) -> (ch, axis, n)
        # zero the derivative where g was clipped to the border
        g = cache["g"]
        interior = (g > 0.0) & (g < sd.m - 1)
        ds_dg = ds_dg * interior.T
        dc_dg = dc_dg * interior.T[None]
        delta_g = ds[None] * ds_dg + np.einsum("kn,kan->an", dc, dc_dg)  # (3, n)
        delta_u = delta_g * (0.5 * (sd.m - 1))

        rm = sd.rotmats[pr]
        scl = sd.pset.scales[pr]
        local = cache["local"]
        rel = cache["rel"]
        du_scaled = (delta_u / scl.T).T  # (n, 3) = delta_u_i / s_i
        d_pos = -np.einsum("nij,nj->ni", rm, du_scaled)
        d_scale = -(delta_u.T * local / scl)
        d_rot = rel[:, :, None] * du_scaled[:, None, :]  # (n, 3world, 3local) = dL/dR_{mi}

        np.add.at(gout.positions, pr, d_pos)
        np.add.at(gout.scales, pr, d_scale)
        rot_g = np.zeros((sd.pset.count, 3, 3))
        np.add.at(rot_g, pr, d_rot)
        gout.rotations += quat_matrix_backward(sd.pset.rotations, rot_g)

    return _TileResult(rgb, alpha, own, grads)


def _run_tiles(
    scene: Scene,
    origins,
    dirs,
    config: RenderConfig,
    *,
    t0=None,
    t1=None,
    own_label=None,
    labels=None,
    early_stop=True,
    background=None,
    grad_rgb=None,
    grad_alpha=None,
    grad_own=None,
    workers: int = 1,
):
    """Tile the ray batch, march (and optionally differentiate) each tile,
    and merge results in tile order so outputs do not depend on `workers`."""
    _validate_scene(scene)
    use_sets = [
        (label, pset) for label, pset in scene.sets if labels is None or label in labels
    ]
    if not use_sets:
        raise KeyError(f"no set matches labels {labels}; have {scene.labels}")
    sub = Scene(tuple(use_sets), scene.background)
    sets = [_SetData(label, pset, label == own_label) for label, pset in sub.sets]
    accel = AccelStructure(sub)
    p = origins.shape[0]
    if background is None:
        background = np.broadcast_to(sub.background, (p, 3))
    else:
        background = np.broadcast_to(np.asarray(background, dtype=float), (p, 3))
    if t0 is not None:
        t0 = np.broadcast_to(np.asarray(t0, dtype=float), (p,))
    if t1 is not None:
        t1 = np.broadcast_to(np.asarray(t1, dtype=float), (p,))
    tiles = [slice(i, min(i + _TILE_RAYS, p)) for i in range(0, p, _TILE_RAYS)]

    def job(sl):
        return _march_tile(
            sets,
            accel,
            origins[sl],
            dirs[sl],
            background[sl],
            config,
            t0=None if t0 is None else t0[sl],
            t1=None if t1 is None else t1[sl],
            own_label=own_label,
            early_stop=early_stop,
            grad_rgb=None if grad_rgb is None else grad_rgb[sl],
            grad_alpha=None if grad_alpha is None else grad_alpha[sl],
            grad_own=None if grad_own is None else grad_own[sl],
        )

    if workers > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, tiles))
    else:
        results = [job(sl) for sl in tiles]

    rgb = np.concatenate([r.rgb for r in results])
    alpha = np.concatenate([r.alpha for r in results])
    own = np.concatenate([r.own for r in results])
    grads = None
    if results[0].grads is not None:
        grads = SceneGradients({label: PrimitiveSetGradients.zeros(pset) for label, pset in sub.sets})
        for r in results:
            for label, g in r.grads.items():
                grads.sets[label].add_(g)
    return rgb, alpha, own, grads


def render(scene: Scene, camera: Camera, config: RenderConfig, workers: int = 1) -> Image:
    """Render a scene to a linear-RGB image, compositing onto the scene
    background. Deterministic for fixed inputs regardless of worker count."""
    origins, dirs = camera.rays()
    rgb, _, _, _ = _run_tiles(scene, origins, dirs, config, workers=workers)
    return Image(rgb.reshape(camera.height, camera.width, 3))


def render_rays(
    scene: Scene,
    origins: np.ndarray,
    dirs: np.ndarray,
    config: RenderConfig,
    *,
    t0=None,
    t1=None,
    background=None,
    workers: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """March explicit rays (optionally clipped to [t0, t1] and composited
    onto a per-ray background); returns (rgb (p, 3), alpha (p,))."""
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    rgb, alpha, _, _ = _run_tiles(
        scene, origins, dirs, config, t0=t0, t1=t1, background=background, workers=workers
    )
    return rgb, alpha


def render_alpha(
    scene: Scene, camera: Camera, config: RenderConfig, labels=None, workers: int = 1
) -> Image:
    """Accumulated alpha (1 - final transmittance), optionally counting only
    the density of the sets named in `labels`."""
    origins, dirs = camera.rays()
    _, alpha, _, _ = _run_tiles(scene, origins, dirs, config, labels=labels, workers=workers)
    return Image(alpha.reshape(camera.height, camera.width, 1))


def render_mask(
    scene: Scene, camera: Camera, config: RenderConfig, label: str, workers: int = 1
) -> tuple[Image, Image]:
    """Silhouette and ownership masks for one labeled set.

    The silhouette is the accumulated alpha of a march through the labeled
    set alone. The ownership image marches the composed scene and reports the
    labeled set's absolute contribution to each pixel's accumulated alpha
    (a value in [0, alpha]; occluded labeled density contributes ~0).
    """
    if label not in scene.labels:
        raise KeyError(f"unknown label {label!r}; have {scene.labels}")
    origins, dirs = camera.rays()
    _, alpha, _, _ = _run_tiles(scene, origins, dirs, config, labels=[label], workers=workers)
    _, _, own, _ = _run_tiles(scene, origins, dirs, config, own_label=label, workers=workers)
    h, w = camera.height, camera.width
    return Image(alpha.reshape(h, w, 1)), Image(own.reshape(h, w, 1))


def render_backward(
    scene: Scene,
    camera: Camera,
    config: RenderConfig,
    dloss_dimage: np.ndarray | None = None,
    *,
    dloss_dalpha: np.ndarray | None = None,
    dloss_downership: np.ndarray | None = None,
    ownership_label: str | None = None,
    labels=None,
    workers: int = 1,
) -> SceneGradients:
    """Gradients of a scalar loss w.r.t. every primitive parameter.

    Replays the forward march (early stop disabled so forward and adjoint see
    the same truncation) and accumulates per-worker gradients merged in a
    fixed tile order. dloss_dimage must match the render resolution.
    """
    h, w = camera.height, camera.width
    grad_rgb = None
    if dloss_dimage is not None:
        dloss_dimage = np.asarray(dloss_dimage, dtype=float)
        if dloss_dimage.shape != (h, w, 3):
            raise DimensionError(
                f"upstream gradient shape {dloss_dimage.shape} != {(h, w, 3)}"
            )
        grad_rgb = dloss_dimage.reshape(-1, 3)
    grad_alpha = None
    if dloss_dalpha is not None:
        dloss_dalpha = np.asarray(dloss_dalpha, dtype=float)
        if dloss_dalpha.shape[:2] != (h, w):
            raise DimensionError(f"alpha gradient shape {dloss_dalpha.shape} != {(h, w)}")
        grad_alpha = dloss_dalpha.reshape(-1)
    grad_own = None
    if dloss_downership is not None:
        dloss_downership = np.asarray(dloss_downership, dtype=float)
        if dloss_downership.shape[:2] != (h, w):
            raise DimensionError(
                f"ownership gradient shape {dloss_downership.shape} != {(h, w)}"
            )
        grad_own = dloss_downership.reshape(-1)
        if ownership_label is None:
            raise ValueError("ownership gradient requires ownership_label")
    if grad_rgb is None and grad_alpha is None and grad_own is None:
        raise ValueError("no upstream gradient supplied")
    origins, dirs = camera.rays()
    _, _, _, grads = _run_tiles(
        scene,
        origins,
        dirs,
        config,
        own_label=ownership_label,
        labels=labels,
        early_stop=False,
        grad_rgb=grad_rgb if grad_rgb is not None else np.zeros((origins.shape[0], 3)),
        grad_alpha=grad_alpha,
        grad_own=grad_own,
        workers=workers,
    )
    full = SceneGradients.zeros(scene)
    for label, g in grads.sets.items():
        full.sets[label] = g
    return full


# ---------------------------------------------------------------------------
# Image metrics


def psnr(a: Image, b: Image) -> float:
    """Peak signal-to-noise ratio in dB over [0, 1]-scaled images, capped at
    100 dB for (near-)identical inputs."""
    if a.data.shape != b.data.shape:
        raise DimensionError(f"image shapes differ: {a.data.shape} vs {b.data.shape}")
    mse = float(np.mean((a.data - b.data) ** 2))
    if mse <= 1e-10:
        return 100.0
    return min(100.0, -10.0 * np.log10(mse))


def ssim(a: Image, b: Image) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5)
    and the standard constants K1=0.01, K2=0.03 on unit dynamic range."""
    if a.data.shape != b.data.shape:
        raise DimensionError(f"image shapes differ: {a.data.shape} vs {b.data.shape}")
    c1, c2 = 0.01**2, 0.03**2
    sig = 1.5
    trunc = 5.0 / sig  # 11-tap window

    def blur(x):
        return gaussian_filter(x, sigma=sig, truncate=trunc, mode="reflect")

    vals = []
    for ch in range(a.data.shape[2]):
        x, y = a.data[:, :, ch], b.data[:, :, ch]
        mx, my = blur(x), blur(y)
        vx = blur(x * x) - mx * mx
        vy = blur(y * y) - my * my
        cxy = blur(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))
