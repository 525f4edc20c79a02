"""Synthetic data harness: procedural heads and tube-frame glasses with
analytic shading, assembled into two-stage training datasets with ground
truth rendered by the quadrature oracle (never the production renderer).

The generator's styles vary smoothly (ring radius, thickness, albedo,
specular weights are affine in the style parameters), so latent
interpolation between trained instances can span held-out instances.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import fileio, oracle
from .errors import DataError
from .geom import look_at, quat_multiply, quat_normalize, rotvec_to_quat
from .morph.decoders import _frames_from_normals, taper_grid
from .raymarch import Camera, Image
from .relight import PointLight, specular_feature, voxel_centers
from .rig import TriMesh
from .volprim import PrimitiveSet, Scene

DATASET_FORMAT = "glassvol-dataset"


@dataclass(frozen=True)
class HeadStyle:
    radii: tuple = (0.42, 0.55, 0.45)
    albedo: tuple = (0.72, 0.52, 0.42)


@dataclass(frozen=True)
class GlassesStyle:
    ring_radius: float = 0.16
    bridge_width: float = 0.10
    thickness: float = 0.035
    albedo: tuple = (0.25, 0.35, 0.65)
    diffuse: float = 0.7
    spec_weights: tuple = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    heads: tuple = (HeadStyle(), HeadStyle(radii=(0.46, 0.52, 0.47), albedo=(0.55, 0.42, 0.35)))
    glasses: tuple = (
        GlassesStyle(),
        GlassesStyle(ring_radius=0.19, thickness=0.045, albedo=(0.55, 0.2, 0.2),
                     diffuse=0.45, spec_weights=(0.12, 0.12, 0.2)),
        GlassesStyle(ring_radius=0.14, bridge_width=0.12, thickness=0.028,
                     albedo=(0.2, 0.5, 0.3), diffuse=0.6, spec_weights=(0.06, 0.06, 0.1)),
    )
    face_prims_side: int = 8
    glasses_prims: int = 16
    grid_resolution: int = 4
    n_cameras: int = 6
    camera_radius: float = 2.6
    image_size: int = 48
    n_lights: int = 8
    light_radius: float = 3.0
    light_intensity: float = 1.0
    ambient: float = 0.14
    head_density: float = 9.0
    glasses_density: float = 14.0
    fully_lit_per_combo: int = 3
    group_lit_between: int = 2
    motion_amplitude: float = 1.0
    oracle_step: float = 0.004
    background: tuple = (0.0, 0.0, 0.0)

    @property
    def face_prims(self) -> int:
        return self.face_prims_side**2


def default_spec(seed: int = 0, **overrides) -> SynthSpec:
    return SynthSpec(seed=seed, **overrides)


def blend_styles(a: GlassesStyle, b: GlassesStyle, t: float) -> GlassesStyle:
    lerp = lambda x, y: tuple(np.asarray(x) * (1 - t) + np.asarray(y) * t) if isinstance(x, tuple) else (1 - t) * x + t * y
    return GlassesStyle(
        ring_radius=lerp(a.ring_radius, b.ring_radius),
        bridge_width=lerp(a.bridge_width, b.bridge_width),
        thickness=lerp(a.thickness, b.thickness),
        albedo=lerp(a.albedo, b.albedo),
        diffuse=lerp(a.diffuse, b.diffuse),
        spec_weights=lerp(a.spec_weights, b.spec_weights),
    )


# ---------------------------------------------------------------------------
# Head geometry


def head_layout(head: HeadStyle, n_side: int, expression=(0.0, 0.0)):
    """Primitive frames tiling the head ellipsoid; the first expression
    parameter squashes the vertical radius, the second widens the head."""
    radii = np.asarray(head.radii, dtype=float) * (
        1.0 + 0.05 * expression[0] * np.array([0.0, 1.0, 0.0])
        + 0.03 * expression[1] * np.array([1.0, 0.0, 0.0])
    )
    thetas = np.linspace(0.25 * np.pi, 0.75 * np.pi, n_side)
    phis = np.linspace(-0.95 * np.pi, 0.95 * np.pi, n_side)
    tt, pp = np.meshgrid(thetas, phis, indexing="ij")
    unit = np.stack(
        [np.sin(tt) * np.sin(pp), np.cos(tt), np.sin(tt) * np.cos(pp)], axis=-1
    ).reshape(-1, 3)
    positions = unit * radii
    normals = unit / radii
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    quats = _frames_from_normals(normals)
    span_t = radii.mean() * (thetas[1] - thetas[0])
    span_p = radii.mean() * (phis[1] - phis[0])
    scales = np.tile([0.75 * span_p, 0.75 * span_t, 0.06], (positions.shape[0], 1))
    return positions, quats, scales, radii


def _albedo_texture(points: np.ndarray, albedo) -> np.ndarray:
    """Smooth low-frequency texture around a base albedo, in (0.05, 0.95)."""
    albedo = np.asarray(albedo, dtype=float)
    wave = (
        0.5 * np.sin(3.0 * points[..., 0] + 1.0)
        * np.sin(2.5 * points[..., 1] - 0.5)
        + 0.5 * np.sin(2.0 * points[..., 2])
    )
    tex = albedo * (1.0 + 0.18 * wave[..., None])
    return np.clip(tex, 0.05, 0.95)


def face_set(spec: SynthSpec, head_id: int, expression=(0.0, 0.0)) -> PrimitiveSet:
    head = spec.heads[head_id]
    positions, quats, scales, _ = head_layout(head, spec.face_prims_side, expression)
    m = spec.grid_resolution
    n = positions.shape[0]
    taper = taper_grid(m).reshape(m, m, m)
    opacity = np.broadcast_to(spec.head_density * taper, (n, m, m, m)).copy()
    pset = PrimitiveSet(positions, quats, scales, opacity, np.full((n, 3, m, m, m), 0.5))
    centers = voxel_centers(pset)  # (n, m^3, 3)
    tex = _albedo_texture(centers, head.albedo)  # (n, m^3, 3)
    color = tex.transpose(0, 2, 1).reshape(n, 3, m, m, m)
    return replace(pset, color=color)


def head_voxel_normals(spec: SynthSpec, head_id: int, pset: PrimitiveSet, expression=(0.0, 0.0)):
    """Analytic ellipsoid normals at voxel centers, (N, M^3, 3)."""
    head = spec.heads[head_id]
    radii = np.asarray(head.radii, dtype=float) * (
        1.0 + 0.05 * expression[0] * np.array([0.0, 1.0, 0.0])
        + 0.03 * expression[1] * np.array([1.0, 0.0, 0.0])
    )
    centers = voxel_centers(pset)
    n = centers / (radii**2)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Glasses geometry


def glasses_layout(style: GlassesStyle, n_prims: int):
    """Canonical primitive frames tracing two rings plus a bridge in the z=0
    plane. Matches the convention of morph.decoders.ring_glasses_layout."""
    per_ring = max((n_prims - 2) // 2, 3)
    centers, quats, scales = [], [], []
    offset = style.bridge_width / 2 + style.ring_radius
    for sign in (-1.0, 1.0):
        cx = sign * offset
        angs = np.linspace(0, 2 * np.pi, per_ring, endpoint=False)
        arc = 2 * np.pi * style.ring_radius / per_ring
        for a in angs:
            centers.append([cx + style.ring_radius * np.cos(a), style.ring_radius * np.sin(a), 0.0])
            tangent = np.array([-np.sin(a), np.cos(a), 0.0])
            quats.append(_frames_from_normals(np.array([[0.0, 0, 1]]), x_hint=tangent)[0])
            scales.append([0.62 * arc, style.thickness, style.thickness])
    for _ in range(n_prims - 2 * per_ring):
        centers.append([0.0, style.ring_radius * 0.9, 0.0])
        quats.append([1.0, 0.0, 0.0, 0.0])
        scales.append([style.bridge_width * 0.7, style.thickness, style.thickness])
    return np.asarray(centers), np.asarray(quats, dtype=float), np.asarray(scales)


def glasses_canonical(spec: SynthSpec, glasses_id: int) -> PrimitiveSet:
    style = spec.glasses[glasses_id]
    positions, quats, scales = glasses_layout(style, spec.glasses_prims)
    m = spec.grid_resolution
    n = positions.shape[0]
    taper = taper_grid(m).reshape(m, m, m)
    # a zero-thickness frame is degenerate geometry: no volume, no density
    density = spec.glasses_density if style.thickness > 0 else 0.0
    scales = np.maximum(scales, 1e-4)
    opacity = np.broadcast_to(density * taper, (n, m, m, m)).copy()
    color = np.broadcast_to(
        np.asarray(style.albedo)[None, :, None, None, None], (n, 3, m, m, m)
    ).copy()
    return PrimitiveSet(positions, quats, scales, opacity, color)


def glasses_keypoints_canonical(style: GlassesStyle) -> np.ndarray:
    """20 landmarks: 8 per ring, bridge ends, nose-pad points."""
    pts = []
    offset = style.bridge_width / 2 + style.ring_radius
    for sign in (-1.0, 1.0):
        cx = sign * offset
        for a in np.linspace(0, 2 * np.pi, 8, endpoint=False):
            pts.append([cx + style.ring_radius * np.cos(a), style.ring_radius * np.sin(a), 0.0])
    pts.append([-style.bridge_width / 2, style.ring_radius * 0.9, 0.0])
    pts.append([style.bridge_width / 2, style.ring_radius * 0.9, 0.0])
    pts.append([-style.bridge_width / 2, style.ring_radius * 0.55, 0.0])
    pts.append([style.bridge_width / 2, style.ring_radius * 0.55, 0.0])
    return np.asarray(pts)


def glasses_tube_mesh(style: GlassesStyle, na: int = 16, nb: int = 6) -> TriMesh:
    """Torus rings plus a bridge cylinder, with analytic per-vertex normals.
    A zero-thickness style keeps a hairline tube so the mesh stays valid."""
    verts, normals, faces = [], [], []
    tube_r = max(0.8 * style.thickness, 1e-3)
    offset = style.bridge_width / 2 + style.ring_radius

    def add_grid(v_grid, n_grid, wrap_a):
        base = len(verts)
        na_g, nb_g = v_grid.shape[:2]
        verts.extend(v_grid.reshape(-1, 3))
        normals.extend(n_grid.reshape(-1, 3))
        for i in range(na_g if wrap_a else na_g - 1):
            for j in range(nb_g):
                i1 = (i + 1) % na_g
                j1 = (j + 1) % nb_g
                q00 = base + i * nb_g + j
                q01 = base + i * nb_g + j1
                q10 = base + i1 * nb_g + j
                q11 = base + i1 * nb_g + j1
                faces.append([q00, q10, q11])
                faces.append([q00, q11, q01])

    for sign in (-1.0, 1.0):
        cx = sign * offset
        aa = np.linspace(0, 2 * np.pi, na, endpoint=False)
        bb = np.linspace(0, 2 * np.pi, nb, endpoint=False)
        ag, bg = np.meshgrid(aa, bb, indexing="ij")
        ring = style.ring_radius + tube_r * np.cos(bg)
        v_grid = np.stack(
            [cx + ring * np.cos(ag), ring * np.sin(ag), tube_r * np.sin(bg)], axis=-1
        )
        n_grid = np.stack(
            [np.cos(bg) * np.cos(ag), np.cos(bg) * np.sin(ag), np.sin(bg)], axis=-1
        )
        add_grid(v_grid, n_grid, wrap_a=False)

    # bridge cylinder along x at ring height
    xs = np.linspace(-style.bridge_width / 2, style.bridge_width / 2, 6)
    bb = np.linspace(0, 2 * np.pi, nb, endpoint=False)
    xg, bg = np.meshgrid(xs, bb, indexing="ij")
    y0 = style.ring_radius * 0.9
    v_grid = np.stack(
        [xg, y0 + tube_r * np.cos(bg), tube_r * np.sin(bg)], axis=-1
    )
    n_grid = np.stack([np.zeros_like(bg), np.cos(bg), np.sin(bg)], axis=-1)
    add_grid(v_grid, n_grid, wrap_a=False)
    return TriMesh(np.asarray(verts), np.asarray(faces), np.asarray(normals))


def glasses_voxel_normals(style: GlassesStyle, canonical_set: PrimitiveSet) -> np.ndarray:
    """Analytic tube-surface normals at canonical voxel centers, (N, M^3, 3)."""
    centers = voxel_centers(canonical_set)
    offset = style.bridge_width / 2 + style.ring_radius
    flat = centers.reshape(-1, 3)
    candidates = []
    for cx in (-offset, offset):
        q = flat - np.array([cx, 0.0, 0.0])
        q_plane = q.copy()
        q_plane[:, 2] = 0.0
        norm = np.linalg.norm(q_plane, axis=1, keepdims=True)
        on_circle = np.array([cx, 0.0, 0.0]) + style.ring_radius * q_plane / np.where(norm == 0, 1.0, norm)
        candidates.append(on_circle)
    y0 = style.ring_radius * 0.9
    bridge = flat.copy()
    bridge[:, 0] = np.clip(flat[:, 0], -style.bridge_width / 2, style.bridge_width / 2)
    bridge[:, 1] = y0
    bridge[:, 2] = 0.0
    candidates.append(bridge)
    dists = np.stack([np.linalg.norm(flat - c, axis=1) for c in candidates])
    pick = np.argmin(dists, axis=0)
    nearest = np.take_along_axis(
        np.stack(candidates), pick[None, :, None], axis=0
    )[0]
    nrm = flat - nearest
    ln = np.linalg.norm(nrm, axis=1, keepdims=True)
    nrm = np.where(ln > 1e-12, nrm / np.where(ln == 0, 1.0, ln), np.array([0.0, 0.0, 1.0]))
    return nrm.reshape(centers.shape)


# ---------------------------------------------------------------------------
# Wearing the glasses


def worn_transform(spec: SynthSpec, head_id: int, expression=(0.0, 0.0)):
    """Rigid transform taking canonical glasses onto the head: a fixed pose on
    the face plus an expression-driven slide/tilt (the signal the rigid
    interaction decoder learns)."""
    head = spec.heads[head_id]
    slide = 0.02 * expression[0] * spec.motion_amplitude
    tilt = 0.06 * expression[1] * spec.motion_amplitude
    rot = rotvec_to_quat(np.array([tilt, 0.0, 0.0]))
    trans = np.array([0.0, 0.12 - slide, head.radii[2] * 0.98 + 0.04 + 0.3 * slide])
    return rot, trans


def head_fit_widen(spec: SynthSpec, head_id: int) -> float:
    """Non-rigid widening of the frame to fit the head (the signal the
    non-rigid interaction decoder learns)."""
    return 1.0 + 0.5 * (spec.heads[head_id].radii[0] - 0.42)


def worn_points(points: np.ndarray, rot_q, trans, widen: float) -> np.ndarray:
    from .geom import quat_to_matrix

    widened = points * np.array([widen, 1.0, 1.0])
    return widened @ quat_to_matrix(rot_q).T + trans


def worn_glasses(
    spec: SynthSpec, canonical: PrimitiveSet, head_id: int, expression=(0.0, 0.0)
) -> PrimitiveSet:
    rot_q, trans = worn_transform(spec, head_id, expression)
    widen = head_fit_widen(spec, head_id)
    positions = worn_points(canonical.positions, rot_q, trans, widen)
    rotations = quat_normalize(quat_multiply(rot_q[None], canonical.rotations))
    return replace(canonical, positions=positions, rotations=rotations)


# ---------------------------------------------------------------------------
# Analytic shading (ground-truth group-lit payloads)


def shade_payload(
    spec: SynthSpec,
    pset: PrimitiveSet,
    normals_flat: np.ndarray,
    shadow_flat: np.ndarray,
    light: PointLight,
    cam_pos: np.ndarray,
    diffuse: float,
    spec_weights,
) -> np.ndarray:
    """Analytic relit color payload: albedo * (ambient + kd * lambert * shadow
    + sum_i w_i * lobe_i * shadow) * intensity, (N, 3, M, M, M)."""
    centers = voxel_centers(pset)
    n, v3, _ = centers.shape
    ldir = light.position - centers
    ldir /= np.linalg.norm(ldir, axis=-1, keepdims=True)
    vdir = cam_pos - centers
    vdir /= np.linalg.norm(vdir, axis=-1, keepdims=True)
    lambert = np.maximum(np.einsum("nvi,nvi->nv", normals_flat, ldir), 0.0)
    shading = spec.ambient + diffuse * lambert * shadow_flat
    w = np.asarray(spec_weights, dtype=float)
    if np.any(w > 0):
        lobes = specular_feature(normals_flat, ldir, vdir)
        shading = shading + (lobes @ w) * shadow_flat
    m = pset.grid_resolution
    albedo = pset.color.reshape(n, 3, v3).transpose(0, 2, 1)
    rgb = albedo * shading[:, :, None] * light.intensity
    return rgb.transpose(0, 2, 1).reshape(n, 3, m, m, m)


# ---------------------------------------------------------------------------
# Rig: cameras and lights


def camera_ring(spec: SynthSpec) -> dict:
    cams = {}
    f = 0.5 * spec.image_size / np.tan(np.radians(19.0))
    k = np.array([[f, 0, spec.image_size / 2], [0, f, spec.image_size / 2], [0, 0, 1.0]])
    for i in range(spec.n_cameras):
        ang = (i / spec.n_cameras - 0.5) * 1.6  # frontal arc
        eye = spec.camera_radius * np.array([np.sin(ang), 0.12, np.cos(ang)])
        cams[f"cam{i}"] = Camera(k, look_at(eye, np.array([0.0, 0.05, 0.0])), (spec.image_size, spec.image_size))
    return cams


def light_ring(spec: SynthSpec) -> list:
    lights = []
    for i in range(spec.n_lights):
        ang = 2 * np.pi * i / spec.n_lights
        pos = spec.light_radius * np.array([np.sin(ang), 0.35, np.cos(ang)])
        lights.append(PointLight(pos, np.full(3, spec.light_intensity)))
    return lights


# ---------------------------------------------------------------------------
# Frames and datasets


@dataclass
class Frame:
    index: int
    head_id: int
    glasses_id: int | None
    kind: str  # "fully_lit" | "group_lit"
    expression: np.ndarray
    light_index: int | None = None
    bracket: tuple | None = None  # (lo frame index, hi frame index, t)
    images: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)
    seg: dict = field(default_factory=dict)
    keypoints3d: np.ndarray | None = None
    worn_mesh_vertices: np.ndarray | None = None


@dataclass
class Dataset:
    spec: SynthSpec
    cameras: dict
    lights: list
    frames: list
    glasses_meshes: dict = field(default_factory=dict)
    canonical: dict = field(default_factory=dict)

    def combos(self):
        return sorted({(f.head_id, f.glasses_id) for f in self.frames}, key=str)

    def frames_of(self, head_id, glasses_id, kind=None):
        return [
            f
            for f in self.frames
            if f.head_id == head_id and f.glasses_id == glasses_id
            and (kind is None or f.kind == kind)
        ]


def assemble_scene(spec: SynthSpec, head_id: int, glasses_id: int | None, expression) -> Scene:
    sets = [("face", face_set(spec, head_id, expression))]
    if glasses_id is not None:
        canonical = glasses_canonical(spec, glasses_id)
        sets.append(("glasses", worn_glasses(spec, canonical, head_id, expression)))
    return Scene(tuple(sets), np.asarray(spec.background, dtype=float))


def _relit_scene(spec, head_id, glasses_id, expression, light, cam_pos):
    """Scene with analytic group-lit payloads, shadow from the oracle."""
    scene = assemble_scene(spec, head_id, glasses_id, expression)
    colors = {}
    for label, pset in scene.sets:
        centers = voxel_centers(pset).reshape(-1, 3)
        guard = np.repeat(
            np.linalg.norm(2.0 * pset.scales / (pset.grid_resolution - 1), axis=1),
            pset.grid_resolution**3,
        )
        seg = centers - light.position
        dist = np.linalg.norm(seg, axis=1)
        ends = light.position + seg / dist[:, None] * np.maximum(dist - guard, 0.0)[:, None]
        shadow = oracle.transmittance_reference(
            scene, np.broadcast_to(light.position, centers.shape), ends, steps=192
        ).reshape(pset.count, -1)
        if label == "face":
            normals = head_voxel_normals(spec, head_id, pset, expression)
            colors[label] = shade_payload(
                spec, pset, normals, shadow, light, cam_pos,
                diffuse=0.75, spec_weights=(0.0, 0.0, 0.0),
            )
        else:
            style = spec.glasses[glasses_id]
            canonical = glasses_canonical(spec, glasses_id)
            n_canon = glasses_voxel_normals(style, canonical)
            rot_q, _ = worn_transform(spec, head_id, expression)
            from .geom import quat_to_matrix

            n_world = n_canon @ quat_to_matrix(rot_q).T
            colors[label] = shade_payload(
                spec, pset, n_world, shadow, light, cam_pos,
                diffuse=style.diffuse, spec_weights=style.spec_weights,
            )
    return scene.with_payloads(colors)


def _expression_at(spec: SynthSpec, step: int, total: int) -> np.ndarray:
    phase = 2 * np.pi * step / max(total, 1)
    return spec.motion_amplitude * np.array([np.sin(phase), np.cos(phase)])


def _combo_frames(spec: SynthSpec, head_id, glasses_id, start_index):
    """Frame schedule for one combo: fully-lit anchors with group-lit frames
    between, so every group-lit frame has two fully-lit brackets."""
    frames = []
    n_full = spec.fully_lit_per_combo
    per_gap = spec.group_lit_between
    total = n_full + (n_full - 1) * per_gap
    idx = start_index
    step = 0
    light_counter = start_index  # decorrelate light choice across combos
    anchors = []
    for i in range(n_full):
        anchors.append(idx)
        frames.append(
            Frame(idx, head_id, glasses_id, "fully_lit", _expression_at(spec, step, total))
        )
        idx += 1
        step += 1
        if i == n_full - 1:
            break
        for g in range(per_gap):
            t = (g + 1) / (per_gap + 1)
            frames.append(
                Frame(
                    idx, head_id, glasses_id, "group_lit",
                    _expression_at(spec, step, total),
                    light_index=light_counter % spec.n_lights,
                    bracket=(idx - (g + 1), idx + (per_gap - g), t),
                )
            )
            light_counter += 3
            idx += 1
            step += 1
    return frames


def _render_frame_assets(spec: SynthSpec, cameras: dict, lights: list, frame: Frame) -> Frame:
    """Oracle ground truth for one frame (images; plus masks, segmentation and
    keypoints on fully-lit with-glasses frames)."""
    expr = frame.expression
    if frame.kind == "fully_lit":
        scene = assemble_scene(spec, frame.head_id, frame.glasses_id, expr)
        for cid, cam in cameras.items():
            origins, dirs = cam.rays()
            if frame.glasses_id is not None:
                rgb, _, own = oracle.trace_rays(
                    scene, origins, dirs, spec.oracle_step, own_label="glasses"
                )
                sub = Scene((("glasses", scene.get("glasses")),), scene.background)
                _, alpha, _ = oracle.trace_rays(sub, origins, dirs, spec.oracle_step)
                h, w = cam.height, cam.width
                frame.images[cid] = Image(rgb.reshape(h, w, 3))
                frame.masks[cid] = Image(alpha.reshape(h, w, 1))
                frame.seg[cid] = Image(own.reshape(h, w, 1))
            else:
                rgb, _, _ = oracle.trace_rays(scene, origins, dirs, spec.oracle_step)
                frame.images[cid] = Image(rgb.reshape(cam.height, cam.width, 3))
    else:
        light = lights[frame.light_index]
        for cid, cam in cameras.items():
            relit = _relit_scene(
                spec, frame.head_id, frame.glasses_id, expr, light, cam.pose[:3, 3]
            )
            img = oracle.render_reference(relit, cam, spec.oracle_step)
            frame.images[cid] = img
    if frame.glasses_id is not None:
        style = spec.glasses[frame.glasses_id]
        kp = glasses_keypoints_canonical(style)
        rot_q, trans = worn_transform(spec, frame.head_id, expr)
        widen = head_fit_widen(spec, frame.head_id)
        frame.keypoints3d = worn_points(kp, rot_q, trans, widen)
        mesh = glasses_tube_mesh(style)
        frame.worn_mesh_vertices = worn_points(mesh.vertices, rot_q, trans, widen)
    return frame


def build_dataset(spec: SynthSpec, workers: int = 1, face_only: bool = True) -> Dataset:
    """Full two-stage dataset: face-only combos (for pretraining) plus every
    (head, glasses) combo, with oracle ground truth per camera."""
    cameras = camera_ring(spec)
    lights = light_ring(spec)
    frames = []
    idx = 0
    combos = []
    if face_only:
        combos += [(h, None) for h in range(len(spec.heads))]
    combos += [(h, g) for h in range(len(spec.heads)) for g in range(len(spec.glasses))]
    for head_id, glasses_id in combos:
        combo_frames = _combo_frames(spec, head_id, glasses_id, idx)
        idx += len(combo_frames)
        frames.extend(combo_frames)

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(_frame_job, [(spec, f) for f in frames]))
    else:
        done = [_render_frame_assets(spec, cameras, lights, f) for f in frames]

    ds = Dataset(spec, cameras, lights, done)
    canon_cam = _canonical_camera(spec)
    for gid, style in enumerate(spec.glasses):
        ds.glasses_meshes[gid] = glasses_tube_mesh(style)
        canonical = glasses_canonical(spec, gid)
        cscene = Scene((("glasses", canonical),), np.zeros(3))
        origins, dirs = canon_cam.rays()
        _, alpha, _ = oracle.trace_rays(cscene, origins, dirs, spec.oracle_step)
        ds.canonical[gid] = {
            "positions": canonical.positions,
            "mask": Image(alpha.reshape(canon_cam.height, canon_cam.width, 1)),
            "camera": canon_cam,
        }
    return ds


def _frame_job(args):
    spec, frame = args
    return _render_frame_assets(spec, camera_ring(spec), light_ring(spec), frame)


def _canonical_camera(spec: SynthSpec) -> Camera:
    size = spec.image_size
    f = 0.5 * size / np.tan(np.radians(16.0))
    k = np.array([[f, 0, size / 2], [0, f, size / 2], [0, 0, 1.0]])
    return Camera(k, look_at(np.array([0.0, 0.0, 1.8]), np.zeros(3)), (size, size))


# ---------------------------------------------------------------------------
# The synth_scene bundle (one-shot scene + analytic ground truth)


@dataclass
class SynthBundle:
    scene: Scene
    cameras: dict
    gt_images: dict
    gt_masks: dict
    gt_seg: dict
    keypoints3d: np.ndarray
    glasses_mesh: TriMesh


def synth_scene(spec: SynthSpec, head_id: int = 0, glasses_id: int = 0,
                expression=(0.0, 0.0), cameras: dict | None = None) -> SynthBundle:
    """Deterministic scene plus oracle-rendered ground truth for `cameras`
    (default: the spec's ring)."""
    cameras = cameras or camera_ring(spec)
    scene = assemble_scene(spec, head_id, glasses_id, np.asarray(expression, dtype=float))
    gt_images, gt_masks, gt_seg = {}, {}, {}
    for cid, cam in cameras.items():
        origins, dirs = cam.rays()
        rgb, _, own = oracle.trace_rays(scene, origins, dirs, spec.oracle_step, own_label="glasses")
        sub = Scene((("glasses", scene.get("glasses")),), scene.background)
        _, alpha, _ = oracle.trace_rays(sub, origins, dirs, spec.oracle_step)
        h, w = cam.height, cam.width
        gt_images[cid] = Image(rgb.reshape(h, w, 3))
        gt_masks[cid] = Image(alpha.reshape(h, w, 1))
        gt_seg[cid] = Image(own.reshape(h, w, 1))
    style = spec.glasses[glasses_id]
    kp = glasses_keypoints_canonical(style)
    rot_q, trans = worn_transform(spec, head_id, np.asarray(expression, dtype=float))
    widen = head_fit_widen(spec, head_id)
    return SynthBundle(
        scene=scene,
        cameras=cameras,
        gt_images=gt_images,
        gt_masks=gt_masks,
        gt_seg=gt_seg,
        keypoints3d=worn_points(kp, rot_q, trans, widen),
        glasses_mesh=glasses_tube_mesh(style),
    )


# ---------------------------------------------------------------------------
# Persistence (dataset directory layout)


def save_dataset(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "meshes").mkdir(exist_ok=True)
    cam_ids = sorted(ds.cameras)
    manifest = {
        "format": DATASET_FORMAT,
        "version": 1,
        "spec": _spec_to_json(ds.spec),
        "cameras": {
            cid: {
                "intrinsics": ds.cameras[cid].intrinsics.tolist(),
                "pose_world_from_camera": ds.cameras[cid].pose.tolist(),
                "resolution": list(ds.cameras[cid].resolution),
            }
            for cid in cam_ids
        },
        "lights": [
            {"position": l.position.tolist(), "intensity": l.intensity.tolist()}
            for l in ds.lights
        ],
        "n_frames": len(ds.frames),
        "canonical": {},
    }
    for gid, mesh in ds.glasses_meshes.items():
        fileio.save_obj(out / "meshes" / f"glasses{gid}.obj", mesh.vertices, mesh.faces, mesh.normals)
    for gid, entry in ds.canonical.items():
        fileio.save_pfm(out / "meshes" / f"canonical_mask{gid}.pfm", entry["mask"])
        manifest["canonical"][str(gid)] = {
            "positions": entry["positions"].tolist(),
            "camera": {
                "intrinsics": entry["camera"].intrinsics.tolist(),
                "pose_world_from_camera": entry["camera"].pose.tolist(),
                "resolution": list(entry["camera"].resolution),
            },
        }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    for frame in ds.frames:
        fdir = out / "frames" / f"{frame.index:05d}"
        fdir.mkdir(parents=True, exist_ok=True)
        meta = {
            "index": frame.index,
            "head_id": frame.head_id,
            "glasses_id": frame.glasses_id,
            "kind": frame.kind,
            "expression": np.asarray(frame.expression).tolist(),
            "light_index": frame.light_index,
            "bracket": list(frame.bracket) if frame.bracket else None,
        }
        (fdir / "meta.json").write_text(json.dumps(meta, indent=1))
        for cid in frame.images:
            fileio.save_pfm(fdir / f"{cid}.pfm", frame.images[cid])
        for cid in frame.masks:
            fileio.save_pfm(fdir / f"mask_glasses_{cid}.pfm", frame.masks[cid])
        for cid in frame.seg:
            fileio.save_pfm(fdir / f"seg_{cid}.pfm", frame.seg[cid])
        if frame.keypoints3d is not None:
            fileio.save_keypoints(
                fdir / "keypoints.json",
                {"keypoints3d": frame.keypoints3d.tolist(),
                 "worn_mesh_vertices": frame.worn_mesh_vertices.tolist()},
            )


def _spec_to_json(spec: SynthSpec) -> dict:
    doc = {}
    for key, val in vars(spec).items():
        if key == "heads":
            doc[key] = [vars(h) for h in val]
        elif key == "glasses":
            doc[key] = [vars(g) for g in val]
        else:
            doc[key] = val
    return json.loads(json.dumps(doc, default=list))


def _spec_from_json(doc: dict) -> SynthSpec:
    kwargs = dict(doc)
    kwargs["heads"] = tuple(
        HeadStyle(radii=tuple(h["radii"]), albedo=tuple(h["albedo"])) for h in doc["heads"]
    )
    kwargs["glasses"] = tuple(
        GlassesStyle(
            ring_radius=g["ring_radius"], bridge_width=g["bridge_width"],
            thickness=g["thickness"], albedo=tuple(g["albedo"]),
            diffuse=g["diffuse"], spec_weights=tuple(g["spec_weights"]),
        )
        for g in doc["glasses"]
    )
    kwargs["background"] = tuple(doc["background"])
    return SynthSpec(**kwargs)


def load_dataset(path) -> Dataset:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"{root}: no manifest.json; not a dataset directory")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise DataError(f"{root}: unexpected manifest format {manifest.get('format')!r}")
    if manifest.get("version", 0) > 1:
        from .errors import VersionError

        raise VersionError(f"{root}: dataset version {manifest['version']} > supported 1")
    spec = _spec_from_json(manifest["spec"])
    cameras = {
        cid: Camera(
            np.asarray(c["intrinsics"]), np.asarray(c["pose_world_from_camera"]),
            tuple(c["resolution"]),
        )
        for cid, c in manifest["cameras"].items()
    }
    lights = [PointLight(l["position"], l["intensity"]) for l in manifest["lights"]]
    frames = []
    for fdir in sorted((root / "frames").iterdir()):
        meta = json.loads((fdir / "meta.json").read_text())
        frame = Frame(
            index=meta["index"],
            head_id=meta["head_id"],
            glasses_id=meta["glasses_id"],
            kind=meta["kind"],
            expression=np.asarray(meta["expression"]),
            light_index=meta["light_index"],
            bracket=tuple(meta["bracket"]) if meta["bracket"] else None,
        )
        for cid in cameras:
            img = fdir / f"{cid}.pfm"
            if img.exists():
                frame.images[cid] = fileio.load_pfm(img)
            mask = fdir / f"mask_glasses_{cid}.pfm"
            if mask.exists():
                frame.masks[cid] = fileio.load_pfm(mask)
            seg = fdir / f"seg_{cid}.pfm"
            if seg.exists():
                frame.seg[cid] = fileio.load_pfm(seg)
        kp = fdir / "keypoints.json"
        if kp.exists():
            doc = fileio.load_keypoints(kp)
            frame.keypoints3d = np.asarray(doc["keypoints3d"])
            frame.worn_mesh_vertices = np.asarray(doc["worn_mesh_vertices"])
        frames.append(frame)
    ds = Dataset(spec, cameras, lights, frames)
    for gid in range(len(spec.glasses)):
        obj = root / "meshes" / f"glasses{gid}.obj"
        if obj.exists():
            v, f, n = fileio.load_obj(obj)
            ds.glasses_meshes[gid] = TriMesh(v, f, n)
        centry = manifest["canonical"].get(str(gid))
        if centry:
            cam = Camera(
                np.asarray(centry["camera"]["intrinsics"]),
                np.asarray(centry["camera"]["pose_world_from_camera"]),
                tuple(centry["camera"]["resolution"]),
            )
            ds.canonical[gid] = {
                "positions": np.asarray(centry["positions"]),
                "mask": fileio.load_pfm(root / "meshes" / f"canonical_mask{gid}.pfm"),
                "camera": cam,
            }
    return ds
