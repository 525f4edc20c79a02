"""Glasses mesh rigging and registration: linear blend skinning, keypoint
triangulation, canonicalization, image-based registration, chamfer distance.

Each of the K skeleton keypoints owns one bone; keypoint j deforms as bone
j's transform applied to it, and mesh vertices blend bone transforms with
the skinning-weight matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionError, NumericError, TriangulationError
from .geom import (
    quat_matrix_backward,
    quat_rotate,
    quat_to_matrix,
    rotvec_to_quat,
    rotvec_to_quat_backward,
)
from .morph.optim import AdamState, adam_step
from .raymarch import Camera, Image, RenderConfig, render_backward, render_alpha
from .volprim import PrimitiveSet, Scene

DEGENERATE_FACE_SHARE = 0.01


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        faces = np.asarray(self.faces, dtype=int).reshape(-1, 3)
        if verts.shape[0] == 0:
            raise DimensionError("mesh has no vertices")
        if faces.size and (faces.min() < 0 or faces.max() >= verts.shape[0]):
            raise DimensionError("face indices out of range")
        if faces.shape[0]:
            e1 = verts[faces[:, 1]] - verts[faces[:, 0]]
            e2 = verts[faces[:, 2]] - verts[faces[:, 0]]
            areas = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)
            scale = float(np.ptp(verts)) or 1.0
            share = np.mean(areas < 1e-12 * scale**2)
            if share > DEGENERATE_FACE_SHARE:
                raise DimensionError(
                    f"{share:.0%} of faces are degenerate (tolerance {DEGENERATE_FACE_SHARE:.0%})"
                )
        normals = self.normals
        if normals is not None:
            normals = np.asarray(normals, dtype=float).reshape(-1, 3)
            if normals.shape[0] != verts.shape[0]:
                raise DimensionError("per-vertex normals must match vertex count")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "faces", faces)
        object.__setattr__(self, "normals", normals)

    @property
    def diameter(self) -> float:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(np.linalg.norm(hi - lo))


@dataclass(frozen=True)
class SkinWeights:
    """K bones x V vertices, entries in [0, 1], columns summing to one."""

    matrix: np.ndarray

    def __post_init__(self):
        mat = np.asarray(self.matrix, dtype=float)
        if mat.ndim != 2:
            raise DimensionError(f"weights must be 2-D, got {mat.shape}")
        if np.any(mat < 0) or np.any(mat > 1):
            raise ValueError("weights must lie in [0, 1]")
        sums = mat.sum(axis=0)
        if np.any(np.abs(sums - 1.0) > 1e-5):
            raise ValueError("weight columns must sum to 1 within 1e-5")
        object.__setattr__(self, "matrix", mat)

    @property
    def n_bones(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class BoneTransforms:
    """K affine 3x4 transforms [M | t]; rigid mode requires orthonormal M."""

    matrices: np.ndarray
    rigid: bool = False

    def __post_init__(self):
        mats = np.asarray(self.matrices, dtype=float)
        if mats.ndim != 3 or mats.shape[1:] != (3, 4):
            raise DimensionError(f"expected (K, 3, 4) transforms, got {mats.shape}")
        if self.rigid:
            rr = np.einsum("kij,kil->kjl", mats[:, :, :3], mats[:, :, :3])
            if not np.allclose(rr, np.eye(3), atol=1e-6):
                raise ValueError("rigid mode requires orthonormal rotation parts")
        object.__setattr__(self, "matrices", mats)

    @classmethod
    def identity(cls, k: int, rigid: bool = False) -> "BoneTransforms":
        mats = np.tile(np.eye(3, 4), (k, 1, 1))
        return cls(mats, rigid)

    @property
    def n_bones(self) -> int:
        return self.matrices.shape[0]

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        """Apply bone j's transform to point j (one point per bone)."""
        return (
            np.einsum("kij,kj->ki", self.matrices[:, :, :3], points)
            + self.matrices[:, :, 3]
        )


def lbs_deform(mesh: TriMesh, weights: SkinWeights, transforms: BoneTransforms) -> TriMesh:
    """Each vertex becomes the weight-blended application of bone transforms."""
    if weights.n_vertices != mesh.vertices.shape[0]:
        raise DimensionError(
            f"weights cover {weights.n_vertices} vertices, mesh has {mesh.vertices.shape[0]}"
        )
    if weights.n_bones != transforms.n_bones:
        raise DimensionError(
            f"weights have {weights.n_bones} bones, transforms {transforms.n_bones}"
        )
    per_bone = (
        np.einsum("kij,vj->kvi", transforms.matrices[:, :, :3], mesh.vertices)
        + transforms.matrices[:, None, :, 3]
    )
    verts = np.einsum("kv,kvi->vi", weights.matrix, per_bone)
    normals = mesh.normals
    if normals is not None:
        bent = np.einsum("kij,vj->kvi", transforms.matrices[:, :, :3], normals)
        normals = np.einsum("kv,kvi->vi", weights.matrix, bent)
        norm = np.linalg.norm(normals, axis=1, keepdims=True)
        normals = normals / np.where(norm == 0, 1.0, norm)
    return TriMesh(verts, mesh.faces, normals)


def triangulate_keypoints(detections: dict, cameras: dict) -> tuple[np.ndarray, np.ndarray]:
    """DLT triangulation of per-camera 2-D detections.

    detections maps camera id -> (P, 2) pixel coordinates; cameras maps the
    same ids -> Camera. Returns 3-D points (P, 3) and per-point reprojection
    RMS in pixels. Ill-conditioned configurations (degenerate baselines)
    raise TriangulationError.
    """
    cam_ids = [cid for cid in detections if cid in cameras]
    if len(cam_ids) < 2:
        raise TriangulationError("need detections from at least 2 cameras")
    mats = {cid: cameras[cid].projection_matrix() for cid in cam_ids}
    n_pts = np.asarray(detections[cam_ids[0]]).shape[0]
    points = np.empty((n_pts, 3))
    residuals = np.empty(n_pts)
    for j in range(n_pts):
        rows = []
        for cid in cam_ids:
            u, v = np.asarray(detections[cid])[j]
            pm = mats[cid]
            rows.append(u * pm[2] - pm[0])
            rows.append(v * pm[2] - pm[1])
        a = np.asarray(rows)
        _, s, vt = np.linalg.svd(a)
        if s[2] < 1e-9 * s[0]:
            raise TriangulationError(
                f"keypoint {j}: triangulation is rank-deficient (degenerate baseline)"
            )
        hom = vt[-1]
        if abs(hom[3]) < 1e-12:
            raise TriangulationError(f"keypoint {j}: point at infinity")
        x = hom[:3] / hom[3]
        errs = []
        for cid in cam_ids:
            px, depth = cameras[cid].project(x[None])
            if depth[0] <= 0:
                raise TriangulationError(f"keypoint {j}: triangulated behind camera {cid}")
            errs.append(np.sum((px[0] - np.asarray(detections[cid])[j]) ** 2))
        points[j] = x
        residuals[j] = np.sqrt(np.mean(errs))
    return points, residuals


def _rigid_apply(rotvecs, trans, points):
    return quat_rotate(rotvec_to_quat(rotvecs), points) + trans


def fit_canonical(
    keypoints: np.ndarray,
    mean_keypoints: np.ndarray,
    iterations: int = 1000,
    lr: float = 1e-2,
) -> tuple[BoneTransforms, float]:
    """Per-bone rigid transforms moving `keypoints` onto `mean_keypoints`.

    Adam on (rotation-vector, translation) per bone, minimizing the summed
    squared keypoint distance. Returns the transforms and the final RMS.
    """
    keypoints = np.asarray(keypoints, dtype=float)
    mean_keypoints = np.asarray(mean_keypoints, dtype=float)
    if not (np.all(np.isfinite(keypoints)) and np.all(np.isfinite(mean_keypoints))):
        raise NumericError("non-finite keypoints in fit_canonical")
    k = keypoints.shape[0]
    params = {"rotvecs": np.zeros((k, 3)), "trans": np.zeros((k, 3))}
    state = AdamState(params)
    for _ in range(iterations):
        moved = _rigid_apply(params["rotvecs"], params["trans"], keypoints)
        diff = moved - mean_keypoints
        if float(np.sum(diff**2)) == 0.0:
            break
        g_moved = 2.0 * diff
        g_trans = g_moved
        # rotation gradient through R(rv) p: dL/dR = g p^T, then to rotvec
        quats = rotvec_to_quat(params["rotvecs"])
        g_rot_mat = g_moved[:, :, None] * keypoints[:, None, :]
        g_quat = quat_matrix_backward(quats, g_rot_mat)
        g_rv = rotvec_to_quat_backward(params["rotvecs"], g_quat)
        params, state = adam_step(params, {"rotvecs": g_rv, "trans": g_trans}, state, lr=lr)
    moved = _rigid_apply(params["rotvecs"], params["trans"], keypoints)
    rms = float(np.sqrt(np.mean(np.sum((moved - mean_keypoints) ** 2, axis=1))))
    rots = quat_to_matrix(rotvec_to_quat(params["rotvecs"]))
    mats = np.concatenate([rots, params["trans"][:, :, None]], axis=2)
    return BoneTransforms(mats, rigid=True), rms


# ---------------------------------------------------------------------------
# Image-based registration


def mesh_to_proxy_set(
    vertices: np.ndarray, radius: float, density: float = 40.0, m: int = 4
) -> PrimitiveSet:
    """Thin-density primitive proxies centered on (sub-sampled) vertices, used
    to render a differentiable soft silhouette of a mesh."""
    n = vertices.shape[0]
    t = np.sin(np.pi * np.arange(m) / (m - 1))
    taper = t[:, None, None] * t[None, :, None] * t[None, None, :]
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return PrimitiveSet(
        positions=np.asarray(vertices, dtype=float),
        rotations=quats,
        scales=np.full((n, 3), radius),
        opacity=np.broadcast_to(density * taper, (n, m, m, m)).copy(),
        color=np.full((n, 3, m, m, m), 0.5),
    )


def soft_silhouette(
    vertices: np.ndarray, camera: Camera, config: RenderConfig, radius: float
) -> Image:
    scene = Scene((("proxy", mesh_to_proxy_set(vertices, radius)),))
    return render_alpha(scene, camera, config)


def register_to_face(
    mesh: TriMesh,
    weights: SkinWeights,
    keypoints: np.ndarray,
    target_keypoints: np.ndarray,
    target_seg_mask: Image | None,
    camera: Camera | None,
    iterations: int = 1000,
    lr: float = 1e-3,
    mask_weight: float = 1.0,
    proxy_stride: int = 1,
    proxy_radius: float | None = None,
    render_config: RenderConfig | None = None,
    rigid: bool = False,
) -> tuple[BoneTransforms, dict]:
    """Optimize per-bone affine transforms against 3-D keypoints plus an
    optional rendered-silhouette term (the keypoint term alone is the reduced
    problem). Defaults: 1000 iterations at learning rate 1e-3.
    """
    if target_seg_mask is not None:
        if camera is None:
            raise DimensionError("mask term requires a camera")
        if float(np.sum(target_seg_mask.data)) == 0.0:
            raise DimensionError("target segmentation mask is empty")
    keypoints = np.asarray(keypoints, dtype=float)
    target_keypoints = np.asarray(target_keypoints, dtype=float)
    k = weights.n_bones
    if keypoints.shape[0] != k:
        raise DimensionError(f"expected one keypoint per bone ({k}), got {keypoints.shape[0]}")
    sub = slice(None, None, proxy_stride)
    verts_sub = mesh.vertices[sub]
    w_sub = weights.matrix[:, sub]
    if proxy_radius is None:
        proxy_radius = 0.03 * (mesh.diameter or 1.0)
    config = render_config or RenderConfig(step_size=proxy_radius / 2)

    params = {"mats": np.tile(np.eye(3, 4), (k, 1, 1))}
    state = AdamState(params)
    history = []
    verts_h = np.concatenate([verts_sub, np.ones((verts_sub.shape[0], 1))], axis=1)
    kp_h = np.concatenate([keypoints, np.ones((k, 1))], axis=1)
    for _ in range(iterations):
        mats = params["mats"]
        kp_moved = np.einsum("kij,kj->ki", mats, kp_h)
        kp_diff = kp_moved - target_keypoints
        loss_kp = float(np.sum(kp_diff**2))
        g_mats = 2.0 * np.einsum("ki,kj->kij", kp_diff, kp_h)

        loss_mask = 0.0
        if target_seg_mask is not None and mask_weight > 0:
            per_bone = np.einsum("kij,vj->kvi", mats, verts_h)
            verts_moved = np.einsum("kv,kvi->vi", w_sub, per_bone)
            proxy = mesh_to_proxy_set(verts_moved, proxy_radius)
            scene = Scene((("proxy", proxy),))
            sil = render_alpha(scene, camera, config)
            diff = sil.data - target_seg_mask.data
            loss_mask = float(np.mean(np.abs(diff)))
            g_alpha = mask_weight * np.sign(diff) / diff.size
            grads = render_backward(scene, camera, config, dloss_dalpha=g_alpha)
            g_verts = grads.sets["proxy"].positions
            # chain: vertex = sum_k w_kv (M_k [v; 1])
            g_mats = g_mats + np.einsum("kv,vi,vj->kij", w_sub, g_verts, verts_h)
        history.append({"keypoint": loss_kp, "mask": loss_mask})
        params, state = adam_step(params, {"mats": g_mats}, state, lr=lr)

    result = params["mats"]
    if rigid:
        # project linear parts onto the nearest rotations
        u, _, vt = np.linalg.svd(result[:, :, :3])
        rots = u @ vt
        det = np.linalg.det(rots)
        u[:, :, -1] *= np.sign(det)[:, None]
        result = np.concatenate([u @ vt, result[:, :, 3:]], axis=2)
    transforms = BoneTransforms(result, rigid=rigid)
    moved = transforms.apply_points(keypoints)
    rms = float(np.sqrt(np.mean(np.sum((moved - target_keypoints) ** 2, axis=1))))
    info = {"history": history, "keypoint_rms": rms, "final": history[-1] if history else {}}
    return transforms, info


def compute_vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted per-vertex normals."""
    vertices = np.asarray(vertices, dtype=float)
    normals = np.zeros_like(vertices)
    e1 = vertices[faces[:, 1]] - vertices[faces[:, 0]]
    e2 = vertices[faces[:, 2]] - vertices[faces[:, 0]]
    fn = np.cross(e1, e2)
    for col in range(3):
        np.add.at(normals, faces[:, col], fn)
    ln = np.linalg.norm(normals, axis=1, keepdims=True)
    return normals / np.where(ln == 0, 1.0, ln)


# ---------------------------------------------------------------------------
# Chamfer distance


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean squared nearest-neighbor distance between point sets."""
    a = np.asarray(a, dtype=float).reshape(-1, 3)
    b = np.asarray(b, dtype=float).reshape(-1, 3)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise DimensionError("chamfer distance of an empty point set")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float(np.mean(d_ab**2) + np.mean(d_ba**2))


def chamfer_with_grad(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """Chamfer value and its gradient w.r.t. the points of A (correspondences
    held fixed, the standard subgradient)."""
    a = np.asarray(a, dtype=float).reshape(-1, 3)
    b = np.asarray(b, dtype=float).reshape(-1, 3)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise DimensionError("chamfer distance of an empty point set")
    d_ab, idx_ab = cKDTree(b).query(a)
    d_ba, idx_ba = cKDTree(a).query(b)
    value = float(np.mean(d_ab**2) + np.mean(d_ba**2))
    grad = 2.0 * (a - b[idx_ab]) / a.shape[0]
    np.add.at(grad, idx_ba, 2.0 * (a[idx_ba] - b) / b.shape[0])
    return value, grad
