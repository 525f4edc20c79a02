"""Two-stage training on synthetic datasets and few-shot latent fitting.

Stage 1 (geometry) pretrains the face decoders on face-only fully-lit frames,
then jointly trains every geometry block on the with-glasses frames under the
fully-lit loss. Stage 2 freezes the geometry parameters bit-identically and
trains the relightable appearance decoders under the group-lit MSE, decoding
the geometry of each group-lit frame by interpolating its two bracketing
fully-lit frames. All gradients are hand-wired through the renderer adjoint
and the decoder backwards; renders run with early stop disabled so the
adjoint replay matches the forward exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geom import (
    quat_multiply,
    quat_multiply_backward,
    rotvec_to_quat,
    rotvec_to_quat_backward,
)
from ..raymarch import RenderConfig, render, render_backward, _run_tiles
from ..relight import (
    LightingFeatures,
    assign_normals,
    build_shading_context,
    shadow_feature,
)
from ..rig import TriMesh, chamfer_with_grad, compute_vertex_normals
from ..volprim import PrimitiveSet, Scene, interpolate_sets
from . import decoders as dec
from .losses import GroundTruthAssets, LossWeights, RenderedAssets, kl_divergence_grads, loss_fully_lit, loss_group_lit
from .optim import AdamState, adam_step

GEOMETRY_BLOCKS = ("enc_e", "face_embed", "dec_f", "dec_g", "enc_g", "dec_df", "dec_deform", "dec_transf")
FACE_BLOCKS = ("enc_e", "face_embed", "dec_f")
APPEARANCE_BLOCKS = ("app_f", "app_df", "app_g")


def block_of(name: str) -> str:
    return name.split(".")[0]


def filter_blocks(grads: dict, blocks) -> dict:
    return {k: v for k, v in grads.items() if block_of(k) in blocks}


@dataclass
class TrainConfig:
    lr: float = 1e-3
    seed: int = 0
    render_step: float = 0.04
    iterations_face: int = 400
    iterations_joint: int = 1600
    iterations_app_face: int = 400
    iterations_app_joint: int = 1600
    weights: LossWeights = field(default_factory=LossWeights)
    workers: int = 1
    log_every: int = 100

    @property
    def render_config(self) -> RenderConfig:
        return RenderConfig(step_size=self.render_step, max_steps=2048,
                            early_stop_transmittance=1e-7)


# ---------------------------------------------------------------------------
# Field-level plumbing


def make_set(fields: dict) -> PrimitiveSet:
    return PrimitiveSet(
        fields["positions"], fields["rotations"], fields["scales"],
        fields["opacity"], fields["color"],
    )


def _compose_glasses_quat(res: dict):
    q_deform = rotvec_to_quat(res["delta_rotvec_deform"])
    q_t = rotvec_to_quat(res["delta_rotvec_transf"])
    q_tb = np.broadcast_to(q_t, q_deform.shape)
    raw = quat_multiply(q_tb, q_deform)
    norm = np.linalg.norm(raw, axis=-1, keepdims=True)
    dq = raw / norm
    cache = {"q_deform": q_deform, "q_tb": q_tb, "raw": raw, "norm": norm, "res": res}
    return dq, cache


def _compose_glasses_quat_backward(cache, g_dq):
    raw, norm = cache["raw"], cache["norm"]
    qn = raw / norm
    g_raw = (g_dq - qn * np.sum(g_dq * qn, axis=-1, keepdims=True)) / norm
    g_qt, g_qdef = quat_multiply_backward(cache["q_tb"], cache["q_deform"], g_raw)
    g_rv_def = rotvec_to_quat_backward(cache["res"]["delta_rotvec_deform"], g_qdef)
    g_rv_t = rotvec_to_quat_backward(
        cache["res"]["delta_rotvec_transf"], g_qt.sum(axis=0)
    )
    return g_rv_def, g_rv_t


def apply_residual_fields(fields: dict, dq: np.ndarray, res: dict, floor: float):
    """Residual application on raw field dicts (positions add, rotations
    compose on the left, scales add and clamp), with a cache for backward."""
    raw = quat_multiply(dq, fields["rotations"])
    norm = np.linalg.norm(raw, axis=-1, keepdims=True)
    scales_raw = fields["scales"] + res["delta_scales"]
    clamped = np.maximum(scales_raw, floor)
    out = dict(fields)
    out["positions"] = fields["positions"] + res["delta_positions"]
    out["rotations"] = raw / norm
    out["scales"] = clamped
    cache = {
        "dq": dq, "rot_in": fields["rotations"], "raw": raw, "norm": norm,
        "mask": scales_raw > floor,
    }
    return out, cache


def apply_residual_fields_backward(cache, gout: dict):
    """Returns (gradients on the input fields, gradients on the residual)."""
    gin = {}
    gres = {}
    gin["positions"] = gout.get("positions", np.zeros(1))
    gres["delta_positions"] = gout.get("positions")
    g_rot = gout.get("rotations")
    if g_rot is not None:
        qn = cache["raw"] / cache["norm"]
        g_raw = (g_rot - qn * np.sum(g_rot * qn, axis=-1, keepdims=True)) / cache["norm"]
        g_dq, g_q = quat_multiply_backward(cache["dq"], cache["rot_in"], g_raw)
        gin["rotations"] = g_q
        gres["delta_quat"] = g_dq
    g_scale = gout.get("scales")
    if g_scale is not None:
        masked = g_scale * cache["mask"]
        gin["scales"] = masked
        gres["delta_scales"] = masked
    gin["opacity"] = gout.get("opacity")
    gin["color"] = gout.get("color")
    return gin, gres


# ---------------------------------------------------------------------------
# Forward pass for one frame


@dataclass
class FrameForward:
    z_e: np.ndarray = None
    z_fgeo: np.ndarray = None
    z_ftex: np.ndarray = None
    z_ggeo: np.ndarray = None
    z_gtex: np.ndarray = None
    mu: np.ndarray = None
    sigma: np.ndarray = None
    face_fields: dict = None
    glasses_fields: dict = None
    face_worn: dict = None
    glasses_worn: dict = None
    face_res: dict = None
    glasses_res: dict = None
    caches: dict = field(default_factory=dict)


def geometry_forward(params, cfg: dec.MorphConfig, expression, head_id, glasses_id,
                     sample_rng=None) -> FrameForward:
    out = FrameForward()
    out.z_e, c_e = dec.encode_expression(params, cfg, expression)
    out.z_fgeo = params["face_embed.geo"][head_id]
    out.z_ftex = params["face_embed.tex"][head_id]
    out.face_fields, c_f = dec.decode_face(params, cfg, out.z_e, out.z_fgeo, out.z_ftex)
    out.caches["enc_e"] = c_e
    out.caches["dec_f"] = c_f
    if glasses_id is None:
        out.face_worn = out.face_fields
        return out
    one_hot = np.zeros(cfg.n_glasses_ids)
    one_hot[glasses_id] = 1.0
    out.z_ggeo, out.z_gtex, out.mu, out.sigma, c_enc = dec.encode_glasses(
        params, cfg, one_hot, rng=sample_rng, sample=sample_rng is not None
    )
    out.glasses_fields, c_g = dec.decode_glasses(params, cfg, out.z_ggeo, out.z_gtex)
    out.glasses_res, out.face_res, c_res = dec.decode_residuals(
        params, cfg, out.z_e, out.z_ggeo, out.z_fgeo, out.glasses_fields["positions"]
    )
    dq_g, c_gq = _compose_glasses_quat(out.glasses_res)
    dq_f = rotvec_to_quat(out.face_res["delta_rotvec"])
    out.glasses_worn, c_ag = apply_residual_fields(
        out.glasses_fields, dq_g, out.glasses_res, cfg.scale_floor
    )
    out.face_worn, c_af = apply_residual_fields(
        out.face_fields,
        dq_f,
        {"delta_positions": out.face_res["delta_positions"],
         "delta_scales": out.face_res["delta_scales"]},
        cfg.scale_floor,
    )
    out.caches.update(enc_g=c_enc, dec_g=c_g, dec_res=c_res,
                      gq=c_gq, apply_g=c_ag, apply_f=c_af)
    return out


def geometry_backward(params, cfg, fw: FrameForward, g_face_worn, g_glasses_worn,
                      g_glasses_canon=None, g_face_res_extra=None,
                      g_mu=None, g_sigma=None, head_id=0, grads=None) -> dict:
    """Back-propagate gradients on the worn field dicts (plus optional direct
    canonical-field gradients and regularizer terms) into every geometry
    parameter block. Returns the grads dict."""
    grads = grads if grads is not None else {}
    g_ze_total = np.zeros(cfg.latent_dim)
    g_zfgeo_total = np.zeros(cfg.latent_dim)
    g_zftex_total = np.zeros(cfg.latent_dim)

    if fw.glasses_fields is not None:
        gin_g, gres_g = apply_residual_fields_backward(fw.caches["apply_g"], g_glasses_worn)
        gin_f, gres_f = apply_residual_fields_backward(fw.caches["apply_f"], g_face_worn)
        g_rv_def, g_rv_t = _compose_glasses_quat_backward(
            fw.caches["gq"], gres_g.get("delta_quat", np.zeros_like(fw.glasses_fields["rotations"]))
        )
        g_fres_rotvec = rotvec_to_quat_backward(
            fw.face_res["delta_rotvec"], gres_f.get("delta_quat", np.zeros((cfg.face_prims, 4)))
        )
        g_glasses_resid = {
            "delta_positions": gres_g.get("delta_positions", np.zeros((cfg.glasses_prims, 3))),
            "delta_rotvec_deform": g_rv_def,
            "delta_rotvec_transf": g_rv_t,
            "delta_scales": gres_g.get("delta_scales", np.zeros((cfg.glasses_prims, 3))),
        }
        g_face_resid = {
            "delta_positions": gres_f.get("delta_positions", np.zeros((cfg.face_prims, 3))),
            "delta_rotvec": g_fres_rotvec,
            "delta_scales": gres_f.get("delta_scales", np.zeros((cfg.face_prims, 3))),
        }
        if g_face_res_extra:
            for key in g_face_resid:
                extra = g_face_res_extra.get(key)
                if extra is not None:
                    g_face_resid[key] = g_face_resid[key] + extra
        g_ze, g_zgg, g_zfg, g_gpos = dec.decode_residuals_backward(
            params, cfg, fw.caches["dec_res"], g_glasses_resid, g_face_resid, grads
        )
        g_ze_total += g_ze
        g_zfgeo_total += g_zfg
        g_zggeo_total = g_zgg
        # canonical glasses fields collect render-through-residual gradients,
        # the rigid term's dependence on canonical positions, and any direct
        # canonical supervision (chamfer / canonical masks)
        g_gfields = {k: v for k, v in gin_g.items() if v is not None}
        g_gfields["positions"] = g_gfields.get("positions", 0) + g_gpos
        if g_glasses_canon:
            for key, val in g_glasses_canon.items():
                if val is None:
                    continue
                g_gfields[key] = g_gfields.get(key, 0) + val
        g_zgg2, g_zgt = dec.decode_glasses_backward(params, cfg, fw.caches["dec_g"], g_gfields, grads)
        g_zggeo_total = g_zggeo_total + g_zgg2
        g_zgtex_total = g_zgt
        dec.encode_glasses_backward(
            params, cfg, fw.caches["enc_g"], g_zggeo_total, g_zgtex_total,
            g_mu=g_mu, g_sigma=g_sigma, grads=grads,
        )
        g_ffields = {k: v for k, v in gin_f.items() if v is not None}
    else:
        g_ffields = {k: v for k, v in g_face_worn.items() if v is not None}

    g_ze2, g_zfg2, g_zft2 = dec.decode_face_backward(params, cfg, fw.caches["dec_f"], g_ffields, grads)
    g_ze_total += g_ze2
    g_zfgeo_total += g_zfg2
    g_zftex_total += g_zft2

    dec.encode_expression_backward(params, fw.caches["enc_e"], g_ze_total, grads)
    g_embed_geo = np.zeros_like(params["face_embed.geo"])
    g_embed_geo[head_id] = g_zfgeo_total
    g_embed_tex = np.zeros_like(params["face_embed.tex"])
    g_embed_tex[head_id] = g_zftex_total
    dec._acc(grads, "face_embed.geo", g_embed_geo)
    dec._acc(grads, "face_embed.tex", g_embed_tex)
    return grads


# ---------------------------------------------------------------------------
# Renders used by the losses


def _zero_field_grads(cfg, n):
    m = cfg.grid_resolution
    return {
        "positions": np.zeros((n, 3)), "rotations": np.zeros((n, 4)),
        "scales": np.zeros((n, 3)), "opacity": np.zeros((n, m, m, m)),
        "color": np.zeros((n, 3, m, m, m)),
    }


def _grads_to_fields(set_grads):
    return {
        "positions": set_grads.positions, "rotations": set_grads.rotations,
        "scales": set_grads.scales, "opacity": set_grads.opacity,
        "color": set_grads.color,
    }


def _add_fields(a, b):
    for k in a:
        a[k] = a[k] + b[k]
    return a


def fully_lit_step(params, cfg, dataset, frame, cam_id, weights: LossWeights,
                   rcfg: RenderConfig, sample_rng, workers=1):
    """Loss, components, and parameter gradients for one fully-lit frame/view."""
    fw = geometry_forward(params, cfg, frame.expression, frame.head_id,
                          frame.glasses_id, sample_rng=sample_rng)
    camera = dataset.cameras[cam_id]
    face_set = make_set(fw.face_worn)
    gt_img = frame.images[cam_id].data

    if frame.glasses_id is None:
        scene = Scene((("face", face_set),), np.asarray(dataset.spec.background))
        origins, dirs = camera.rays()
        rgb, _, _, _ = _run_tiles(scene, origins, dirs, rcfg, early_stop=False, workers=workers)
        img = rgb.reshape(camera.height, camera.width, 3)
        rendered = RenderedAssets(image=img)
        gt = GroundTruthAssets(image=gt_img)
        total, comps = loss_fully_lit(rendered, gt, weights)
        g_img = weights.l1 * np.sign(img - gt_img) / img.size
        sg = render_backward(scene, camera, rcfg, g_img, workers=workers)
        g_face = _grads_to_fields(sg.sets["face"])
        grads = geometry_backward(params, cfg, fw, g_face, None, head_id=frame.head_id)
        return total, comps, grads

    glasses_set = make_set(fw.glasses_worn)
    scene = Scene((("face", face_set), ("glasses", glasses_set)),
                  np.asarray(dataset.spec.background))
    origins, dirs = camera.rays()
    rgb, _, own, _ = _run_tiles(scene, origins, dirs, rcfg, own_label="glasses",
                                early_stop=False, workers=workers)
    h, w = camera.height, camera.width
    img = rgb.reshape(h, w, 3)
    own_img = own.reshape(h, w, 1)
    _, alpha_worn, _, _ = _run_tiles(scene, origins, dirs, rcfg, labels=["glasses"],
                                     early_stop=False, workers=workers)
    mask_worn = alpha_worn.reshape(h, w, 1)

    canon_entry = dataset.canonical[frame.glasses_id]
    canon_cam = canon_entry["camera"]
    canon_set = make_set(fw.glasses_fields)
    canon_scene = Scene((("glasses", canon_set),), np.zeros(3))
    co, cd = canon_cam.rays()
    _, alpha_canon, _, _ = _run_tiles(canon_scene, co, cd, rcfg, early_stop=False, workers=workers)
    mask_canon = alpha_canon.reshape(canon_cam.height, canon_cam.width, 1)

    # chamfer guidance targets: the (canonical / worn) tube-mesh surface
    # vertices, as the full-scale recipe does with reconstructed meshes
    mesh = dataset.glasses_meshes[frame.glasses_id]
    canon_target = mesh.vertices[::2]
    worn_target = frame.worn_mesh_vertices[::2]

    rendered = RenderedAssets(
        image=img,
        glasses_mask=mask_worn,
        canonical_mask=mask_canon,
        seg_ownership=own_img,
        glasses_positions_canonical=fw.glasses_fields["positions"],
        glasses_positions_deformed=fw.glasses_worn["positions"],
        face_residual=fw.face_res,
        kl_mu=fw.mu,
        kl_sigma=fw.sigma,
    )
    gt = GroundTruthAssets(
        image=gt_img,
        glasses_mask=frame.masks[cam_id].data,
        canonical_mask=canon_entry["mask"].data,
        seg_ownership=frame.seg[cam_id].data,
        glasses_positions_canonical=canon_target,
        glasses_positions_deformed=worn_target,
    )
    total, comps = loss_fully_lit(rendered, gt, weights)

    # upstream gradients
    g_img = weights.l1 * np.sign(img - gt_img) / img.size
    g_own = weights.seg * np.sign(own_img - gt.seg_ownership) / own_img.size
    g_mask_worn = weights.mask * np.sign(mask_worn - gt.glasses_mask) / mask_worn.size
    g_mask_canon = weights.mask * np.sign(mask_canon - gt.canonical_mask) / mask_canon.size

    sg_main = render_backward(scene, camera, rcfg, g_img, dloss_downership=g_own,
                              ownership_label="glasses", workers=workers)
    sg_mask = render_backward(scene, camera, rcfg, dloss_dalpha=g_mask_worn,
                              labels=["glasses"], workers=workers)
    sg_canon = render_backward(canon_scene, canon_cam, rcfg, dloss_dalpha=g_mask_canon,
                               workers=workers)

    g_face = _grads_to_fields(sg_main.sets["face"])
    g_glasses_worn = _add_fields(_grads_to_fields(sg_main.sets["glasses"]),
                                 _grads_to_fields(sg_mask.sets["glasses"]))

    _, g_cham_canon = chamfer_with_grad(fw.glasses_fields["positions"], canon_target)
    _, g_cham_worn = chamfer_with_grad(fw.glasses_worn["positions"], worn_target)
    g_glasses_worn["positions"] = g_glasses_worn["positions"] + weights.chamfer * g_cham_worn

    g_canon_fields = _grads_to_fields(sg_canon.sets["glasses"])
    g_canon_fields["positions"] = g_canon_fields["positions"] + weights.chamfer * g_cham_canon

    g_mu, g_sigma = kl_divergence_grads(fw.mu, fw.sigma)
    g_mu, g_sigma = weights.kl * g_mu, weights.kl * g_sigma
    g_face_res_extra = {
        "delta_positions": 2 * weights.l2 * fw.face_res["delta_positions"],
        "delta_rotvec": 2 * weights.l2 * fw.face_res["delta_rotvec"],
        "delta_scales": 2 * weights.l2 * fw.face_res["delta_scales"],
    }
    grads = geometry_backward(
        params, cfg, fw, g_face, g_glasses_worn,
        g_glasses_canon=g_canon_fields, g_face_res_extra=g_face_res_extra,
        g_mu=g_mu, g_sigma=g_sigma, head_id=frame.head_id, grads={},
    )
    return total, comps, grads


# ---------------------------------------------------------------------------
# Stage 1


def train_stage_geometry(dataset, cfg: dec.MorphConfig, tconf: TrainConfig,
                         params=None, log=None):
    """Face pretraining then joint geometry training on fully-lit frames."""
    spec = dataset.spec
    if params is None:
        from ..scenes import glasses_layout, head_layout, blend_styles

        mean_style = spec.glasses[0]
        for other in spec.glasses[1:]:
            mean_style = blend_styles(mean_style, other, 0.5)
        pos, qs, sc, _ = head_layout(spec.heads[0], spec.face_prims_side)
        params = dec.init_params(
            cfg, seed=tconf.seed,
            face_layout=(pos, qs, sc),
            glasses_layout=glasses_layout(mean_style, spec.glasses_prims),
        )
    rng = np.random.default_rng(tconf.seed)
    rcfg = tconf.render_config
    cam_ids = sorted(dataset.cameras)
    train_cams = cam_ids[:-1] if len(cam_ids) > 1 else cam_ids

    face_frames = [f for f in dataset.frames if f.glasses_id is None and f.kind == "fully_lit"]
    joint_frames = [f for f in dataset.frames if f.glasses_id is not None and f.kind == "fully_lit"]

    state = AdamState(params)
    history = []
    for it in range(tconf.iterations_face):
        frame = face_frames[rng.integers(len(face_frames))]
        cam_id = train_cams[rng.integers(len(train_cams))]
        total, comps, grads = fully_lit_step(
            params, cfg, dataset, frame, cam_id, tconf.weights, rcfg, None, tconf.workers
        )
        params, state = adam_step(params, filter_blocks(grads, FACE_BLOCKS), state, lr=tconf.lr)
        history.append({"phase": "face", "iter": it, **{k: v for k, v in comps.items() if k != "unavailable"}})
        if log and it % tconf.log_every == 0:
            log(history[-1])

    state = AdamState(params)
    for it in range(tconf.iterations_joint):
        frame = joint_frames[rng.integers(len(joint_frames))]
        cam_id = train_cams[rng.integers(len(train_cams))]
        total, comps, grads = fully_lit_step(
            params, cfg, dataset, frame, cam_id, tconf.weights, rcfg, rng, tconf.workers
        )
        params, state = adam_step(params, filter_blocks(grads, GEOMETRY_BLOCKS), state, lr=tconf.lr)
        history.append({"phase": "joint", "iter": it, **{k: v for k, v in comps.items() if k != "unavailable"}})
        if log and it % tconf.log_every == 0:
            log(history[-1])
    return params, history


# ---------------------------------------------------------------------------
# Stage 2


def interpolated_geometry(params, cfg, dataset, frame):
    """Worn face and glasses sets for a group-lit frame, interpolated between
    its bracketing fully-lit frames (inference mode, no sampling)."""
    lo_idx, hi_idx, t = frame.bracket
    frame_by_index = {f.index: f for f in dataset.frames}
    lo, hi = frame_by_index[lo_idx], frame_by_index[hi_idx]
    sets = {}
    fws = []
    for bracket_frame in (lo, hi):
        fw = geometry_forward(params, cfg, bracket_frame.expression, frame.head_id,
                              frame.glasses_id, sample_rng=None)
        fws.append(fw)
    face = interpolate_sets(make_set(fws[0].face_worn), make_set(fws[1].face_worn), t)
    sets["face"] = face
    if frame.glasses_id is not None:
        sets["glasses"] = interpolate_sets(
            make_set(fws[0].glasses_worn), make_set(fws[1].glasses_worn), t
        )
    return sets, fws[0]


def _frame_features(params, cfg, dataset, frame, scene, rcfg, cache, workers=1):
    key = frame.index
    if key in cache:
        return cache[key]
    light = dataset.lights[frame.light_index]
    feats = LightingFeatures()
    feats.shadow = shadow_feature(scene, light, rcfg, workers=workers)
    for label, pset in scene.sets:
        m = pset.grid_resolution
        if label == "glasses" and frame.worn_mesh_vertices is not None:
            base = dataset.glasses_meshes[frame.glasses_id]
            verts = frame.worn_mesh_vertices
            normals = compute_vertex_normals(verts, base.faces)
            feats.normals[label] = assign_normals(pset, TriMesh(verts, base.faces, normals))
        else:
            feats.normals[label] = np.zeros((pset.count, 3, m, m, m))
    cache[key] = feats
    return feats


def group_lit_step(params, cfg, dataset, frame, cam_id, rcfg, feature_cache, workers=1):
    """Loss and appearance-parameter gradients for one group-lit frame/view."""
    sets, fw = interpolated_geometry(params, cfg, dataset, frame)
    scene = Scene(tuple(sets.items()), np.asarray(dataset.spec.background))
    camera = dataset.cameras[cam_id]
    light = dataset.lights[frame.light_index]
    feats = _frame_features(params, cfg, dataset, frame, scene, rcfg, feature_cache, workers)

    latents = {"z_e": fw.z_e, "z_ftex": fw.z_ftex,
               "z_gtex": fw.z_gtex, "z_ggeo": fw.z_ggeo}
    colors = {}
    caches = {}
    ctx_f = build_shading_context(scene, "face", feats, camera, light, cfg.roughness)
    a_f, c_af = dec.decode_appearance(params, cfg, "face", ctx_f, latents)
    if frame.glasses_id is not None:
        a_df, c_adf = dec.decode_appearance(params, cfg, "face_residual", ctx_f, latents)
        colors["face"] = a_f + a_df
        caches["face_residual"] = c_adf
        ctx_g = build_shading_context(scene, "glasses", feats, camera, light, cfg.roughness)
        a_g, c_ag = dec.decode_appearance(params, cfg, "glasses", ctx_g, latents)
        colors["glasses"] = a_g
        caches["glasses"] = c_ag
    else:
        colors["face"] = a_f
    caches["face"] = c_af

    relit = scene.with_payloads(colors)
    origins, dirs = camera.rays()
    rgb, _, _, _ = _run_tiles(relit, origins, dirs, rcfg, early_stop=False, workers=workers)
    img = rgb.reshape(camera.height, camera.width, 3)
    gt = frame.images[cam_id].data
    total = loss_group_lit(img, gt)
    g_img = 2.0 * (img - gt) / img.size
    sg = render_backward(relit, camera, rcfg, g_img, workers=workers)

    grads = {}
    g_face_color = sg.sets["face"].color
    dec.decode_appearance_backward(params, cfg, caches["face"], g_face_color, grads)
    if frame.glasses_id is not None:
        dec.decode_appearance_backward(params, cfg, caches["face_residual"], g_face_color, grads)
        dec.decode_appearance_backward(params, cfg, caches["glasses"], sg.sets["glasses"].color, grads)
    return total, grads


def train_stage_appearance(dataset, cfg, tconf: TrainConfig, geo_params, log=None):
    """Stage 2: freeze the geometry blocks and train the appearance decoders
    under the group-lit MSE. Returns (params, history); every geometry block
    in the returned params is the same object passed in (bit-identical)."""
    params = dict(geo_params)
    rng = np.random.default_rng(tconf.seed + 1)
    rcfg = tconf.render_config
    cam_ids = sorted(dataset.cameras)
    train_cams = cam_ids[:-1] if len(cam_ids) > 1 else cam_ids
    feature_cache = {}

    face_frames = [f for f in dataset.frames if f.glasses_id is None and f.kind == "group_lit"]
    joint_frames = [f for f in dataset.frames if f.glasses_id is not None and f.kind == "group_lit"]

    history = []
    state = AdamState(params)
    for it in range(tconf.iterations_app_face):
        frame = face_frames[rng.integers(len(face_frames))]
        cam_id = train_cams[rng.integers(len(train_cams))]
        total, grads = group_lit_step(params, cfg, dataset, frame, cam_id, rcfg,
                                      feature_cache, tconf.workers)
        params, state = adam_step(params, filter_blocks(grads, ("app_f",)), state, lr=tconf.lr)
        history.append({"phase": "app_face", "iter": it, "mse": total})
        if log and it % tconf.log_every == 0:
            log(history[-1])

    state = AdamState(params)
    for it in range(tconf.iterations_app_joint):
        frame = joint_frames[rng.integers(len(joint_frames))]
        cam_id = train_cams[rng.integers(len(train_cams))]
        total, grads = group_lit_step(params, cfg, dataset, frame, cam_id, rcfg,
                                      feature_cache, tconf.workers)
        params, state = adam_step(params, filter_blocks(grads, APPEARANCE_BLOCKS), state, lr=tconf.lr)
        history.append({"phase": "app_joint", "iter": it, "mse": total})
        if log and it % tconf.log_every == 0:
            log(history[-1])
    return params, history


# ---------------------------------------------------------------------------
# Inference helpers


def render_fully_lit(params, cfg, dataset, frame, cam_id, rcfg=None, workers=1):
    rcfg = rcfg or RenderConfig(step_size=0.02, early_stop_transmittance=1e-5)
    fw = geometry_forward(params, cfg, frame.expression, frame.head_id, frame.glasses_id)
    sets = [("face", make_set(fw.face_worn))]
    if frame.glasses_id is not None:
        sets.append(("glasses", make_set(fw.glasses_worn)))
    scene = Scene(tuple(sets), np.asarray(dataset.spec.background))
    return render(scene, dataset.cameras[cam_id], rcfg, workers=workers)


def render_group_lit(params, cfg, dataset, frame, cam_id, rcfg=None, feature_cache=None, workers=1):
    rcfg = rcfg or RenderConfig(step_size=0.02, early_stop_transmittance=1e-5)
    sets, fw = interpolated_geometry(params, cfg, dataset, frame)
    scene = Scene(tuple(sets.items()), np.asarray(dataset.spec.background))
    camera = dataset.cameras[cam_id]
    light = dataset.lights[frame.light_index]
    feats = _frame_features(params, cfg, dataset, frame, scene, rcfg,
                            feature_cache if feature_cache is not None else {}, workers)
    latents = {"z_e": fw.z_e, "z_ftex": fw.z_ftex, "z_gtex": fw.z_gtex, "z_ggeo": fw.z_ggeo}
    colors = {}
    ctx_f = build_shading_context(scene, "face", feats, camera, light, cfg.roughness)
    a_f, _ = dec.decode_appearance(params, cfg, "face", ctx_f, latents)
    colors["face"] = a_f
    if frame.glasses_id is not None:
        a_df, _ = dec.decode_appearance(params, cfg, "face_residual", ctx_f, latents)
        colors["face"] = a_f + a_df
        ctx_g = build_shading_context(scene, "glasses", feats, camera, light, cfg.roughness)
        a_g, _ = dec.decode_appearance(params, cfg, "glasses", ctx_g, latents)
        colors["glasses"] = a_g
    relit = scene.with_payloads(colors)
    return render(relit, camera, rcfg, workers=workers)


# ---------------------------------------------------------------------------
# Few-shot latent fitting


def fit_few_shot(images: dict, cameras: dict, params, cfg, iterations=300,
                 lr=0.03, seed=0, init=None, background=(0.0, 0.0, 0.0),
                 rcfg=None, workers=1, log=None):
    """Adam on the glasses latent codes only (decoder parameters frozen),
    minimizing the summed photometric L1 against the posed target images.
    Returns (z_geo, z_tex, info) with the best-loss latents."""
    if not images:
        raise ValueError("need at least one posed image")
    missing = [cid for cid in images if cid not in cameras]
    if missing:
        raise ValueError(f"images without camera poses: {missing}")
    rcfg = rcfg or RenderConfig(step_size=0.03, early_stop_transmittance=1e-7)
    rng = np.random.default_rng(seed)
    d = cfg.latent_dim
    if init is None:
        z = {"z_geo": 0.3 * rng.standard_normal(d), "z_tex": 0.3 * rng.standard_normal(d)}
    else:
        z = {"z_geo": np.array(init[0], dtype=float), "z_tex": np.array(init[1], dtype=float)}
    state = AdamState(z)
    best = (np.inf, dict(z))
    history = []
    bg = np.asarray(background, dtype=float)
    for it in range(iterations):
        fields, cache = dec.decode_glasses(params, cfg, z["z_geo"], z["z_tex"])
        scene = Scene((("glasses", make_set(fields)),), bg)
        total = 0.0
        gf_total = None
        for cid, target in images.items():
            camera = cameras[cid]
            origins, dirs = camera.rays()
            rgb, _, _, _ = _run_tiles(scene, origins, dirs, rcfg, early_stop=False, workers=workers)
            img = rgb.reshape(camera.height, camera.width, 3)
            diff = img - target.data
            total += float(np.mean(np.abs(diff)))
            g_img = np.sign(diff) / diff.size
            sg = render_backward(scene, camera, rcfg, g_img, workers=workers)
            gf = _grads_to_fields(sg.sets["glasses"])
            gf_total = gf if gf_total is None else _add_fields(gf_total, gf)
        if total < best[0]:
            best = (total, dict(z))
        grads = {}
        g_zgeo, g_ztex = dec.decode_glasses_backward(params, cfg, cache, gf_total, grads)
        z, state = adam_step(z, {"z_geo": g_zgeo, "z_tex": g_ztex}, state, lr=lr)
        history.append(total)
        if log and it % 50 == 0:
            log({"iter": it, "l1": total})
    return best[1]["z_geo"], best[1]["z_tex"], {"best_loss": best[0], "history": history}
