"""Toy generative decoders: small fully-connected stacks (linear + leaky-ReLU
slope 0.2) that emit primitive sets, deformation residuals, and relit color
payloads with the same tensor contracts as the full-scale networks they stand
in for. Geometry heads are zero-initialized on top of learnable canonical
templates, so residual paths start exactly at identity.

Appearance decoders condition a shared per-voxel head on a learnable
per-voxel embedding (standing in for a conv decoder's spatial structure), the
per-voxel lighting features, and a trunk over latents and view/light
directions; outputs are multiplied by the light intensity so zero light gives
exactly zero radiance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from ..errors import DimensionError
from ..geom import (
    quat_matrix_backward,
    quat_multiply,
    quat_multiply_backward,
    quat_normalize,
    quat_to_matrix,
    rotvec_to_quat,
    rotvec_to_quat_backward,
)

LEAK = 0.2


@dataclass(frozen=True)
class MorphConfig:
    """Dimensions and layout of the decoder family. Defaults are the desk
    defaults (16x16 face primitives, 8x8 glasses primitives, M=8); the toy
    training configs shrink them."""

    latent_dim: int = 16
    expression_input_dim: int = 2
    n_glasses_ids: int = 43
    n_face_ids: int = 2
    face_prims: int = 256
    glasses_prims: int = 64
    grid_resolution: int = 8
    trunk_hidden: int = 64
    head_hidden: int = 48
    voxel_embed_dim: int = 8
    roughness: tuple = (64.0, 128.0, 1000.0)
    scale_floor: float = 1e-4

    @property
    def voxels_per_prim(self) -> int:
        return self.grid_resolution**3


# ---------------------------------------------------------------------------
# Small MLP machinery over a flat parameter dict


def _linear_params(rng, n_in, n_out, zero=False):
    if zero:
        w = np.zeros((n_out, n_in))
    else:
        w = rng.normal(scale=np.sqrt(2.0 / n_in), size=(n_out, n_in))
    return w, np.zeros(n_out)


def linear_forward(params, name, x):
    return x @ params[f"{name}.w"].T + params[f"{name}.b"]


def linear_backward(params, name, x, gy, grads):
    _acc(grads, f"{name}.w", gy.T @ x if x.ndim == 2 else np.outer(gy, x))
    _acc(grads, f"{name}.b", gy.sum(axis=0) if gy.ndim == 2 else gy)
    return gy @ params[f"{name}.w"]


def leaky_forward(x):
    return np.where(x > 0, x, LEAK * x)


def leaky_backward(x, gy):
    return np.where(x > 0, gy, LEAK * gy)


def _acc(grads, name, value):
    if name in grads:
        grads[name] = grads[name] + value
    else:
        grads[name] = value


def mlp_init(rng, params, prefix, sizes, zero_last=False):
    for i in range(len(sizes) - 1):
        zero = zero_last and i == len(sizes) - 2
        w, b = _linear_params(rng, sizes[i], sizes[i + 1], zero=zero)
        params[f"{prefix}.l{i}.w"] = w
        params[f"{prefix}.l{i}.b"] = b


def mlp_forward(params, prefix, x, n_layers):
    """Linear stacks with leaky-ReLU between layers (none after the last)."""
    cache = {"inputs": [], "pre": []}
    h = x
    for i in range(n_layers):
        cache["inputs"].append(h)
        pre = linear_forward(params, f"{prefix}.l{i}", h)
        cache["pre"].append(pre)
        h = leaky_forward(pre) if i < n_layers - 1 else pre
    return h, cache


def mlp_backward(params, prefix, cache, gy, grads):
    n_layers = len(cache["inputs"])
    g = gy
    for i in reversed(range(n_layers)):
        if i < n_layers - 1:
            g = leaky_backward(cache["pre"][i], g)
        g = linear_backward(params, f"{prefix}.l{i}", cache["inputs"][i], g, grads)
    return g


def softplus(x):
    return np.logaddexp(0.0, x)


def inv_softplus(y):
    return y + np.log(-np.expm1(-y))


# ---------------------------------------------------------------------------
# Canonical layout templates


def ellipsoid_layout(n_side: int, radii=(0.42, 0.55, 0.45), thickness=0.07):
    """Primitive frames tiling an ellipsoid shell, facing +z forward."""
    radii = np.asarray(radii, dtype=float)
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
    span_t = radii.mean() * (thetas[1] - thetas[0]) if n_side > 1 else 0.4
    span_p = radii.mean() * (phis[1] - phis[0]) if n_side > 1 else 0.4
    scales = np.tile([0.75 * span_p, 0.75 * span_t, thickness], (positions.shape[0], 1))
    return positions, quats, scales


def ring_glasses_layout(
    n_prims: int,
    ring_radius: float = 0.16,
    bridge_width: float = 0.10,
    thickness: float = 0.035,
):
    """Primitive frames tracing two rings plus a bridge, in the z=0 plane,
    centered at the origin (canonical space)."""
    per_ring = max((n_prims - 2) // 2, 3)
    centers, quats, scales = [], [], []
    offset = bridge_width / 2 + ring_radius
    for sign in (-1.0, 1.0):
        cx = sign * offset
        angs = np.linspace(0, 2 * np.pi, per_ring, endpoint=False)
        arc = 2 * np.pi * ring_radius / per_ring
        for a in angs:
            centers.append([cx + ring_radius * np.cos(a), ring_radius * np.sin(a), 0.0])
            tangent = np.array([-np.sin(a), np.cos(a), 0.0])
            quats.append(_frames_from_normals(np.array([[0.0, 0, 1]]), x_hint=tangent)[0])
            scales.append([0.62 * arc, thickness, thickness])
    used = 2 * per_ring
    for i in range(n_prims - used):
        centers.append([0.0, ring_radius * 0.9, 0.0])
        quats.append([1.0, 0.0, 0.0, 0.0])
        scales.append([bridge_width * 0.7, thickness, thickness])
    return np.asarray(centers), np.asarray(quats, dtype=float), np.asarray(scales)


def _frames_from_normals(normals, x_hint=None):
    """Unit quaternions whose local z axis equals the given normals."""
    normals = np.atleast_2d(normals)
    n = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    if x_hint is None:
        helper = np.where(np.abs(n[:, 1:2]) < 0.9, [0.0, 1.0, 0.0], [1.0, 0.0, 0.0])
    else:
        helper = np.broadcast_to(np.asarray(x_hint, dtype=float), n.shape)
    x = np.cross(helper, n)
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    y = np.cross(n, x)
    mats = np.stack([x, y, n], axis=-1)  # columns are the local axes
    return _quat_from_matrix(mats)


def _quat_from_matrix(mats):
    m = mats
    t = np.trace(m, axis1=1, axis2=2)
    q = np.empty((m.shape[0], 4))
    for i in range(m.shape[0]):
        tr = t[i]
        a = m[i]
        if tr > 0:
            s = np.sqrt(tr + 1.0) * 2
            q[i] = [0.25 * s, (a[2, 1] - a[1, 2]) / s, (a[0, 2] - a[2, 0]) / s, (a[1, 0] - a[0, 1]) / s]
        elif a[0, 0] > a[1, 1] and a[0, 0] > a[2, 2]:
            s = np.sqrt(1.0 + a[0, 0] - a[1, 1] - a[2, 2]) * 2
            q[i] = [(a[2, 1] - a[1, 2]) / s, 0.25 * s, (a[0, 1] + a[1, 0]) / s, (a[0, 2] + a[2, 0]) / s]
        elif a[1, 1] > a[2, 2]:
            s = np.sqrt(1.0 + a[1, 1] - a[0, 0] - a[2, 2]) * 2
            q[i] = [(a[0, 2] - a[2, 0]) / s, (a[0, 1] + a[1, 0]) / s, 0.25 * s, (a[1, 2] + a[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + a[2, 2] - a[0, 0] - a[1, 1]) * 2
            q[i] = [(a[1, 0] - a[0, 1]) / s, (a[0, 2] + a[2, 0]) / s, (a[1, 2] + a[2, 1]) / s, 0.25 * s]
    return quat_normalize(q)


def taper_grid(m: int) -> np.ndarray:
    t = np.sin(np.pi * np.arange(m) / (m - 1))
    return (t[:, None, None] * t[None, :, None] * t[None, None, :]).reshape(-1)


# ---------------------------------------------------------------------------
# Parameter initialization


def init_params(
    config: MorphConfig,
    seed: int = 0,
    face_layout=None,
    glasses_layout=None,
) -> dict:
    """All trainable blocks for the decoder family, as a flat named dict."""
    rng = np.random.default_rng(seed)
    d = config.latent_dim
    h = config.trunk_hidden
    params = {}

    # glasses encoder: one-hot -> (mu, raw sigma) over the 2D glasses codes
    mlp_init(rng, params, "enc_g", (config.n_glasses_ids, h, 4 * d))
    # expression encoder and face identity embeddings
    mlp_init(rng, params, "enc_e", (config.expression_input_dim, 32, d))
    params["face_embed.geo"] = 0.1 * rng.normal(size=(config.n_face_ids, d))
    params["face_embed.tex"] = 0.1 * rng.normal(size=(config.n_face_ids, d))

    if face_layout is None:
        face_layout = ellipsoid_layout(int(round(np.sqrt(config.face_prims))))
    if glasses_layout is None:
        glasses_layout = ring_glasses_layout(config.glasses_prims)

    for name, layout, n, zdim in (
        ("dec_f", face_layout, config.face_prims, 3 * d),
        ("dec_g", glasses_layout, config.glasses_prims, 2 * d),
    ):
        pos, quats, scales = layout
        if pos.shape[0] != n:
            raise DimensionError(
                f"{name}: layout provides {pos.shape[0]} primitives, config wants {n}"
            )
        v = config.voxels_per_prim
        params[f"{name}.template_pos"] = np.array(pos)
        params[f"{name}.template_quat"] = np.array(quats)
        params[f"{name}.template_logscale"] = np.log(np.array(scales))
        params[f"{name}.opa_bias"] = np.full((n, v), inv_softplus(8.0))
        params[f"{name}.col_bias"] = np.zeros((n, 3 * v))
        mlp_init(rng, params, f"{name}.trunk", (zdim, h, h))
        for head, out in (
            ("pos", 3 * n), ("rot", 3 * n), ("scale", 3 * n),
            ("opa", n * v), ("col", 3 * n * v),
        ):
            w, b = _linear_params(rng, h, out, zero=True)
            params[f"{name}.{head}.w"] = w
            params[f"{name}.{head}.b"] = b

    # interaction residual decoders (all heads zero-initialized -> identity)
    mlp_init(rng, params, "dec_df.trunk", (3 * d, h, h))
    for head, out in (("pos", 3 * config.face_prims), ("rot", 3 * config.face_prims),
                      ("scale", 3 * config.face_prims)):
        w, b = _linear_params(rng, h, out, zero=True)
        params[f"dec_df.{head}.w"] = w
        params[f"dec_df.{head}.b"] = b
    mlp_init(rng, params, "dec_deform.trunk", (2 * d, h, h))
    for head, out in (("pos", 3 * config.glasses_prims), ("rot", 3 * config.glasses_prims),
                      ("scale", 3 * config.glasses_prims)):
        w, b = _linear_params(rng, h, out, zero=True)
        params[f"dec_deform.{head}.w"] = w
        params[f"dec_deform.{head}.b"] = b
    mlp_init(rng, params, "dec_transf", (2 * d, h, 6), zero_last=True)

    # appearance decoders: trunk + shared per-voxel head + voxel embeddings
    e = config.voxel_embed_dim
    hh = config.head_hidden
    nf, ng = config.face_prims, config.glasses_prims
    v = config.voxels_per_prim
    params["app_f.embed"] = 0.1 * rng.normal(size=(nf * v, e))
    params["app_df.embed"] = 0.1 * rng.normal(size=(nf * v, e))
    params["app_g.embed"] = 0.1 * rng.normal(size=(ng * v, e))
    # trunks: A_f(z_e, z_tex, v, l); A_df(l, z_gtex, z_ftex); A_g(v, l, z_gtex, z_ggeo)
    mlp_init(rng, params, "app_f.trunk", (2 * d + 6, h, 32))
    mlp_init(rng, params, "app_df.trunk", (2 * d + 3, h, 32))
    mlp_init(rng, params, "app_g.trunk", (2 * d + 6, h, 32))
    # heads: embed + trunk features + per-voxel inputs -> rgb
    mlp_init(rng, params, "app_f.head", (e + 32 + 3 + 6, hh, hh, 3))
    mlp_init(rng, params, "app_df.head", (e + 32 + 1 + 3, hh, hh, 3), zero_last=True)
    mlp_init(rng, params, "app_g.head", (e + 32 + 1 + 3 + 3 + 6, hh, hh, 3))
    return params


# ---------------------------------------------------------------------------
# Encoders


def encode_glasses(params, config: MorphConfig, one_hot, rng=None, sample=False):
    """Variational glasses encoding. Returns (z_geo, z_tex, mu, sigma, cache);
    at inference (sample=False) the codes are the mean."""
    one_hot = np.asarray(one_hot, dtype=float).reshape(-1)
    if one_hot.shape[0] != config.n_glasses_ids:
        raise DimensionError(
            f"one-hot length {one_hot.shape[0]} != {config.n_glasses_ids} glasses ids"
        )
    hot = np.nonzero(one_hot)[0]
    if hot.size != 1:
        raise DimensionError(f"one-hot vector must have exactly one active entry, got {hot.size}")
    d = config.latent_dim
    out, mlp_cache = mlp_forward(params, "enc_g", one_hot[None], 2)
    out = out[0]
    mu, raw = out[: 2 * d], out[2 * d :]
    sigma = softplus(raw) + 1e-6
    if sample:
        xi = (rng or np.random.default_rng()).standard_normal(2 * d)
        z = mu + sigma * xi
    else:
        xi = np.zeros(2 * d)
        z = mu
    cache = {"mlp": mlp_cache, "raw": raw, "xi": xi, "sample": sample, "sigma": sigma}
    return z[:d], z[d:], mu, sigma, cache


def encode_glasses_backward(params, config, cache, g_zgeo, g_ztex, g_mu=None, g_sigma=None, grads=None):
    grads = grads if grads is not None else {}
    d = config.latent_dim
    g_z = np.concatenate([g_zgeo, g_ztex])
    gmu = g_z.copy()
    if g_mu is not None:
        gmu = gmu + g_mu
    gsig = cache["xi"] * g_z if cache["sample"] else np.zeros(2 * d)
    if g_sigma is not None:
        gsig = gsig + g_sigma
    graw = gsig * expit(cache["raw"])
    gout = np.concatenate([gmu, graw])[None]
    mlp_backward(params, "enc_g", cache["mlp"], gout, grads)
    return grads


def encode_expression(params, config: MorphConfig, expr):
    expr = np.asarray(expr, dtype=float).reshape(-1)
    z, cache = mlp_forward(params, "enc_e", expr[None], 2)
    return z[0], cache


def encode_expression_backward(params, cache, g_z, grads):
    mlp_backward(params, "enc_e", cache, g_z[None], grads)


# ---------------------------------------------------------------------------
# Geometry decoders


def _decode_setfields(params, config, name, z):
    """Shared body of the face / glasses geometry decoders."""
    n = config.face_prims if name == "dec_f" else config.glasses_prims
    v = config.voxels_per_prim
    m = config.grid_resolution
    h, trunk_cache = mlp_forward(params, f"{name}.trunk", z[None], 2)
    h = leaky_forward(h)
    hc = h[0]
    dpos = linear_forward(params, f"{name}.pos", hc).reshape(n, 3)
    drot = linear_forward(params, f"{name}.rot", hc).reshape(n, 3)
    dls = linear_forward(params, f"{name}.scale", hc).reshape(n, 3)
    raw_o = linear_forward(params, f"{name}.opa", hc).reshape(n, v) + params[f"{name}.opa_bias"]
    raw_c = linear_forward(params, f"{name}.col", hc).reshape(n, 3 * v) + params[f"{name}.col_bias"]

    positions = params[f"{name}.template_pos"] + dpos
    dq = rotvec_to_quat(drot)
    rotations = quat_normalize(quat_multiply(dq, params[f"{name}.template_quat"]))
    logscale = params[f"{name}.template_logscale"] + dls
    scales = np.exp(logscale)
    taper = taper_grid(m)
    sp = softplus(raw_o)
    opacity = (sp * taper).reshape(n, m, m, m)
    col_sig = expit(raw_c)
    color = col_sig.reshape(n, 3, m, m, m)
    cache = {
        "trunk": trunk_cache, "h_pre": h, "hc": hc, "drot": drot, "dq": dq,
        "raw_o": raw_o, "raw_c": raw_c, "logscale": logscale, "taper": taper,
        "n": n, "v": v, "m": m, "z": z, "col_sig": col_sig,
    }
    fields = {
        "positions": positions, "rotations": rotations, "scales": scales,
        "opacity": opacity, "color": color,
    }
    return fields, cache


def _decode_setfields_backward(params, config, name, cache, gfields, grads):
    n, v, m = cache["n"], cache["v"], cache["m"]
    hc = cache["hc"]
    g_hc = np.zeros_like(hc)

    g_pos = gfields.get("positions")
    if g_pos is not None:
        _acc(grads, f"{name}.template_pos", g_pos)
        g_hc += linear_backward(params, f"{name}.pos", hc, g_pos.reshape(-1), grads)

    g_rot = gfields.get("rotations")
    if g_rot is not None:
        q_raw = quat_multiply(cache["dq"], params[f"{name}.template_quat"])
        norm = np.linalg.norm(q_raw, axis=-1, keepdims=True)
        qn = q_raw / norm
        g_qraw = (g_rot - qn * np.sum(g_rot * qn, axis=-1, keepdims=True)) / norm
        g_dq, g_tq = quat_multiply_backward(cache["dq"], params[f"{name}.template_quat"], g_qraw)
        _acc(grads, f"{name}.template_quat", g_tq)
        g_drot = rotvec_to_quat_backward(cache["drot"], g_dq)
        g_hc += linear_backward(params, f"{name}.rot", hc, g_drot.reshape(-1), grads)

    g_scale = gfields.get("scales")
    if g_scale is not None:
        g_ls = g_scale * np.exp(cache["logscale"])
        _acc(grads, f"{name}.template_logscale", g_ls)
        g_hc += linear_backward(params, f"{name}.scale", hc, g_ls.reshape(-1), grads)

    g_opa = gfields.get("opacity")
    if g_opa is not None:
        g_sp = g_opa.reshape(n, v) * cache["taper"]
        g_raw_o = g_sp * expit(cache["raw_o"])
        _acc(grads, f"{name}.opa_bias", g_raw_o)
        g_hc += linear_backward(params, f"{name}.opa", hc, g_raw_o.reshape(-1), grads)

    g_col = gfields.get("color")
    if g_col is not None:
        sig = cache["col_sig"]
        g_raw_c = g_col.reshape(n, 3 * v) * sig * (1 - sig)
        _acc(grads, f"{name}.col_bias", g_raw_c)
        g_hc += linear_backward(params, f"{name}.col", hc, g_raw_c.reshape(-1), grads)

    g_h = leaky_backward(cache["h_pre"], g_hc[None])
    g_z = mlp_backward(params, f"{name}.trunk", cache["trunk"], g_h, grads)
    return g_z[0]


def decode_face(params, config: MorphConfig, z_e, z_geo, z_tex):
    z = np.concatenate([z_e, z_geo, z_tex])
    return _decode_setfields(params, config, "dec_f", z)


def decode_face_backward(params, config, cache, gfields, grads):
    d = config.latent_dim
    g_z = _decode_setfields_backward(params, config, "dec_f", cache, gfields, grads)
    return g_z[:d], g_z[d : 2 * d], g_z[2 * d :]


def decode_glasses(params, config: MorphConfig, z_geo, z_tex):
    z = np.concatenate([z_geo, z_tex])
    return _decode_setfields(params, config, "dec_g", z)


def decode_glasses_backward(params, config, cache, gfields, grads):
    d = config.latent_dim
    g_z = _decode_setfields_backward(params, config, "dec_g", cache, gfields, grads)
    return g_z[:d], g_z[d:]


# ---------------------------------------------------------------------------
# Interaction residual decoders


def _residual_heads(params, config, name, z, n):
    h, trunk_cache = mlp_forward(params, f"{name}.trunk", z[None], 2)
    h = leaky_forward(h)
    hc = h[0]
    dpos = linear_forward(params, f"{name}.pos", hc).reshape(n, 3)
    drot = linear_forward(params, f"{name}.rot", hc).reshape(n, 3)
    dscale = linear_forward(params, f"{name}.scale", hc).reshape(n, 3)
    return dpos, drot, dscale, {"trunk": trunk_cache, "h_pre": h, "hc": hc}


def _residual_heads_backward(params, name, cache, g_dpos, g_drot, g_dscale, grads):
    hc = cache["hc"]
    g_hc = linear_backward(params, f"{name}.pos", hc, g_dpos.reshape(-1), grads)
    g_hc += linear_backward(params, f"{name}.rot", hc, g_drot.reshape(-1), grads)
    g_hc += linear_backward(params, f"{name}.scale", hc, g_dscale.reshape(-1), grads)
    g_h = leaky_backward(cache["h_pre"], g_hc[None])
    return mlp_backward(params, name + ".trunk", cache["trunk"], g_h, grads)[0]


def decode_residuals(params, config: MorphConfig, z_e, z_ggeo, z_fgeo, glasses_positions):
    """Face residual from the interaction decoder; glasses residual as the sum
    of an identity-conditioned non-rigid term (no expression input) and an
    expression-conditioned rigid term applied to all glasses primitives."""
    nf, ng = config.face_prims, config.glasses_prims
    z_df = np.concatenate([z_e, z_ggeo, z_fgeo])
    f_dpos, f_drot, f_dscale, c_df = _residual_heads(params, config, "dec_df", z_df, nf)

    z_deform = np.concatenate([z_ggeo, z_fgeo])
    g_dpos, g_drot, g_dscale, c_deform = _residual_heads(params, config, "dec_deform", z_deform, ng)

    z_tr = np.concatenate([z_e, z_ggeo])
    tr, c_tr = mlp_forward(params, "dec_transf", z_tr[None], 2)
    tr = tr[0]
    rotvec_t, trans_t = tr[:3], tr[3:]
    q_t = rotvec_to_quat(rotvec_t)
    r_t = quat_to_matrix(q_t)
    # rigid term moves primitive centers as R_T p + t_T
    rigid_dpos = glasses_positions @ r_t.T + trans_t - glasses_positions

    glasses_res = {
        "delta_positions": g_dpos + rigid_dpos,
        "delta_rotvec_deform": g_drot,
        "delta_rotvec_transf": rotvec_t,
        "delta_scales": g_dscale,
    }
    face_res = {
        "delta_positions": f_dpos,
        "delta_rotvec": f_drot,
        "delta_scales": f_dscale,
    }
    cache = {
        "c_df": c_df, "c_deform": c_deform, "c_tr": c_tr,
        "rotvec_t": rotvec_t, "q_t": q_t, "r_t": r_t,
        "glasses_positions": glasses_positions,
        "g_drot": g_drot, "f_drot": f_drot,
    }
    return glasses_res, face_res, cache


def residual_quats(res: dict) -> np.ndarray:
    """Composed unit delta quaternions for a glasses residual (transf applied
    on the left of the non-rigid term) or a face residual."""
    if "delta_rotvec" in res:
        return rotvec_to_quat(res["delta_rotvec"])
    q_deform = rotvec_to_quat(res["delta_rotvec_deform"])
    q_t = rotvec_to_quat(res["delta_rotvec_transf"])
    return quat_normalize(quat_multiply(q_t[None], q_deform))


def decode_residuals_backward(
    params, config, cache, g_glasses, g_face, grads
):
    """g_glasses / g_face carry gradients for the residual dicts (positions,
    rotvec terms, scales). Returns (g_z_e, g_z_ggeo, g_z_fgeo,
    g_glasses_positions)."""
    d = config.latent_dim

    # face branch
    g_z_df = _residual_heads_backward(
        params, "dec_df", cache["c_df"],
        g_face["delta_positions"],
        g_face["delta_rotvec"],
        g_face["delta_scales"],
        grads,
    )
    g_ze = g_z_df[:d].copy()
    g_zgg = g_z_df[d : 2 * d].copy()
    g_zfg = g_z_df[2 * d :].copy()

    # glasses non-rigid branch
    g_z_deform = _residual_heads_backward(
        params, "dec_deform", cache["c_deform"],
        g_glasses["delta_positions"],
        g_glasses["delta_rotvec_deform"],
        g_glasses["delta_scales"],
        grads,
    )
    g_zgg += g_z_deform[:d]
    g_zfg += g_z_deform[d:]

    # rigid branch: rigid_dpos = p @ R^T + t - p
    gp = g_glasses["delta_positions"]
    p = cache["glasses_positions"]
    g_rt = gp.T @ p  # dL/dR_T
    g_trans = gp.sum(axis=0)
    g_quat = quat_matrix_backward(cache["q_t"], g_rt)
    g_rotvec_t = rotvec_to_quat_backward(cache["rotvec_t"], g_quat)
    g_rotvec_t = g_rotvec_t + g_glasses["delta_rotvec_transf"]
    g_tr_out = np.concatenate([g_rotvec_t, g_trans])[None]
    g_z_tr = mlp_backward(params, "dec_transf", cache["c_tr"], g_tr_out, grads)[0]
    g_ze += g_z_tr[:d]
    g_zgg += g_z_tr[d:]

    g_positions = gp @ cache["r_t"] - gp  # dL/dp through the rigid term
    return g_ze, g_zgg, g_zfg, g_positions


# ---------------------------------------------------------------------------
# Appearance decoders (Eqs. of the relightable model, per-kind inputs)

APPEARANCE_KINDS = {"face": "app_f", "face_residual": "app_df", "glasses": "app_g"}


def _global_dir(per_voxel: np.ndarray) -> np.ndarray:
    mean = per_voxel.reshape(-1, 3).mean(axis=0)
    norm = np.linalg.norm(mean)
    return mean / norm if norm > 0 else mean


def decode_appearance(params, config: MorphConfig, kind: str, ctx, latents: dict):
    """Relit color payload for one set under one light.

    kind selects the decoder and its contract inputs:
      face:          z_e, v, l, z_f_tex, fully-lit color
      face_residual: l, z_g_tex, z_f_tex, shadow        (view independent)
      glasses:       v, l, z_g_tex, z_g_geo, shadow, specular, fully-lit color
    Output is decoder(.) * light intensity, shape (N, 3, M, M, M).
    """
    if kind not in APPEARANCE_KINDS:
        raise DimensionError(f"unknown appearance kind {kind!r}")
    if kind in ("glasses", "face_residual") and ctx.shadow is None:
        raise DimensionError(f"{kind} appearance decoder requires the shadow feature")
    if kind == "glasses" and ctx.specular is None:
        raise DimensionError("glasses appearance decoder requires the specular feature")
    name = APPEARANCE_KINDS[kind]
    n = ctx.pset.count
    v = ctx.pset.grid_resolution ** 3
    rows = n * v
    v_glob = _global_dir(ctx.view_dir)
    l_glob = _global_dir(ctx.light_dir)

    if kind == "face":
        trunk_in = np.concatenate([latents["z_e"], latents["z_ftex"], v_glob, l_glob])
        vox_in = [ctx.fully_lit, ctx.view_dir, ctx.light_dir]
    elif kind == "face_residual":
        trunk_in = np.concatenate([l_glob, latents["z_gtex"], latents["z_ftex"]])
        vox_in = [ctx.shadow[:, :, None], ctx.light_dir]
    else:
        trunk_in = np.concatenate([latents["z_gtex"], latents["z_ggeo"], v_glob, l_glob])
        vox_in = [
            ctx.shadow[:, :, None], ctx.specular, ctx.fully_lit,
            ctx.view_dir, ctx.light_dir,
        ]
    feats, trunk_cache = mlp_forward(params, f"{name}.trunk", trunk_in[None], 2)
    feats = feats[0]
    head_in = np.concatenate(
        [params[f"{name}.embed"]]
        + [np.broadcast_to(feats, (rows, feats.size))]
        + [x.reshape(rows, -1) for x in vox_in],
        axis=1,
    )
    raw, head_cache = mlp_forward(params, f"{name}.head", head_in, 3)
    if kind == "face_residual":
        act = np.tanh(raw)
    else:
        act = expit(raw)
    rgb = act * ctx.light.intensity
    m = ctx.pset.grid_resolution
    payload = rgb.reshape(n, v, 3).transpose(0, 2, 1).reshape(n, 3, m, m, m)
    cache = {
        "name": name, "kind": kind, "trunk": trunk_cache, "head": head_cache,
        "raw": raw, "act": act, "rows": rows, "feat_dim": feats.size,
        "n": n, "v": v, "intensity": ctx.light.intensity,
    }
    return payload, cache


def decode_appearance_backward(params, config, cache, g_payload, grads):
    """Backward of decode_appearance; returns gradients for the latent inputs
    as a dict (feature inputs are treated as constants)."""
    name = cache["name"]
    n, v = cache["n"], cache["v"]
    g_rgb = g_payload.reshape(n, 3, v).transpose(0, 2, 1).reshape(cache["rows"], 3)
    g_act = g_rgb * cache["intensity"]
    if cache["kind"] == "face_residual":
        g_raw = g_act * (1.0 - cache["act"] ** 2)
    else:
        g_raw = g_act * cache["act"] * (1.0 - cache["act"])
    g_head_in = mlp_backward(params, f"{name}.head", cache["head"], g_raw, grads)
    e = params[f"{name}.embed"].shape[1]
    _acc(grads, f"{name}.embed", g_head_in[:, :e])
    g_feats = g_head_in[:, e : e + cache["feat_dim"]].sum(axis=0)
    g_trunk_in = mlp_backward(params, f"{name}.trunk", cache["trunk"], g_feats[None], grads)[0]
    d = config.latent_dim
    if cache["kind"] == "face":
        return {"z_e": g_trunk_in[:d], "z_ftex": g_trunk_in[d : 2 * d]}
    if cache["kind"] == "face_residual":
        return {"z_gtex": g_trunk_in[3 : 3 + d], "z_ftex": g_trunk_in[3 + d : 3 + 2 * d]}
    return {"z_gtex": g_trunk_in[:d], "z_ggeo": g_trunk_in[d : 2 * d]}

