"""Training losses: photometric, geometry guidance, regularization.

Image terms are means over pixels; regularizers are sums over primitives /
latent dimensions (so a unit translation on one primitive contributes exactly
its squared norm). VGG and GAN slots are retained in the weights so configs
mirror the full-scale recipe, but both report zero with an `unavailable` flag
(they need pretrained networks).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError
from ..rig import chamfer

UNAVAILABLE_TERMS = ("vgg", "gan")


@dataclass(frozen=True)
class LossWeights:
    l1: float = 1.0
    vgg: float = 1.0
    gan: float = 1.0
    chamfer: float = 0.01
    mask: float = 10.0
    seg: float = 10.0
    kl: float = 1e-4
    l2: float = 1e-3

    def __post_init__(self):
        for name, val in vars(self).items():
            if val < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")


@dataclass
class RenderedAssets:
    """Model outputs entering the fully-lit loss; unavailable assets stay None."""

    image: np.ndarray | None = None
    glasses_mask: np.ndarray | None = None
    canonical_mask: np.ndarray | None = None
    seg_ownership: np.ndarray | None = None
    glasses_positions_canonical: np.ndarray | None = None
    glasses_positions_deformed: np.ndarray | None = None
    face_residual: dict | None = None  # delta_positions / delta_rotvec / delta_scales
    kl_mu: np.ndarray | None = None
    kl_sigma: np.ndarray | None = None


@dataclass
class GroundTruthAssets:
    image: np.ndarray | None = None
    glasses_mask: np.ndarray | None = None
    canonical_mask: np.ndarray | None = None
    seg_ownership: np.ndarray | None = None
    glasses_positions_canonical: np.ndarray | None = None
    glasses_positions_deformed: np.ndarray | None = None


def _mean_abs(a, b, what):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape {a.shape} != {b.shape}")
    return float(np.mean(np.abs(a - b)))


def kl_divergence(mu: np.ndarray, sigma: np.ndarray) -> float:
    """KL(N(mu, sigma^2) || N(0, 1)) summed over dimensions:
    0.5 * sum(mu^2 + sigma^2 - 1 - ln sigma^2)."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    return float(0.5 * np.sum(mu**2 + sigma**2 - 1.0 - np.log(sigma**2)))


def kl_divergence_grads(mu, sigma):
    return np.asarray(mu, dtype=float).copy(), np.asarray(sigma) - 1.0 / np.asarray(sigma)


def residual_l2(face_residual: dict) -> float:
    """||delta_s||^2 + ||delta_R||^2 + ||delta_t||^2 over face primitives,
    with the rotation residual measured by its rotation-vector norm."""
    return float(
        np.sum(face_residual["delta_scales"] ** 2)
        + np.sum(face_residual["delta_rotvec"] ** 2)
        + np.sum(face_residual["delta_positions"] ** 2)
    )


def loss_fully_lit(
    rendered: RenderedAssets, gt: GroundTruthAssets, weights: LossWeights
) -> tuple[float, dict]:
    """Stage-1 objective: photometric L1, chamfer + mask + segmentation
    geometry guidance, KL and residual-L2 regularizers. Missing asset pairs
    contribute zero. Returns (total, components)."""
    comps = {"vgg": 0.0, "gan": 0.0, "unavailable": UNAVAILABLE_TERMS}

    comps["l1"] = (
        _mean_abs(rendered.image, gt.image, "image")
        if rendered.image is not None and gt.image is not None
        else 0.0
    )

    cham = 0.0
    if (
        rendered.glasses_positions_canonical is not None
        and gt.glasses_positions_canonical is not None
    ):
        cham += chamfer(rendered.glasses_positions_canonical, gt.glasses_positions_canonical)
    if (
        rendered.glasses_positions_deformed is not None
        and gt.glasses_positions_deformed is not None
    ):
        cham += chamfer(rendered.glasses_positions_deformed, gt.glasses_positions_deformed)
    comps["chamfer"] = cham

    mask = 0.0
    if rendered.glasses_mask is not None and gt.glasses_mask is not None:
        mask += _mean_abs(rendered.glasses_mask, gt.glasses_mask, "glasses mask")
    if rendered.canonical_mask is not None and gt.canonical_mask is not None:
        mask += _mean_abs(rendered.canonical_mask, gt.canonical_mask, "canonical mask")
    comps["mask"] = mask

    comps["seg"] = (
        _mean_abs(rendered.seg_ownership, gt.seg_ownership, "segmentation")
        if rendered.seg_ownership is not None and gt.seg_ownership is not None
        else 0.0
    )

    comps["kl"] = (
        kl_divergence(rendered.kl_mu, rendered.kl_sigma)
        if rendered.kl_mu is not None
        else 0.0
    )
    comps["l2"] = residual_l2(rendered.face_residual) if rendered.face_residual else 0.0

    total = (
        weights.l1 * comps["l1"]
        + weights.chamfer * comps["chamfer"]
        + weights.mask * comps["mask"]
        + weights.seg * comps["seg"]
        + weights.kl * comps["kl"]
        + weights.l2 * comps["l2"]
    )
    comps["total"] = total
    return total, comps


def loss_group_lit(pred: np.ndarray, target: np.ndarray) -> float:
    """Stage-2 objective: mean squared photometric error."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise DimensionError(f"image shapes {pred.shape} != {target.shape}")
    return float(np.mean((pred - target) ** 2))
