"""Training objectives.

Everything is built on the scale-invariant MSE

    E_si(M_est, M_ref) = (1/N) || M_est - alpha * M_ref ||^2,
    alpha = sum(M_est * M_ref) / sum(M_ref * M_ref),

which absorbs the global scale ambiguity of I = R * S. alpha is the
closed-form minimizer and is held constant during differentiation (at
the minimum the total derivative equals the partial). For batched
tensors one alpha is computed per batch item over all of its elements
jointly, and the loss is the mean over items.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional, Sequence, Union

import numpy as np

from intrinsic import autodiff, bilateral
from intrinsic.autodiff import Tensor
from intrinsic.errors import ConfigError, DimensionError

_DEGENERATE_REF = 1e-12


@dataclass
class LossWeights:
    """Weight of the real-pair branch in the hybrid total."""

    omega: float = 0.5

    def __post_init__(self):
        if self.omega < 0:
            raise ConfigError(f"omega must be >= 0, got {self.omega}")


@dataclass
class LossReport:
    """Named scalar loss components; unset branches stay None."""

    si_R: Optional[Tensor] = None
    si_S: Optional[Tensor] = None
    si_recon: Optional[Tensor] = None
    si_pair: Optional[Tensor] = None
    si_swap12: Optional[Tensor] = None
    si_swap21: Optional[Tensor] = None
    e_syn: Optional[Tensor] = None
    e_real: Optional[Tensor] = None
    total: Optional[Tensor] = None

    def as_floats(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = None if value is None else value.item()
        return out


def _alpha_per_item(estimate: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Closed-form scale on the reference, one value per batch item."""
    num = (estimate * reference).sum(axis=(1, 2, 3), keepdims=True)
    den = (reference * reference).sum(axis=(1, 2, 3), keepdims=True)
    return np.where(den < _DEGENERATE_REF, 0.0, num / np.where(den < _DEGENERATE_REF, 1.0, den))


def si_alpha(estimate: Tensor, reference: Tensor) -> float:
    """Scalar alpha over all elements jointly (single-image semantics)."""
    if estimate.shape != reference.shape:
        raise DimensionError(
            f"si_alpha: shapes {estimate.shape} and {reference.shape} differ"
        )
    den = float((reference.data * reference.data).sum())
    if den < _DEGENERATE_REF:
        return 0.0
    return float((estimate.data * reference.data).sum() / den)


def si_mse(estimate: Tensor, reference: Tensor) -> Tensor:
    """Scale-invariant MSE, differentiable w.r.t. both arguments.

    alpha is a constant per batch item; for an all-zero reference it
    falls back to 0, leaving the plain mean square of the estimate.
    """
    if estimate.shape != reference.shape:
        raise DimensionError(
            f"si_mse: shapes {estimate.shape} and {reference.shape} differ"
        )
    alpha = _alpha_per_item(estimate.data, reference.data)
    residual = autodiff.add(estimate, autodiff.scale(reference, -alpha))
    return autodiff.mean_all(autodiff.mul_elementwise(residual, residual))


def synthetic_loss(
    r: Tensor, s: Tensor, r_gt: Tensor, s_gt: Tensor, image: Tensor
) -> LossReport:
    """Supervised loss on synthetic triplets.

    Three scale-invariant terms: reflectance vs ground truth, shading
    vs ground truth, and the recomposed product vs the input image.
    """
    if r.shape[1] != 3 or r_gt.shape[1] != 3:
        raise DimensionError("synthetic_loss: reflectance tensors must have 3 channels")
    if s.shape[1] != 1 or s_gt.shape[1] != 1:
        raise DimensionError("synthetic_loss: shading tensors must have 1 channel")
    report = LossReport()
    report.si_R = si_mse(r, r_gt)
    report.si_S = si_mse(s, s_gt)
    recon = autodiff.mul_broadcast_channel(r, s)
    report.si_recon = si_mse(recon, image)
    report.e_syn = autodiff.add(
        autodiff.add(report.si_R, report.si_S), report.si_recon
    )
    return report


def real_pair_loss(
    r1: Tensor,
    s1: Tensor,
    r2: Tensor,
    s2: Tensor,
    i1: Tensor,
    i2: Tensor,
    guide1: bilateral.GuideArg,
    guide2: bilateral.GuideArg,
    params: bilateral.BilateralParams,
    filtered: bool = True,
) -> LossReport:
    """Weakly supervised loss on an illumination-varying pair.

    The two images share reflectance, so the filtered reflectances
    must agree and each reflectance must reconstruct the other image
    under its shading. ``filtered=False`` skips the bilateral solver
    (the ablation variant).
    """
    if filtered:
        r1s = bilateral.filter_layer_forward(guide1, r1, params)
        r2s = bilateral.filter_layer_forward(guide2, r2, params)
    else:
        r1s, r2s = r1, r2
    report = LossReport()
    report.si_pair = si_mse(r1s, r2s)
    report.si_swap12 = si_mse(autodiff.mul_broadcast_channel(r1s, s2), i2)
    report.si_swap21 = si_mse(autodiff.mul_broadcast_channel(r2s, s1), i1)
    report.e_real = autodiff.add(
        autodiff.add(report.si_pair, report.si_swap12), report.si_swap21
    )
    return report


def total_loss(
    syn: LossReport, real: Optional[LossReport], weights: LossWeights
) -> LossReport:
    """Hybrid objective: total = e_syn + omega * e_real."""
    merged = LossReport(
        si_R=syn.si_R,
        si_S=syn.si_S,
        si_recon=syn.si_recon,
        e_syn=syn.e_syn,
    )
    if real is None:
        merged.total = syn.e_syn
        return merged
    merged.si_pair = real.si_pair
    merged.si_swap12 = real.si_swap12
    merged.si_swap21 = real.si_swap21
    merged.e_real = real.e_real
    merged.total = autodiff.add(
        syn.e_syn, autodiff.scale(real.e_real, weights.omega)
    )
    return merged
