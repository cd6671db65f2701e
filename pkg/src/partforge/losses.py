"""Training objectives: mixture NLL energy, triplet hinge, placement loss.

The mixture negative log likelihood is evaluated per dimension in log space
and reduced with the max-shifted log-sum-exp identity, so no exponential of
a large magnitude is ever materialized. The hinge subgradient at exactly
zero is zero (the inactive side).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .networks import GaussianMixture

LOG_2PI = float(np.log(2.0 * np.pi))


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class TripletEnergy:
    """Energies of a (partial assembly, positive, negative) triplet."""

    e_pos: float
    e_neg: float
    margin: float = 10.0

    @property
    def loss(self) -> float:
        return max(self.margin + self.e_pos - self.e_neg, 0.0)


def logsumexp(values) -> float:
    """max(x) + log sum exp(x - max(x)); safe for inputs up to +-1e9."""
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise LossError("logsumexp of an empty list")
    m = float(arr.max())
    if not np.isfinite(m):  # all -inf stays -inf
        return m
    return m + float(np.log(np.exp(arr - m).sum()))


def logsumexp_t(x: Tensor, axis: int) -> Tensor:
    """Tape-recorded log-sum-exp along one axis (same max-shift trick)."""
    axis = axis % x.ndim
    k = x.shape[axis]
    m = ad.max_over_axis(x, axis)
    m_keep = ad.reshape(m, m.shape[:axis] + (1,) + m.shape[axis:])
    m_rep = ad.index_select(m_keep, axis, [0] * k)
    z = ad.exp(ad.add(x, ad.mul(m_rep, -1.0)))
    return ad.add(m, ad.log(ad.tsum(z, axis=axis)))


def gmm_nll(mix: GaussianMixture, y) -> float:
    """Energy E = -log sum_k phi_k N(y | mu_k, sigma_k^2), diagonal Gaussians."""
    if np.any(mix.stds <= 0):
        raise LossError("mixture stds must be positive")
    yv = np.asarray(y, dtype=np.float64)
    if yv.shape != (mix.dim,):
        raise LossError(f"coordinate shape {yv.shape} does not match mixture dim {mix.dim}")
    diff = yv[None, :] - mix.means
    inner = (diff * diff / (2.0 * mix.stds**2) + np.log(mix.stds)).sum(axis=1)
    with np.errstate(divide="ignore"):
        logw = np.log(mix.weights)
    expo = logw - inner - 0.5 * mix.dim * LOG_2PI
    return -logsumexp(expo)


def gmm_nll_t(phi: Tensor, mu: Tensor, sigma: Tensor, y: Tensor) -> Tensor:
    """Batched differentiable energy: (B, K), (B, K, D), (B, K, D), (B, D) -> (B,)."""
    b, k, d = mu.shape
    if phi.shape != (b, k) or sigma.shape != (b, k, d) or y.shape != (b, d):
        raise LossError(f"inconsistent shapes phi={phi.shape} mu={mu.shape} sigma={sigma.shape} y={y.shape}")
    yk = ad.index_select(ad.reshape(y, (b, 1, d)), 1, [0] * k)
    diff = ad.add(yk, ad.mul(mu, -1.0))
    quad = ad.div(ad.square(diff), ad.mul(ad.square(sigma), 2.0))
    inner = ad.tsum(ad.add(quad, ad.log(sigma)), axis=2)  # (B, K)
    expo = ad.add(ad.add(ad.log(phi), ad.mul(inner, -1.0)), -0.5 * d * LOG_2PI)
    return ad.mul(logsumexp_t(expo, axis=1), -1.0)


def contrastive_loss(e_pos: float, e_neg: float, margin: float = 10.0) -> float:
    """Hinge on the energy gap: max(m + E(X,Y) - E(X,Z), 0)."""
    return TripletEnergy(e_pos, e_neg, margin).loss


def contrastive_loss_t(e_pos: Tensor, e_neg: Tensor, margin: float = 10.0) -> Tensor:
    """Differentiable hinge, elementwise over a batch of energies."""
    return ad.relu(ad.add(ad.add(e_pos, ad.mul(e_neg, -1.0)), margin))


def placement_loss(predicted, target) -> float:
    """Squared Euclidean distance (the training loss)."""
    diff = np.asarray(predicted, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float((diff * diff).sum())


def placement_error(predicted, target) -> float:
    """Euclidean distance in the unit-radius frame (the reported metric)."""
    return float(np.sqrt(placement_loss(predicted, target)))


def placement_loss_t(predicted: Tensor, target: Tensor) -> Tensor:
    """Batched squared distances: (B, 3), (B, 3) -> (B,)."""
    diff = ad.add(predicted, ad.mul(target, -1.0))
    return ad.tsum(ad.square(diff), axis=1)
