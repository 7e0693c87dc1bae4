"""Temporal radial-basis interpolation of Gaussian parameter residuals.

A fixed set of kernel centers spans [0, 1]; normalized Gaussian-kernel
activations of a query time, modulated per Gaussian by feature-conditioned
attention, weight learnable residual tables for means, rotations (axis-angle)
and features. Residuals are formed from activation *differences* between the
two query times, so a zero time step yields exactly zero residuals and the
t1->t2 residual is the negation (inverse rotation) of t2->t1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = ["RbfInterpolant", "rbf_activations", "rbf_attention",
           "effective_weights", "interpolate_residuals", "exp_map",
           "update_covariance"]

TAYLOR_SQ_NORM = 1e-12  # switch to the series branch below ||v|| = 1e-6

# rows map (x, y, z) to the flattened cross-product matrix [[0,-z,y],[z,0,-x],[-y,x,0]]
_SKEW_BASIS = np.array([
    [0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
])


@dataclass
class RbfInterpolant:
    """Kernel centers/widths plus per-center residual tables, per Gaussian."""

    centers: np.ndarray      # (C,) fixed, evenly spaced in [0, 1]
    raw_widths: Tensor       # (C,) learnable; width = softplus(raw)
    dmu: Tensor              # (M, C, 3)
    drot: Tensor             # (M, C, 3) axis-angle
    dfeat: Tensor            # (M, C, D)
    att_w1: Tensor           # (D, D) attention MLP
    att_b1: Tensor
    att_w2: Tensor           # (D, C)
    att_b2: Tensor

    @staticmethod
    def create(rng: np.random.Generator, n_gaussians: int, feat_dim: int = 32,
               n_centers: int = 4) -> "RbfInterpolant":
        centers = np.linspace(0.0, 1.0, n_centers)
        spacing = 1.0 / max(n_centers - 1, 1)
        # softplus(raw) == spacing at init
        raw = np.log(np.expm1(spacing))
        d = feat_dim

        def u(fan_in, shape):
            bound = np.sqrt(1.0 / fan_in)
            return ad.parameter(rng.uniform(-bound, bound, size=shape))

        return RbfInterpolant(
            centers=centers,
            raw_widths=ad.parameter(np.full(n_centers, raw)),
            dmu=ad.parameter(np.zeros((n_gaussians, n_centers, 3))),
            drot=ad.parameter(np.zeros((n_gaussians, n_centers, 3))),
            dfeat=ad.parameter(np.zeros((n_gaussians, n_centers, d))),
            att_w1=u(d, (d, d)), att_b1=u(d, (d,)),
            att_w2=u(d, (d, n_centers)), att_b2=u(d, (n_centers,)),
        )

    def tensors(self) -> list[Tensor]:
        return [self.raw_widths, self.dmu, self.drot, self.dfeat,
                self.att_w1, self.att_b1, self.att_w2, self.att_b2]


def rbf_activations(t: float, interp: RbfInterpolant) -> Tensor:
    """Normalized kernel activations of time t, shape (C,)."""
    if not np.isfinite(t):
        raise ValueError("t must be finite")
    # the floor only guards against total underflow of extremely sharp kernels
    widths = ad.maximum(ad.softplus(interp.raw_widths), 1e-12)
    delta = ad.constant(t - interp.centers)
    logits = -(delta * delta) / (2.0 * widths * widths)
    # max-subtraction keeps the normalization well-defined for tiny widths
    raw = ad.exp(logits - ad.constant(logits.data.max()))
    return raw / ad.tsum(raw)


def rbf_attention(feat_t1: Tensor, interp: RbfInterpolant) -> Tensor:
    """Per-Gaussian softmax over the kernel channels, conditioned on features."""
    h = ad.leaky_relu(ad.linear(feat_t1, interp.att_w1, interp.att_b1), 0.01)
    return ad.softmax(ad.linear(h, interp.att_w2, interp.att_b2), axis=1)


def effective_weights(zeta: Tensor, w_rbf: Tensor) -> Tensor:
    """Modulate activations by attention and renormalize per Gaussian row."""
    prod = w_rbf * ad.reshape(zeta, (1, zeta.shape[0]))
    return prod / ad.tsum(prod, axis=1, keepdims=True)


def exp_map(v: Tensor) -> Tensor:
    """Rodrigues exponential of axis-angle rows; (M, 3) -> (M, 3, 3).

    The sin/cos coefficient functions are evaluated as series in ||v||^2 below
    the Taylor threshold, keeping the map finite and differentiable at zero.
    """
    m = v.shape[0]
    s = ad.tsum(v * v, axis=1, keepdims=True)          # (M, 1) squared angle
    mask = ad.constant((s.data < TAYLOR_SQ_NORM).astype(np.float64))
    s_safe = ad.maximum(s, TAYLOR_SQ_NORM)
    theta = ad.sqrt(s_safe)
    a_closed = ad.sin(theta) / theta
    b_closed = (1.0 - ad.cos(theta)) / s_safe
    a_series = 1.0 - s / 6.0 + (s * s) / 120.0
    b_series = 0.5 - s / 24.0 + (s * s) / 720.0
    a = mask * a_series + (1.0 - mask) * a_closed
    b = mask * b_series + (1.0 - mask) * b_closed

    k = ad.reshape(ad.matmul(v, ad.constant(_SKEW_BASIS)), (m, 3, 3))
    kk = ad.bmm(k, k)
    eye = ad.constant(np.broadcast_to(np.eye(3), (m, 3, 3)).copy())
    a3 = ad.reshape(a, (m, 1, 1))
    b3 = ad.reshape(b, (m, 1, 1))
    return eye + a3 * k + b3 * kk


def interpolate_residuals(t1: float, t2: float, interp: RbfInterpolant,
                          feat_t1: Tensor):
    """Mean, rotation and feature residuals carrying time t1 to t2.

    Returns (dmu (M,3), dR (M,3,3), dfeat (M,D)).
    """
    zeta1 = rbf_activations(t1, interp)
    zeta2 = rbf_activations(t2, interp)
    w_rbf = rbf_attention(feat_t1, interp)
    dw = effective_weights(zeta2, w_rbf) - effective_weights(zeta1, w_rbf)
    m = dw.shape[0]
    dw3 = ad.reshape(dw, (m, 1, dw.shape[1]))
    dmu = ad.reshape(ad.bmm(dw3, interp.dmu), (m, 3))
    v = ad.reshape(ad.bmm(dw3, interp.drot), (m, 3))
    dfeat = ad.reshape(ad.bmm(dw3, interp.dfeat), (m, interp.dfeat.shape[2]))
    return dmu, exp_map(v), dfeat


def update_covariance(sigma_t1, dR: Tensor) -> Tensor:
    """Rotate covariances by the learned residual: dR Sigma dR^T per Gaussian."""
    sig = sigma_t1 if isinstance(sigma_t1, Tensor) else ad.constant(sigma_t1)
    return ad.bmm(ad.bmm(dR, sig), ad.transpose(dR))
