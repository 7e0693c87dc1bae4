"""Graph convolution over Gaussian nodes: motion and feature heads, plus
Gaussian representation pooling between points and their owning Gaussians."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = ["time_encode", "TgGcnWeights", "gaussian_adjacency", "tg_gcn_forward",
           "motion_head", "feature_head", "broadcast_to_points",
           "gaussian_pool", "unpool", "TIME_ENC_DIM", "NODE_FEAT_DIM"]

TIME_ENC_DIM = 8
NODE_FEAT_DIM = 32
_TRIU = np.triu_indices(3)


def time_encode(t: float) -> np.ndarray:
    """[sin(2^j pi t), cos(2^j pi t)] for j = 0..3, an 8-vector."""
    if not np.isfinite(t):
        raise ValueError("t must be finite")
    out = np.empty(TIME_ENC_DIM)
    for j in range(TIME_ENC_DIM // 2):
        w = (2.0**j) * np.pi * t
        out[2 * j] = np.sin(w)
        out[2 * j + 1] = np.cos(w)
    return out


def flatten_covariance(sigma: Tensor) -> Tensor:
    """Upper-triangle entries of each 3x3 covariance, shape (M, 6)."""
    m = sigma.shape[0]
    flat = ad.reshape(sigma, (m, 9))
    cols = (_TRIU[0] * 3 + _TRIU[1]).astype(np.intp)
    return ad.take_cols(flat, cols)


@dataclass
class TgGcnWeights:
    """Two graph-conv layers with an input-projection residual, plus the
    motion / feature heads and the pooling projection."""

    theta1: Tensor
    theta2: Tensor
    proj: Tensor
    motion: list[Tensor]   # w1, b1, w2(zero-init), b2(zero-init)
    feature: list[Tensor]  # w1, b1, w2, b2
    pool_proj: Tensor
    pool_bias: Tensor
    slope: float = 0.01

    @staticmethod
    def create(rng: np.random.Generator, node_dim: int, pool_in_dim: int,
               width: int = NODE_FEAT_DIM) -> "TgGcnWeights":
        def u(fan_in, shape):
            bound = np.sqrt(1.0 / fan_in)
            return ad.parameter(rng.uniform(-bound, bound, size=shape))

        return TgGcnWeights(
            theta1=u(node_dim, (node_dim, width)),
            theta2=u(width, (width, width)),
            proj=u(node_dim, (node_dim, width)),
            motion=[u(width, (width, width)), u(width, (width,)),
                    ad.parameter(np.zeros((width, 3))), ad.parameter(np.zeros(3))],
            feature=[u(width, (width, width)), u(width, (width,)),
                     u(width, (width, width)), u(width, (width,))],
            pool_proj=u(pool_in_dim, (pool_in_dim, width)),
            pool_bias=u(pool_in_dim, (width,)),
        )

    def tensors(self) -> list[Tensor]:
        return ([self.theta1, self.theta2, self.proj]
                + self.motion + self.feature + [self.pool_proj, self.pool_bias])


def gaussian_adjacency(mu, tau: float) -> Tensor:
    """Complete-graph edge weights exp(-d^2 / tau^2), symmetric with unit diagonal,
    symmetrically degree-normalized."""
    muT = mu if isinstance(mu, Tensor) else ad.constant(mu)
    m = muT.shape[0]
    if m == 1:
        return ad.constant(np.ones((1, 1)))
    r = ad.tsum(muT * muT, axis=1, keepdims=True)         # (M, 1)
    d2 = r + ad.transpose(r) - 2.0 * ad.matmul(muT, ad.transpose(muT))
    d2 = ad.maximum(d2, 0.0)
    w = ad.exp(-d2 / (tau * tau))
    deg = ad.tsum(w, axis=1, keepdims=True)
    inv = 1.0 / ad.sqrt(deg)
    return w * inv * ad.transpose(inv)


def tg_gcn_forward(nodes: Tensor, w_norm: Tensor, weights: TgGcnWeights) -> Tensor:
    """Two normalized graph convolutions with a projected-input residual."""
    h1 = ad.leaky_relu(ad.matmul(ad.matmul(w_norm, nodes), weights.theta1), weights.slope)
    h2 = ad.matmul(ad.matmul(w_norm, h1), weights.theta2)
    return h2 + ad.matmul(nodes, weights.proj)


def _head(node_feat: Tensor, layers: list[Tensor], slope: float) -> Tensor:
    w1, b1, w2, b2 = layers
    h = ad.leaky_relu(ad.linear(node_feat, w1, b1), slope)
    return ad.linear(h, w2, b2)


def motion_head(node_feat: Tensor, weights: TgGcnWeights) -> Tensor:
    """Per-Gaussian flow, M x 3; the final layer starts at zero so the initial
    deformation is the identity."""
    return _head(node_feat, weights.motion, weights.slope)


def feature_head(node_feat: Tensor, weights: TgGcnWeights) -> Tensor:
    """Per-Gaussian deformation features, M x 32."""
    return _head(node_feat, weights.feature, weights.slope)


def broadcast_to_points(gauss_flow: Tensor, gauss_feat: Tensor, soft) -> tuple[Tensor, Tensor]:
    """Soft-weighted combination of per-Gaussian rows for every point."""
    s = soft if isinstance(soft, Tensor) else ad.constant(soft)
    return ad.matmul(s, gauss_flow), ad.matmul(s, gauss_feat)


def gaussian_pool(point_feat: Tensor, assign: np.ndarray, n_gaussians: int) -> Tensor:
    """Columnwise max over each Gaussian's member rows; empty Gaussians get zeros.

    Gradient routes only to the argmax member (lowest index on ties).
    """
    d = point_feat.shape[1]
    rows = []
    zero = ad.constant(np.zeros((1, d)))
    for m in range(n_gaussians):
        members = np.flatnonzero(assign == m)
        if len(members) == 0:
            rows.append(zero)
            continue
        sub = ad.take_rows(point_feat, members)
        rows.append(ad.reshape(ad.amax(sub, axis=0), (1, d)))
    return ad.concat(rows, axis=0)


def unpool(pooled: Tensor, assign: np.ndarray) -> Tensor:
    """Copy each Gaussian's pooled row back to its member points."""
    return ad.take_rows(pooled, np.asarray(assign, dtype=np.intp))
