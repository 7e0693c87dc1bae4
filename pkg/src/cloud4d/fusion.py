"""Cross-attention fusion of latent and geometric point features, and the
prediction head that maps fused features to a residual flow."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = ["FusionWeights", "PredictionHead", "fast_lg_fusion", "cat_fusion",
           "predict_residual_flow"]

FEAT_DIM = 32


@dataclass
class FusionWeights:
    """Projections for one fusion variant: attention (wq/wk/wv) or cat (wcat/bcat)."""

    wq: Tensor | None = None
    wk: Tensor | None = None
    wv: Tensor | None = None
    wcat: Tensor | None = None
    bcat: Tensor | None = None

    @staticmethod
    def create(rng: np.random.Generator, mode: str = "attention",
               d: int = FEAT_DIM) -> "FusionWeights":
        def u(fan_in, shape):
            bound = np.sqrt(1.0 / fan_in)
            return ad.parameter(rng.uniform(-bound, bound, size=shape))

        if mode == "attention":
            return FusionWeights(wq=u(d, (d, d)), wk=u(d, (d, d)), wv=u(d, (d, d)))
        if mode == "cat":
            return FusionWeights(wcat=u(2 * d, (2 * d, d)), bcat=u(2 * d, (d,)))
        raise ValueError(f"no weights for fusion mode {mode!r}")

    def tensors(self) -> list[Tensor]:
        return [t for t in (self.wq, self.wk, self.wv, self.wcat, self.bcat)
                if t is not None]


def fast_lg_fusion(f_lat: Tensor, f_geo: Tensor, weights: FusionWeights) -> Tensor:
    """Latent features attend over geometric features; residual on the query."""
    if f_lat.shape[0] != f_geo.shape[0]:
        raise ValueError(f"row counts disagree: {f_lat.shape} vs {f_geo.shape}")
    d = f_lat.shape[1]
    q = ad.matmul(f_lat, weights.wq)
    k = ad.matmul(f_geo, weights.wk)
    v = ad.matmul(f_geo, weights.wv)
    att = ad.softmax(ad.matmul(q, ad.transpose(k)) * (1.0 / np.sqrt(d)), axis=1)
    return f_lat + ad.matmul(att, v)


def cat_fusion(f_lat: Tensor, f_geo: Tensor, weights: FusionWeights) -> Tensor:
    """Plain concatenation followed by a linear merge."""
    return ad.linear(ad.concat([f_lat, f_geo], axis=1), weights.wcat, weights.bcat)


@dataclass
class PredictionHead:
    """MLP over concat(features, time encoding, flow + points) -> residual flow.

    The final layer is zero-initialized, and the output is scaled by the
    caller-supplied time gate so a zero time step yields a zero residual.
    """

    layers: list[Tensor]  # w1, b1, w2, b2, w3(zero), b3(zero)
    slope: float = 0.01

    @staticmethod
    def create(rng: np.random.Generator, feat_dim: int = FEAT_DIM,
               width: int = 32) -> "PredictionHead":
        in_dim = feat_dim + 3 + 3

        def u(fan_in, shape):
            bound = np.sqrt(1.0 / fan_in)
            return ad.parameter(rng.uniform(-bound, bound, size=shape))

        return PredictionHead(layers=[
            u(in_dim, (in_dim, width)), u(in_dim, (width,)),
            u(width, (width, width)), u(width, (width,)),
            ad.parameter(np.zeros((width, 3))), ad.parameter(np.zeros(3)),
        ])

    def tensors(self) -> list[Tensor]:
        return list(self.layers)


def predict_residual_flow(fused: Tensor, t_target: float, flow: Tensor,
                          points: np.ndarray, head: PredictionHead,
                          gate: float = 1.0) -> Tensor:
    """Residual flow rows, N x 3. `gate` is typically the time step t2 - t1."""
    n = fused.shape[0]
    time_cols = ad.constant(np.tile([t_target, np.sin(t_target), np.cos(t_target)], (n, 1)))
    inp = ad.concat([fused, time_cols, flow + ad.constant(points)], axis=1)
    w1, b1, w2, b2, w3, b3 = head.layers
    h = ad.leaky_relu(ad.linear(inp, w1, b1), head.slope)
    h = ad.leaky_relu(ad.linear(h, w2, b2), head.slope)
    return ad.linear(h, w3, b3) * gate
