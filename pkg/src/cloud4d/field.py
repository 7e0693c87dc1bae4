"""Fourier positional encoding and the coordinate MLP over (x, y, z, t)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = ["posenc", "NeuralFieldParams", "field_forward",
           "field_spatial_projection", "field_forward_from_spatial"]

ENC_DIM = 12
LATENT_DIM = 32


def posenc(points: np.ndarray, t: float) -> np.ndarray:
    """Encode each point as [u, sin u, cos u] per coordinate plus the frame time.

    Output is N x 12 with the raw coordinate in columns 0, 3, 6, 9.
    """
    if not np.isfinite(t):
        raise ValueError("t must be finite")
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    out = np.empty((n, ENC_DIM))
    for j in range(3):
        u = pts[:, j]
        out[:, 3 * j] = u
        out[:, 3 * j + 1] = np.sin(u)
        out[:, 3 * j + 2] = np.cos(u)
    out[:, 9] = t
    out[:, 10] = np.sin(t)
    out[:, 11] = np.cos(t)
    return out


@dataclass
class NeuralFieldParams:
    """Input projection, two 5-layer hidden stacks joined by a residual add,
    and a linear decoder. Leaky ReLU between layers."""

    layers: list[tuple[Tensor, Tensor]]   # (W, b) in forward order
    stack1_end: int                       # layer index one past the first hidden stack
    slope: float = 0.01

    @staticmethod
    def create(rng: np.random.Generator, input_width: int = 1280,
               hidden_width: int = LATENT_DIM, hidden_depth: int = 5,
               slope: float = 0.01) -> "NeuralFieldParams":
        dims = [ENC_DIM, input_width]
        dims += [hidden_width] * hidden_depth          # first hidden stack
        dims += [hidden_width] * hidden_depth          # second hidden stack
        dims += [LATENT_DIM]                           # decoder
        layers = []
        for cin, cout in zip(dims[:-1], dims[1:]):
            bound = np.sqrt(1.0 / cin)
            layers.append((
                ad.parameter(rng.uniform(-bound, bound, size=(cin, cout))),
                ad.parameter(rng.uniform(-bound, bound, size=(cout,))),
            ))
        return NeuralFieldParams(layers=layers, stack1_end=1 + hidden_depth, slope=slope)

    def tensors(self) -> list[Tensor]:
        out = []
        for w, b in self.layers:
            out += [w, b]
        return out


def field_forward(enc, params: NeuralFieldParams) -> Tensor:
    """Map N x 12 encodings to N x 32 latent features; pointwise over rows."""
    h = enc if isinstance(enc, Tensor) else ad.constant(enc)
    if h.shape[1] != ENC_DIM:
        raise ValueError(f"expected {ENC_DIM} input channels, got {h.shape[1]}")
    w, b = params.layers[0]
    return _field_tail(ad.leaky_relu(ad.linear(h, w, b), params.slope), params)


def _field_tail(h: Tensor, params: NeuralFieldParams) -> Tensor:
    for w, b in params.layers[1:params.stack1_end]:
        h = ad.leaky_relu(ad.linear(h, w, b), params.slope)
    stack1_out = h
    for w, b in params.layers[params.stack1_end:-1]:
        h = ad.leaky_relu(ad.linear(h, w, b), params.slope)
    h = h + stack1_out
    w, b = params.layers[-1]
    return ad.linear(h, w, b)


def field_spatial_projection(points_norm: np.ndarray, params: NeuralFieldParams) -> Tensor:
    """Project the nine spatial encoding columns through the input layer.

    The time columns enter additively before the first activation, so this
    projection can be shared across evaluations at different target times.
    """
    n = len(points_norm)
    enc9 = np.empty((n, 9))
    for j in range(3):
        u = points_norm[:, j]
        enc9[:, 3 * j] = u
        enc9[:, 3 * j + 1] = np.sin(u)
        enc9[:, 3 * j + 2] = np.cos(u)
    w1, _ = params.layers[0]
    return ad.matmul(ad.constant(enc9), ad.take_rows(w1, np.arange(9)))


def field_forward_from_spatial(spatial: Tensor, t: float,
                               params: NeuralFieldParams) -> Tensor:
    """Finish the forward pass given a cached spatial projection."""
    w1, b1 = params.layers[0]
    trow = ad.constant(np.array([[t, np.sin(t), np.cos(t)]]))
    time_term = ad.linear(trow, ad.take_rows(w1, np.array([9, 10, 11])), b1)
    h = ad.leaky_relu(spatial + time_term, params.slope)
    return _field_tail(h, params)
