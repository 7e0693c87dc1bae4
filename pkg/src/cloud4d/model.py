"""All learnable parameters of the pipeline, grouped per component."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .clustering import EdgeConvWeights, init_feature_weights, FEATURE_DIM
from .config import RunConfig
from .deform import TgGcnWeights, TIME_ENC_DIM
from .field import NeuralFieldParams
from .fusion import FusionWeights, PredictionHead
from .rbf import RbfInterpolant

__all__ = ["ModelState", "NODE_INPUT_DIM"]

NODE_INPUT_DIM = 3 + 6 + FEATURE_DIM + TIME_ENC_DIM  # mu, triu(sigma), feat, time


@dataclass
class ModelState:
    """Parameter container; which components exist follows the config switches."""

    feature_weights: EdgeConvWeights | None
    field: NeuralFieldParams | None
    rbf: RbfInterpolant | None
    gcn: TgGcnWeights | None
    fusion: FusionWeights | None
    head: PredictionHead

    @staticmethod
    def create(cfg: RunConfig, n_gaussians: int, n_centers: int,
               rng: np.random.Generator) -> "ModelState":
        feature_weights = init_feature_weights(rng) if cfg.gauss_pc else None
        field = NeuralFieldParams.create(
            rng, input_width=cfg.field_input_width,
            hidden_width=cfg.field_hidden_width,
            hidden_depth=cfg.field_hidden_depth) if cfg.neural_field else None
        rbf = RbfInterpolant.create(rng, n_gaussians, FEATURE_DIM, n_centers) \
            if cfg.t_rbf_gr else None
        pool_in = 3 + (FEATURE_DIM if cfg.neural_field else 0)
        gcn = TgGcnWeights.create(rng, NODE_INPUT_DIM, pool_in) \
            if cfg.deformation else None
        fusion = FusionWeights.create(rng, cfg.fusion) \
            if (cfg.fusion != "off" and cfg.neural_field and cfg.gauss_pc) else None
        head = PredictionHead.create(rng)
        return ModelState(feature_weights=feature_weights, field=field, rbf=rbf,
                          gcn=gcn, fusion=fusion, head=head)

    def parameters(self) -> list[Tensor]:
        """Deterministic flat ordering used by the optimizer and serializer."""
        out: list[Tensor] = []
        if self.feature_weights is not None:
            out += self.feature_weights.tensors()
        if self.field is not None:
            out += self.field.tensors()
        if self.rbf is not None:
            tensors = self.rbf.tensors()
            if self.gcn is None:
                # rotated covariances feed only the deformation field; the
                # rotation table is dead weight without it
                tensors = [t for t in tensors if t is not self.rbf.drot]
            out += tensors
        if self.gcn is not None:
            out += self.gcn.tensors()
        if self.fusion is not None:
            out += self.fusion.tensors()
        out += self.head.tensors()
        return out

    def snapshot(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def restore(self, arrays: list[np.ndarray]) -> None:
        params = self.parameters()
        if len(params) != len(arrays):
            raise ValueError("snapshot does not match parameter list")
        for p, a in zip(params, arrays):
            if p.data.shape != a.shape:
                raise ValueError("snapshot tensor shape mismatch")
            p.data = a.copy()
            p.grad = None
