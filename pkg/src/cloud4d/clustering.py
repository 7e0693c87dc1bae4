"""Iterative Gaussian soft clustering of a frame into M Gaussians.

Point-to-center soft assignments use exponential weights on squared distance.
That kernel has no bandwidth parameter, so coordinates are rescaled internally
to a fixed working bounding-box diagonal before iterating (and results mapped
back); at raw unit or LiDAR scale the iteration either collapses every center
to the global centroid or saturates to hard assignment.

Per-Gaussian features come from a small edge-convolution stack over each
Gaussian's member points followed by self-attention and mean pooling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .neighbors import knn, pairwise_sq_dists
from .pointcloud import PointCloud

__all__ = [
    "GaussianMixtureState", "KnnGraph", "EdgeConvWeights", "FrameFeaturePlan",
    "soft_cluster", "hard_assign", "covariances", "knn_graph",
    "edgeconv_features", "gaussian_self_attention", "cluster_features",
    "cluster_features_batched", "frame_feature_plan", "gaussianize",
    "init_feature_weights",
]

WORKING_DIAGONAL = 10.0  # bounding-box diagonal the iteration operates at
FEATURE_DIM = 32
EDGECONV_CHANNELS = [(6, 16), (32, 16), (32, 16), (32, 16), (64, 32)]


@dataclass
class KnnGraph:
    """Exact k-nearest-neighbor indices, no self loops."""

    idx: np.ndarray  # (N, k)
    k: int


@dataclass
class GaussianMixtureState:
    """Per-frame Gaussian parameters and point assignments."""

    mu: np.ndarray       # (M, 3)
    sigma: np.ndarray    # (M, 3, 3)
    soft: np.ndarray     # (N, M) row-stochastic
    assign: np.ndarray   # (N,) argmax of soft
    feat: np.ndarray     # (M, FEATURE_DIM)

    @property
    def n_gaussians(self) -> int:
        return len(self.mu)

    def debug_dict(self) -> dict:
        hist = np.bincount(self.assign, minlength=self.n_gaussians)
        return {
            "mu": self.mu.tolist(),
            "sigma": self.sigma.tolist(),
            "assignment_histogram": hist.tolist(),
        }

    def debug_json(self) -> str:
        return json.dumps(self.debug_dict())


def soft_cluster(points: np.ndarray, M: int, kappa: int, seed: int):
    """Iterate soft assignments and center updates; returns (mu, soft).

    Initial centers are M distinct input points drawn by value order, so the
    draw does not depend on the ordering of the input rows.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if M > n:
        raise ValueError(f"M={M} exceeds point count {n}")
    if kappa < 1:
        raise ValueError("kappa must be >= 1")

    lo, hi = points.min(axis=0), points.max(axis=0)
    diag = float(np.linalg.norm(hi - lo))
    scale = WORKING_DIAGONAL / diag if diag > 0 else 1.0
    work = points * scale

    order = np.lexsort((points[:, 2], points[:, 1], points[:, 0]))
    rng = np.random.default_rng(seed)
    centers = work[order[rng.choice(n, size=M, replace=False)]]

    eps = 1e-6
    ones = np.ones(n)
    soft = None
    for _ in range(kappa):
        d2 = pairwise_sq_dists(work, centers)
        logits = -d2
        logits -= logits.max(axis=1, keepdims=True)
        soft = np.exp(logits)
        soft /= soft.sum(axis=1, keepdims=True)
        centers = (soft.T @ work) / (soft.T @ ones + eps)[:, None]
    # final centers recomputed in original coordinates: the epsilon-regularized
    # weighted mean is scale invariant, so this is the same fixed point
    mu = (soft.T @ points) / (soft.T @ ones + eps)[:, None]
    return mu, soft


def hard_assign(soft: np.ndarray) -> np.ndarray:
    """Row argmax; ties resolve to the lowest index."""
    return np.argmax(soft, axis=1)


def covariances(points: np.ndarray, mu: np.ndarray, assign: np.ndarray,
                eps_reg: float = 1e-6) -> np.ndarray:
    """Second moment of each Gaussian's members about its mean, plus eps I.

    A Gaussian with no members receives eps I.
    """
    M = len(mu)
    sigma = np.empty((M, 3, 3))
    eye = np.eye(3)
    for m in range(M):
        members = points[assign == m]
        if len(members) == 0:
            sigma[m] = eps_reg * eye
            continue
        centered = members - mu[m]
        sigma[m] = centered.T @ centered / len(members) + eps_reg * eye
    return sigma


def knn_graph(points: np.ndarray, k: int) -> KnnGraph:
    """Exact Euclidean kNN excluding self; ties go to the lower index."""
    n = len(points)
    if n < 2:
        raise ValueError("knn_graph needs at least 2 points")
    if not 1 <= k < n:
        raise ValueError(f"k={k} invalid for {n} points")
    idx, _ = knn(points, k, exclude_self=True)
    return KnnGraph(idx=idx, k=k)


@dataclass
class EdgeConvWeights:
    """Five conv blocks plus the self-attention projections."""

    blocks: list[tuple[Tensor, Tensor]]  # (W, b) per block
    wq: Tensor
    wk: Tensor
    wv: Tensor

    def tensors(self) -> list[Tensor]:
        out = []
        for w, b in self.blocks:
            out += [w, b]
        return out + [self.wq, self.wk, self.wv]


def _uniform(rng, fan_in, shape):
    bound = np.sqrt(1.0 / fan_in)
    return ad.parameter(rng.uniform(-bound, bound, size=shape))


def init_feature_weights(rng: np.random.Generator) -> EdgeConvWeights:
    blocks = []
    for cin, cout in EDGECONV_CHANNELS:
        blocks.append((_uniform(rng, cin, (cin, cout)), _uniform(rng, cin, (cout,))))
    d = FEATURE_DIM
    return EdgeConvWeights(
        blocks=blocks,
        wq=_uniform(rng, d, (d, d)),
        wk=_uniform(rng, d, (d, d)),
        wv=_uniform(rng, d, (d, d)),
    )


def edgeconv_features(points_subset: np.ndarray, graph: KnnGraph | None,
                      weights: EdgeConvWeights, training: bool = False,
                      dropout: float = 0.0,
                      rng: np.random.Generator | None = None) -> Tensor:
    """Stacked edge convolutions over one Gaussian's member points.

    Each of the first four blocks maps edge features concat(f_i - f_j, f_i)
    through a pointwise linear + ReLU and max-pools over the neighbors; the
    final block is pointwise over the concatenation of the four block outputs.
    A singleton subset degenerates to a zero edge difference against itself.
    """
    pts = np.asarray(points_subset, dtype=np.float64)
    n = len(pts)
    idx = graph.idx if graph is not None else np.zeros((n, 1), dtype=np.intp)
    k = idx.shape[1]

    h = ad.constant(pts)
    skips = []
    for bi, (w, b) in enumerate(weights.blocks[:-1]):
        c = h.shape[1]
        fi = ad.reshape(h, (n, 1, c))
        fj = ad.take_rows(h, idx)
        edge = ad.concat([fi - fj, fi + ad.constant(np.zeros((n, k, c)))], axis=2)
        act = ad.relu(ad.linear(edge, w, b))
        h = ad.amax(act, axis=1)
        if training and dropout > 0.0:
            mask = (rng.random(h.shape) >= dropout) / (1.0 - dropout)
            h = h * ad.constant(mask)
        skips.append(h)
    w5, b5 = weights.blocks[-1]
    h = ad.relu(ad.linear(ad.concat(skips, axis=1), w5, b5))
    if training and dropout > 0.0:
        mask = (rng.random(h.shape) >= dropout) / (1.0 - dropout)
        h = h * ad.constant(mask)
    return h


def gaussian_self_attention(feat: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                            return_rows: bool = False):
    """Scaled dot-product self-attention over member features, mean-pooled."""
    d = feat.shape[1]
    q = ad.matmul(feat, wq)
    k = ad.matmul(feat, wk)
    v = ad.matmul(feat, wv)
    rows = ad.softmax(ad.matmul(q, k.T) * (1.0 / np.sqrt(d)), axis=1)
    pooled = ad.tmean(ad.matmul(rows, v), axis=0)
    if return_rows:
        return pooled, rows
    return pooled


def _edgeconv_k(member_count: int, k_target: int = 16) -> int:
    return max(1, min(member_count - 1, k_target))


@dataclass
class FrameFeaturePlan:
    """Precomputed structure for extracting all Gaussians' features in one
    pass: within-Gaussian neighbor indices (padded by repeating the nearest
    neighbor so the max-pool is unchanged), a block attention mask, and the
    per-Gaussian mean-pool matrix. The mask is skipped above `BATCH_LIMIT`
    points, where the per-Gaussian loop is the cheaper path."""

    idx: np.ndarray          # (N, k_pad) global neighbor indices
    att_mask: np.ndarray     # (N, N) 0 within a Gaussian, -1e30 across
    group_mean: np.ndarray   # (M, N)


BATCH_LIMIT = 2048


def frame_feature_plan(points: np.ndarray, assign: np.ndarray, M: int,
                       k_target: int = 16) -> FrameFeaturePlan | None:
    n = len(points)
    if n > BATCH_LIMIT:
        return None
    members = [np.flatnonzero(assign == m) for m in range(M)]
    sizes = [len(mb) for mb in members]
    k_pad = max(1, min(k_target, max((s - 1 for s in sizes if s > 0), default=1)))
    idx = np.tile(np.arange(n, dtype=np.intp)[:, None], (1, k_pad))
    for mb in members:
        if len(mb) < 2:
            continue  # singleton rows keep themselves (zero edge difference)
        k_m = _edgeconv_k(len(mb), k_target)
        local, _ = knn(points[mb], k_m, exclude_self=True)
        glob = mb[local]
        if k_m < k_pad:
            glob = np.concatenate(
                [glob, np.repeat(glob[:, :1], k_pad - k_m, axis=1)], axis=1)
        idx[mb] = glob
    same = assign[:, None] == assign[None, :]
    att_mask = np.where(same, 0.0, -1e30)
    group_mean = np.zeros((M, n))
    for m, mb in enumerate(members):
        if len(mb):
            group_mean[m, mb] = 1.0 / len(mb)
    return FrameFeaturePlan(idx=idx, att_mask=att_mask, group_mean=group_mean)


def cluster_features_batched(points: np.ndarray, plan: FrameFeaturePlan,
                             weights: EdgeConvWeights, training: bool = False,
                             dropout: float = 0.0,
                             rng: np.random.Generator | None = None) -> Tensor:
    """All Gaussians' feature rows in one tape pass; matches the per-Gaussian
    loop up to summation order."""
    n = len(points)
    k = plan.idx.shape[1]
    h = ad.constant(points)
    skips = []
    for w, b in weights.blocks[:-1]:
        c = h.shape[1]
        fi = ad.reshape(h, (n, 1, c))
        fj = ad.take_rows(h, plan.idx)
        edge = ad.concat([fi - fj, fi + ad.constant(np.zeros((n, k, c)))], axis=2)
        h = ad.amax(ad.relu(ad.linear(edge, w, b)), axis=1)
        if training and dropout > 0.0:
            keep = (rng.random(h.shape) >= dropout) / (1.0 - dropout)
            h = h * ad.constant(keep)
        skips.append(h)
    w5, b5 = weights.blocks[-1]
    h = ad.relu(ad.linear(ad.concat(skips, axis=1), w5, b5))
    if training and dropout > 0.0:
        keep = (rng.random(h.shape) >= dropout) / (1.0 - dropout)
        h = h * ad.constant(keep)

    d = h.shape[1]
    q = ad.matmul(h, weights.wq)
    kk = ad.matmul(h, weights.wk)
    v = ad.matmul(h, weights.wv)
    logits = ad.matmul(q, kk.T) * (1.0 / np.sqrt(d)) + ad.constant(plan.att_mask)
    att = ad.matmul(ad.softmax(logits, axis=1), v)
    return ad.matmul(ad.constant(plan.group_mean), att)


def cluster_features(points: np.ndarray, assign: np.ndarray, M: int,
                     weights: EdgeConvWeights, k_target: int = 16,
                     training: bool = False, dropout: float = 0.0,
                     rng: np.random.Generator | None = None) -> Tensor:
    """Per-Gaussian feature rows (M x 32); empty Gaussians get zeros."""
    rows = []
    zero_row = ad.constant(np.zeros((1, FEATURE_DIM)))
    for m in range(M):
        subset = points[assign == m]
        if len(subset) == 0:
            rows.append(zero_row)
            continue
        graph = knn_graph(subset, _edgeconv_k(len(subset), k_target)) if len(subset) > 1 else None
        feat = edgeconv_features(subset, graph, weights,
                                 training=training, dropout=dropout, rng=rng)
        pooled = gaussian_self_attention(feat, weights.wq, weights.wk, weights.wv)
        rows.append(ad.reshape(pooled, (1, FEATURE_DIM)))
    return ad.concat(rows, axis=0)


def gaussianize(pc: PointCloud, M: int, kappa: int, seed: int,
                weights: EdgeConvWeights, eps_reg: float = 1e-6,
                k_target: int = 16) -> GaussianMixtureState:
    """Run the full clustering of one frame and extract Gaussian features.

    The returned state is a plain-array snapshot; the optimization loop
    re-evaluates the feature rows on the tape with current weights.
    """
    mu, soft = soft_cluster(pc.points, M, kappa, seed)
    assign = hard_assign(soft)
    sigma = covariances(pc.points, mu, assign, eps_reg)
    with ad.no_grad():
        feat = cluster_features(pc.points, assign, M, weights, k_target).data
    state = GaussianMixtureState(mu=mu, sigma=sigma, soft=soft,
                                 assign=assign, feat=feat)
    _validate_state(state)
    return state


def _validate_state(state: GaussianMixtureState, eps_reg: float = 1e-6) -> None:
    if not np.allclose(state.soft.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("soft assignment rows must sum to 1")
    if state.soft.min() < 0:
        raise ValueError("soft assignment weights must be non-negative")
    if not np.array_equal(state.assign, hard_assign(state.soft)):
        raise ValueError("assign must be the argmax of soft")
    sym = np.abs(state.sigma - np.swapaxes(state.sigma, 1, 2)).max()
    if sym > 1e-9:
        raise ValueError("covariances must be symmetric")
    for m, s in enumerate(state.sigma):
        if np.linalg.eigvalsh(s).min() < 0.5 * eps_reg:
            raise ValueError(f"covariance {m} is not positive definite")
