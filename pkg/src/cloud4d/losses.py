"""Self-supervised losses: bidirectional chamfer, earth mover's distance
(exact assignment or entropic transport), and flow smoothness.

Nearest-neighbor and assignment selections are combinatorial; they are
computed outside the tape and gradients flow through the selected pairs only,
with ties resolved to the lowest index. Selections can be precomputed and
passed back in, which the gradient checker uses to hold them fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import Tensor
from .neighbors import knn, nearest, pairwise_sq_dists

__all__ = ["LossWeights", "chamfer_matches", "chamfer_loss", "emd_exact_match",
           "sinkhorn_plan", "emd_loss", "smoothness_loss", "total_loss",
           "EXACT_EMD_LIMIT"]

EXACT_EMD_LIMIT = 512       # points; beyond this the entropic solver is used
SINKHORN_REG_FACTOR = 0.01  # of the squared scene scale
SINKHORN_ITERS = 200


@dataclass
class LossWeights:
    """Weights for chamfer, smoothness and transport terms."""

    lambda_cd: float = 1.0
    lambda_smooth: float = 1.0
    lambda_emd: float = 50.0

    def __post_init__(self):
        if min(self.lambda_cd, self.lambda_smooth, self.lambda_emd) < 0:
            raise ValueError("loss weights must be non-negative")


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def chamfer_matches(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbor index of each a-row in b and each b-row in a."""
    a, b = _as_array(a), _as_array(b)
    return nearest(a, b), nearest(b, a)


def chamfer_loss(a, b, matches=None) -> Tensor:
    """Sum of squared nearest-neighbor distances, both directions."""
    a_arr, b_arr = _as_array(a), _as_array(b)
    if len(a_arr) == 0 or len(b_arr) == 0:
        raise ValueError("chamfer_loss requires non-empty clouds")
    if matches is None:
        matches = chamfer_matches(a_arr, b_arr)
    idx_ab, idx_ba = matches
    at = a if isinstance(a, Tensor) else ad.constant(a_arr)
    bt = b if isinstance(b, Tensor) else ad.constant(b_arr)
    d1 = at - ad.take_rows(bt, idx_ab)
    d2 = bt - ad.take_rows(at, idx_ba)
    return ad.tsum(d1 * d1) + ad.tsum(d2 * d2)


def emd_exact_match(a, b) -> np.ndarray:
    """Optimal assignment sigma minimizing sum of squared pair distances."""
    a, b = _as_array(a), _as_array(b)
    if len(a) != len(b):
        raise ValueError(f"exact transport needs equal sizes, got {len(a)} vs {len(b)}")
    _, cols = linear_sum_assignment(pairwise_sq_dists(a, b))
    return cols


def sinkhorn_plan(a, b, reg: float, iters: int = SINKHORN_ITERS,
                  anneal: bool = True) -> np.ndarray:
    """Entropic-transport plan with uniform marginals, log-domain iterations.

    With annealing the regularizer starts at max-cost/8 and halves down to
    `reg`, which helps convergence at small regularization.
    """
    a, b = _as_array(a), _as_array(b)
    n, m = len(a), len(b)
    cost = pairwise_sq_dists(a, b)
    log_mu = np.full(n, -np.log(n))
    log_nu = np.full(m, -np.log(m))
    f = np.zeros(n)
    g = np.zeros(m)

    if anneal:
        eps = max(float(cost.max()) / 8.0, reg)
        schedule = []
        while eps > reg * 1.5:
            schedule.append(eps)
            eps /= 2.0
        schedule.append(reg)
    else:
        schedule = [reg]
    warm = min(10, max(1, iters // (2 * len(schedule))))
    budgets = [warm] * (len(schedule) - 1)
    budgets.append(max(1, iters - sum(budgets)))

    def logsumexp(x, axis):
        mx = x.max(axis=axis, keepdims=True)
        return (mx + np.log(np.exp(x - mx).sum(axis=axis, keepdims=True))).squeeze(axis)

    for eps, budget in zip(schedule, budgets):
        for _ in range(budget):
            f = eps * (log_mu - logsumexp((g[None, :] - cost) / eps, axis=1))
            g = eps * (log_nu - logsumexp((f[:, None] - cost) / eps, axis=0))
    eps = schedule[-1]
    log_plan = (f[:, None] + g[None, :] - cost) / eps
    return np.exp(log_plan)


def _scene_scale_sq(a: np.ndarray, b: np.ndarray) -> float:
    pts = np.concatenate([a, b])
    return float(((pts.max(axis=0) - pts.min(axis=0)) ** 2).sum())


def emd_loss(a, b, mode: str = "auto", match=None,
             reg_factor: float = SINKHORN_REG_FACTOR) -> Tensor:
    """Mean squared matched distance under optimal (or entropic) transport.

    Exact mode solves the assignment problem (equal sizes required); the
    entropic mode accepts unequal sizes and keeps the plan fixed for the
    gradient, which flows through the plan-weighted cost.
    """
    a_arr, b_arr = _as_array(a), _as_array(b)
    if mode == "auto":
        mode = "exact" if (len(a_arr) == len(b_arr) and len(a_arr) <= EXACT_EMD_LIMIT) \
            else "sinkhorn"
    at = a if isinstance(a, Tensor) else ad.constant(a_arr)

    if mode == "exact":
        if match is None:
            match = emd_exact_match(a_arr, b_arr)
        diff = at - ad.constant(b_arr[match])
        return ad.tmean(ad.tsum(diff * diff, axis=1))

    if mode != "sinkhorn":
        raise ValueError(f"unknown emd mode {mode!r}")
    if match is None:
        reg = reg_factor * max(_scene_scale_sq(a_arr, b_arr), 1e-30)
        match = sinkhorn_plan(a_arr, b_arr, reg)
    # plan mass is 1, so the plan-weighted cost is already the mean matched cost
    plan = match
    row_mass = ad.constant(plan.sum(axis=1, keepdims=True))           # (N, 1)
    pb = ad.constant(plan @ b_arr)                                    # (N, 3)
    const = float((plan.sum(axis=0) * (b_arr * b_arr).sum(axis=1)).sum())
    quad = ad.tsum(row_mass * at * at)
    cross = ad.tsum(at * pb)
    return quad - 2.0 * cross + const


def smoothness_loss(delta_f: Tensor, points: np.ndarray, k: int = 9,
                    neigh=None) -> Tensor:
    """Mean squared flow difference over each point's spatial k-neighborhood."""
    n = len(points)
    if k >= n:
        raise ValueError(f"k={k} must be < N={n}")
    if neigh is None:
        neigh, _ = knn(np.asarray(points, dtype=np.float64), k, exclude_self=True)
    diffs = ad.take_rows(delta_f, neigh) - ad.reshape(delta_f, (n, 1, 3))
    return ad.tsum(ad.tmean(ad.tsum(diffs * diffs, axis=2), axis=1))


def total_loss(pairs, weights: LossWeights, smooth_k: int = 9,
               use_smoothness: bool = True, smooth_neighbors=None) -> Tensor:
    """Weighted sum over supervision pairs.

    Each pair is (pred Tensor, target ndarray, residual_flow Tensor or None,
    anchor_points ndarray). `smooth_neighbors` optionally carries precomputed
    neighborhood indices aligned with the pairs.
    """
    if not pairs:
        raise ValueError("total_loss needs at least one supervision pair")
    total = None
    for i, (pred, target, residual, anchor_pts) in enumerate(pairs):
        term = weights.lambda_cd * chamfer_loss(pred, target)
        if weights.lambda_emd != 0.0:
            term = term + weights.lambda_emd * emd_loss(pred, target)
        if use_smoothness and weights.lambda_smooth != 0.0 and residual is not None \
                and len(anchor_pts) > smooth_k:
            neigh = smooth_neighbors[i] if smooth_neighbors is not None else None
            term = term + weights.lambda_smooth * smoothness_loss(
                residual, anchor_pts, smooth_k, neigh=neigh)
        total = term if total is None else total + term
    return total
