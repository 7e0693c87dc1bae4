"""Evaluation metrics: chamfer / transport distances between clouds and the
standard scene-flow error and accuracy fractions."""

from __future__ import annotations

import numpy as np

from .losses import emd_exact_match, sinkhorn_plan, _scene_scale_sq
from .neighbors import nearest, pairwise_sq_dists

__all__ = ["eval_metrics", "flow_metrics", "chamfer_distance", "emd_distance",
           "EXACT_EMD_METRIC_LIMIT"]

EXACT_EMD_METRIC_LIMIT = 2048  # assignment solve stays sub-second up to here


def chamfer_distance(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean (per direction, summed) bidirectional squared NN distance."""
    idx_ab = nearest(pred, gt)
    idx_ba = nearest(gt, pred)
    d1 = ((pred - gt[idx_ab]) ** 2).sum(axis=1).mean()
    d2 = ((gt - pred[idx_ba]) ** 2).sum(axis=1).mean()
    return float(d1 + d2)


def emd_distance(pred: np.ndarray, gt: np.ndarray,
                 exact_limit: int = EXACT_EMD_METRIC_LIMIT):
    """Mean squared matched distance; returns (value, mode)."""
    if len(pred) == len(gt) and len(pred) <= exact_limit:
        match = emd_exact_match(pred, gt)
        value = ((pred - gt[match]) ** 2).sum(axis=1).mean()
        return float(value), "exact"
    reg = 1e-3 * max(_scene_scale_sq(pred, gt), 1e-30)
    plan = sinkhorn_plan(pred, gt, reg)
    value = (plan * pairwise_sq_dists(pred, gt)).sum()
    return float(value), "sinkhorn"


def eval_metrics(pred: np.ndarray, gt: np.ndarray) -> dict:
    """{cd, emd, emd_mode} for a predicted cloud against ground truth."""
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("metrics require non-empty clouds")
    emd, mode = emd_distance(pred, gt)
    return {"cd": chamfer_distance(pred, gt), "emd": emd, "emd_mode": mode}


def flow_metrics(f_pred: np.ndarray, f_gt: np.ndarray) -> dict:
    """EPE3D plus the thresholded accuracy / outlier fractions.

    ACC_S: epe < 0.05 or relative error < 5%; ACC_R: epe < 0.1 or < 10%;
    Outliers: epe > 0.3 or relative error > 10%.
    """
    f_pred = np.asarray(f_pred, dtype=np.float64)
    f_gt = np.asarray(f_gt, dtype=np.float64)
    if f_pred.shape != f_gt.shape:
        raise ValueError(f"flow shapes disagree: {f_pred.shape} vs {f_gt.shape}")
    epe = np.linalg.norm(f_pred - f_gt, axis=1)
    mag = np.linalg.norm(f_gt, axis=1)
    rel = epe / np.maximum(mag, 1e-12)  # exact zero-flow prediction stays at 0
    return {
        "epe3d": float(epe.mean()),
        "acc_s": float(((epe < 0.05) | (rel < 0.05)).mean()),
        "acc_r": float(((epe < 0.1) | (rel < 0.1)).mean()),
        "outliers": float(((epe > 0.3) | (rel > 0.1)).mean()),
    }
