"""End-to-end orchestration: preprocessing, the per-sequence optimization
loop, interpolation / scene-flow / densification inference, and the model
file format.

The pipeline predicts a frame at time t2 from the anchor frame at t1 as

    prediction = anchor_points + point_flow + residual_flow

where point_flow broadcasts per-Gaussian motion (temporal-residual mean
shifts plus the deformation field evaluated at t2 minus its value at t1) to
the points, and the residual head is gated by (t2 - t1). Both terms vanish
identically when t2 == t1, so predicting at the anchor's own timestamp
returns the anchor exactly, trained or not.
"""

from __future__ import annotations

import struct
import time
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NumericalError, Tensor
from .clustering import (GaussianMixtureState, cluster_features,
                         cluster_features_batched, frame_feature_plan,
                         gaussianize)
from .config import RunConfig, config_to_text, parse_config_text
from .deform import (broadcast_to_points, feature_head, flatten_covariance,
                     gaussian_adjacency, gaussian_pool, motion_head,
                     time_encode, tg_gcn_forward, unpool)
from .field import (field_forward, field_forward_from_spatial,
                    field_spatial_projection, posenc)
from .fusion import cat_fusion, fast_lg_fusion, predict_residual_flow
from .losses import total_loss
from .metrics import eval_metrics
from .model import ModelState
from .optim import AdamW, poly_lr
from .pointcloud import PointCloud, Sequence, normalize_timestamps, \
    remove_outliers, sample_points

__all__ = ["FitResult", "preprocess", "fit_sequence", "interpolate",
           "scene_flow", "densify", "save_model", "load_model",
           "pipeline_forward", "nearest_frame"]

MAGIC = b"NG4D"
FORMAT_VERSION = 1


@dataclass
class FitResult:
    """Trained state plus everything inference needs."""

    cfg: RunConfig
    seq: Sequence
    clusters: list[GaussianMixtureState] | None
    model: ModelState
    enc_lo: np.ndarray
    enc_extent: np.ndarray
    taus: list[float]
    loss_history: list[float]
    best_iteration: int
    frame_metrics: list[dict]
    wall_time_s: float = 0.0
    plans: list | None = None  # cached per-frame feature-extraction structure


def nearest_frame(timestamps, t: float, exclude: int | None = None) -> int:
    """Index of the frame closest in time to t; lowest index wins ties."""
    d = np.abs(np.asarray(timestamps, dtype=np.float64) - t)
    if exclude is not None:
        d[exclude] = np.inf
    return int(np.argmin(d))


def preprocess(seq: Sequence, cfg: RunConfig) -> Sequence:
    """Optional outlier removal, per-frame sampling, timestamp normalization."""
    frames = []
    for i, frame in enumerate(seq.frames):
        pc = frame
        if cfg.outlier_removal and len(pc) > cfg.outlier_k:
            pc = remove_outliers(pc, cfg.outlier_k, cfg.outlier_std)
        pc = sample_points(pc, cfg.points, cfg.seed + i)
        frames.append(pc)
    return normalize_timestamps(Sequence(frames))


def _coord_norm(seq: Sequence):
    pts = np.concatenate([f.points for f in seq.frames])
    lo = pts.min(axis=0)
    extent = np.maximum(pts.max(axis=0) - lo, 1e-12)
    return lo, extent


def _mean_pairwise(mu: np.ndarray) -> float:
    m = len(mu)
    if m < 2:
        return 1.0
    d = np.sqrt(np.maximum(
        ((mu[:, None, :] - mu[None, :, :]) ** 2).sum(-1), 0.0))
    val = d[np.triu_indices(m, k=1)].mean()
    return float(val) if val > 0 else 1.0


def _latent_features(ms: ModelState, points: np.ndarray, t: float,
                     lo: np.ndarray, extent: np.ndarray,
                     iter_cache: dict | None = None,
                     anchor_idx: int | None = None) -> Tensor:
    norm = (points - lo) / extent
    key = ("field_spatial", anchor_idx)
    if iter_cache is not None and key in iter_cache:
        spatial = iter_cache[key]
    else:
        spatial = field_spatial_projection(norm, ms.field)
        if iter_cache is not None:
            iter_cache[key] = spatial
    return field_forward_from_spatial(spatial, t, ms.field)


def _deformation_eval(ms: ModelState, t: float, mu_t, sigma_t, feat_t,
                      tau: float) -> Tensor:
    m = mu_t.shape[0]
    tenc = ad.constant(np.tile(time_encode(t), (m, 1)))
    nodes = ad.concat([mu_t, flatten_covariance(sigma_t), feat_t, tenc], axis=1)
    w_norm = gaussian_adjacency(mu_t, tau)
    return tg_gcn_forward(nodes, w_norm, ms.gcn)


def _frame_features(ms, cfg, pts, st, plan, training, rng) -> Tensor:
    if plan is not None:
        return cluster_features_batched(pts, plan, ms.feature_weights,
                                        training=training, dropout=cfg.dropout,
                                        rng=rng)
    return cluster_features(pts, st.assign, st.n_gaussians, ms.feature_weights,
                            cfg.edgeconv_k, training=training,
                            dropout=cfg.dropout, rng=rng)


def pipeline_forward(ms: ModelState, cfg: RunConfig, frames: list[PointCloud],
                     clusters, lo, extent, taus, anchor_idx: int, t2: float,
                     feat_t1: Tensor | None = None, training: bool = False,
                     rng: np.random.Generator | None = None,
                     plans: list | None = None,
                     iter_cache: dict | None = None):
    """Predict the cloud at time t2 from the given anchor frame.

    Returns (prediction (N,3), residual_flow (N,3), point_flow (N,3)),
    all on the tape. `iter_cache`, when given, memoizes the anchor-side
    evaluations shared between pairs of one iteration.
    """
    anchor = frames[anchor_idx]
    pts = anchor.points
    t1 = anchor.timestamp
    n = len(pts)
    gate = t2 - t1

    f_lat = _latent_features(ms, pts, t2, lo, extent, iter_cache, anchor_idx) \
        if cfg.neural_field else None

    point_flow = None
    f_geo = None
    if cfg.gauss_pc:
        st = clusters[anchor_idx]
        m = st.n_gaussians
        if feat_t1 is None:
            key = ("feat", anchor_idx)
            if iter_cache is not None and key in iter_cache:
                feat_t1 = iter_cache[key]
            else:
                plan = plans[anchor_idx] if plans is not None else None
                feat_t1 = _frame_features(ms, cfg, pts, st, plan, training, rng)
                if iter_cache is not None:
                    iter_cache[key] = feat_t1
        mu_c = ad.constant(st.mu)
        if cfg.t_rbf_gr:
            from .rbf import interpolate_residuals, update_covariance
            dmu, d_rot, dfeat = interpolate_residuals(t1, t2, ms.rbf, feat_t1)
            mu_t2 = mu_c + dmu
            sigma_t2 = update_covariance(st.sigma, d_rot)
            feat_t2 = feat_t1 + dfeat
            gauss_flow = dmu
        else:
            mu_t2 = mu_c
            sigma_t2 = ad.constant(st.sigma)
            feat_t2 = feat_t1
            gauss_flow = ad.constant(np.zeros((m, 3)))

        if cfg.deformation:
            h2 = _deformation_eval(ms, t2, mu_t2, sigma_t2, feat_t2, taus[anchor_idx])
            key = ("anchor_motion", anchor_idx)
            if iter_cache is not None and key in iter_cache:
                g1 = iter_cache[key]
            else:
                h1 = _deformation_eval(ms, t1, mu_c, ad.constant(st.sigma),
                                       feat_t1, taus[anchor_idx])
                g1 = motion_head(h1, ms.gcn)
                if iter_cache is not None:
                    iter_cache[key] = g1
            gauss_flow = gauss_flow + (motion_head(h2, ms.gcn) - g1)
            gauss_feat = feature_head(h2, ms.gcn)
            point_flow, f_bcast = broadcast_to_points(gauss_flow, gauss_feat, st.soft)
            pool_in = ad.concat([ad.constant(pts), f_lat], axis=1) \
                if f_lat is not None else ad.constant(pts)
            proj = ad.leaky_relu(
                ad.linear(pool_in, ms.gcn.pool_proj, ms.gcn.pool_bias), ms.gcn.slope)
            f_pool = unpool(gaussian_pool(proj, st.assign, m), st.assign)
            f_geo = f_bcast + f_pool
        else:
            soft_c = ad.constant(st.soft)
            point_flow = ad.matmul(soft_c, gauss_flow)
            f_geo = ad.matmul(soft_c, feat_t2)

    if point_flow is None:
        point_flow = ad.constant(np.zeros((n, 3)))

    if f_lat is not None and f_geo is not None:
        if cfg.fusion == "attention":
            fused = fast_lg_fusion(f_lat, f_geo, ms.fusion)
        elif cfg.fusion == "cat":
            fused = cat_fusion(f_lat, f_geo, ms.fusion)
        else:
            fused = f_lat + f_geo
    else:
        fused = f_lat if f_lat is not None else f_geo

    delta = predict_residual_flow(fused, t2, point_flow, pts, ms.head, gate=gate)
    pred = ad.constant(pts) + point_flow + delta
    return pred, delta, point_flow


def _training_pairs(n_frames: int, timestamps) -> list[tuple[int, int]]:
    """(anchor, target) pairs: each frame predicted from its nearest other frame."""
    return [(nearest_frame(timestamps, timestamps[j], exclude=j), j)
            for j in range(n_frames)]


def fit_sequence(seq: Sequence, cfg: RunConfig) -> FitResult:
    """Cluster each frame once, then optimize all parameters against the
    leave-one-frame-out loss with AdamW and the poly LR schedule."""
    cfg.validate()
    start = time.perf_counter()
    if len(seq) < 2:
        raise ValueError("fit needs at least 2 frames")
    frames_seq = preprocess(seq, cfg)
    n_frames = len(frames_seq)
    m = cfg.n_gaussians
    for f in frames_seq.frames:
        if len(f) < m:
            raise ValueError(f"frame with {len(f)} points cannot host {m} Gaussians")

    rng = np.random.default_rng(cfg.seed)
    ms = ModelState.create(cfg, m, n_frames, rng)

    clusters = None
    plans = None
    taus = [1.0] * n_frames
    if cfg.gauss_pc:
        clusters = [gaussianize(f, m, cfg.kappa, cfg.seed + 17 * i,
                                ms.feature_weights, k_target=cfg.edgeconv_k)
                    for i, f in enumerate(frames_seq.frames)]
        taus = [_mean_pairwise(st.mu) for st in clusters]
        plans = [frame_feature_plan(f.points, st.assign, m, cfg.edgeconv_k)
                 for f, st in zip(frames_seq.frames, clusters)]

    lo, extent = _coord_norm(frames_seq)
    times = frames_seq.timestamps
    pairs = _training_pairs(n_frames, times)

    from .neighbors import knn as knn_query
    smooth_neighbors = None
    if cfg.smoothness and cfg.lambda_smooth != 0.0:
        cache = {}
        smooth_neighbors = []
        for anchor_idx, _ in pairs:
            if anchor_idx not in cache and len(frames_seq.frames[anchor_idx]) > cfg.smooth_k:
                cache[anchor_idx] = knn_query(frames_seq.frames[anchor_idx].points,
                                              cfg.smooth_k, exclude_self=True)[0]
            smooth_neighbors.append(cache.get(anchor_idx))

    opt = AdamW(ms.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    weights = cfg.loss_weights

    history: list[float] = []
    best_loss = np.inf
    best_iter = -1
    best_snap = ms.snapshot()
    stagnant = 0

    for it in range(cfg.iterations):
        try:
            iter_cache: dict = {}
            supervision = []
            for anchor_idx, target_idx in pairs:
                pred, delta, _ = pipeline_forward(
                    ms, cfg, frames_seq.frames, clusters, lo, extent, taus,
                    anchor_idx, float(times[target_idx]),
                    training=cfg.dropout > 0.0, rng=rng, plans=plans,
                    iter_cache=iter_cache)
                supervision.append((pred, frames_seq.frames[target_idx].points,
                                    delta, frames_seq.frames[anchor_idx].points))
            loss = total_loss(supervision, weights, cfg.smooth_k,
                              use_smoothness=cfg.smoothness,
                              smooth_neighbors=smooth_neighbors)
            loss_val = loss.item()
            ad.backward(loss)
        except NumericalError as exc:
            raise NumericalError(f"non-finite value at iteration {it}: {exc}") from exc

        history.append(loss_val)
        if loss_val < best_loss:
            best_loss = loss_val
            best_iter = it
            best_snap = ms.snapshot()
            stagnant = 0
        else:
            stagnant += 1
        opt.lr = poly_lr(it, cfg.iterations, cfg.lr, cfg.poly_power)
        opt.step()
        if stagnant >= cfg.patience:
            break

    ms.restore(best_snap)

    frame_metrics = []
    with ad.no_grad():
        for anchor_idx, target_idx in pairs:
            pred, _, _ = pipeline_forward(ms, cfg, frames_seq.frames, clusters,
                                          lo, extent, taus, anchor_idx,
                                          float(times[target_idx]), plans=plans)
            frame_metrics.append(eval_metrics(pred.data,
                                              frames_seq.frames[target_idx].points))

    return FitResult(cfg=cfg, seq=frames_seq, clusters=clusters, model=ms,
                     enc_lo=lo, enc_extent=extent, taus=taus,
                     loss_history=history,
                     best_iteration=best_iter if best_iter >= 0 else 0,
                     frame_metrics=frame_metrics,
                     wall_time_s=time.perf_counter() - start, plans=plans)


def interpolate(fit: FitResult, t: float) -> PointCloud:
    """Synthesize the cloud at time t from the nearest input frame."""
    if not np.isfinite(t):
        raise ValueError("t must be finite")
    times = fit.seq.timestamps
    if t < times[0] or t > times[-1]:
        warnings.warn(f"t={t} is outside [{times[0]}, {times[-1]}]: extrapolating",
                      stacklevel=2)
    anchor = nearest_frame(times, t)
    with ad.no_grad():
        pred, _, _ = pipeline_forward(fit.model, fit.cfg, fit.seq.frames,
                                      fit.clusters, fit.enc_lo, fit.enc_extent,
                                      fit.taus, anchor, t, plans=fit.plans)
    return PointCloud(pred.data, t)


def scene_flow(fit: FitResult, t1: float, t2: float) -> np.ndarray:
    """Per-point flow of the frame anchored at t1, advanced to t2."""
    anchor = nearest_frame(fit.seq.timestamps, t1)
    with ad.no_grad():
        pred, _, _ = pipeline_forward(fit.model, fit.cfg, fit.seq.frames,
                                      fit.clusters, fit.enc_lo, fit.enc_extent,
                                      fit.taus, anchor, t2, plans=fit.plans)
    return pred.data - fit.seq.frames[anchor].points


def densify(fit: FitResult, timestamps, base: PointCloud) -> PointCloud:
    """Gather geometry from the frames nearest each timestamp into the base
    frame's time and concatenate with the base cloud."""
    t_base = base.timestamp
    clouds = [base.points]
    with ad.no_grad():
        for s in timestamps:
            anchor = nearest_frame(fit.seq.timestamps, s)
            pred, _, _ = pipeline_forward(fit.model, fit.cfg, fit.seq.frames,
                                          fit.clusters, fit.enc_lo,
                                          fit.enc_extent, fit.taus, anchor,
                                          float(t_base), plans=fit.plans)
            clouds.append(pred.data)
    return PointCloud(np.concatenate(clouds), t_base)


# -- model file ----------------------------------------------------------------

def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    nb = name.encode("utf-8")
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    return head + arr.tobytes()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ValueError(f"model file truncated at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_tensor(r: _Reader):
    (nlen,) = r.unpack("<H")
    name = r.take(nlen).decode("utf-8")
    (ndim,) = r.unpack("<B")
    shape = r.unpack(f"<{ndim}Q") if ndim else ()
    count = int(np.prod(shape)) if ndim else 1
    data = np.frombuffer(r.take(count * 8), dtype="<f8").reshape(shape)
    return name, data.astype(np.float64)


def save_model(fit: FitResult, path) -> None:
    """Versioned little-endian binary: magic, config echo, named tensors."""
    tensors: list[tuple[str, np.ndarray]] = []
    tensors.append(("timestamps", fit.seq.timestamps))
    for i, f in enumerate(fit.seq.frames):
        tensors.append((f"frame_{i:02d}", f.points))
    if fit.clusters is not None:
        for i, st in enumerate(fit.clusters):
            tensors.append((f"cluster_{i:02d}_mu", st.mu))
            tensors.append((f"cluster_{i:02d}_sigma", st.sigma))
            tensors.append((f"cluster_{i:02d}_soft", st.soft))
            tensors.append((f"cluster_{i:02d}_assign", st.assign.astype(np.float64)))
            tensors.append((f"cluster_{i:02d}_feat", st.feat))
    tensors.append(("enc_lo", fit.enc_lo))
    tensors.append(("enc_extent", fit.enc_extent))
    tensors.append(("taus", np.asarray(fit.taus)))
    tensors.append(("loss_history", np.asarray(fit.loss_history)))
    tensors.append(("best_iteration", np.asarray(float(fit.best_iteration))))
    tensors.append(("wall_time_s", np.asarray(fit.wall_time_s)))
    for i, p in enumerate(fit.model.parameters()):
        tensors.append((f"param_{i:04d}", p.data))

    cfg_bytes = config_to_text(fit.cfg).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            fh.write(_pack_tensor(name, arr))


def load_model(path) -> FitResult:
    raw = open(path, "rb").read()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a model file (bad magic)")
    r = _Reader(raw)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    (cfg_len,) = r.unpack("<I")
    cfg_text = r.take(cfg_len).decode("utf-8")
    cfg = RunConfig(**parse_config_text(cfg_text, origin=str(path))).validate()

    (count,) = r.unpack("<I")
    tensors = dict(_read_tensor(r) for _ in range(count))

    times = tensors["timestamps"]
    frames = [PointCloud(tensors[f"frame_{i:02d}"], float(times[i]))
              for i in range(len(times))]
    seq = Sequence(frames)
    n_frames = len(frames)

    clusters = None
    if cfg.gauss_pc:
        clusters = []
        for i in range(n_frames):
            clusters.append(GaussianMixtureState(
                mu=tensors[f"cluster_{i:02d}_mu"],
                sigma=tensors[f"cluster_{i:02d}_sigma"],
                soft=tensors[f"cluster_{i:02d}_soft"],
                assign=tensors[f"cluster_{i:02d}_assign"].astype(np.intp),
                feat=tensors[f"cluster_{i:02d}_feat"],
            ))

    m = clusters[0].n_gaussians if clusters else cfg.n_gaussians
    ms = ModelState.create(cfg, m, n_frames, np.random.default_rng(cfg.seed))
    params = ms.parameters()
    ms.restore([tensors[f"param_{i:04d}"] for i in range(len(params))])

    plans = None
    if clusters is not None:
        plans = [frame_feature_plan(f.points, st.assign, m, cfg.edgeconv_k)
                 for f, st in zip(frames, clusters)]

    return FitResult(
        cfg=cfg, seq=seq, clusters=clusters, model=ms,
        enc_lo=tensors["enc_lo"], enc_extent=tensors["enc_extent"],
        taus=[float(x) for x in tensors["taus"]],
        loss_history=[float(x) for x in np.atleast_1d(tensors["loss_history"])],
        best_iteration=int(tensors["best_iteration"]),
        frame_metrics=[],
        wall_time_s=float(tensors["wall_time_s"]),
        plans=plans,
    )
