"""cloud4d: self-supervised 4D point cloud interpolation.

Submodules are imported lazily so the CLI can cap BLAS threads before numpy
loads. ``import cloud4d`` then ``cloud4d.fit_sequence(...)`` works as usual.
"""

from importlib import import_module

__version__ = "0.1.0"

_EXPORTS = {
    "Tensor": "autodiff", "backward": "autodiff", "no_grad": "autodiff",
    "NumericalError": "autodiff",
    "AdamW": "optim", "poly_lr": "optim",
    "PointCloud": "pointcloud", "Sequence": "pointcloud",
    "sample_points": "pointcloud", "remove_outliers": "pointcloud",
    "normalize_timestamps": "pointcloud",
    "load_cloud": "io", "save_cloud": "io", "save_flow": "io", "ParseError": "io",
    "GaussianMixtureState": "clustering", "gaussianize": "clustering",
    "soft_cluster": "clustering", "knn_graph": "clustering",
    "posenc": "field", "field_forward": "field", "NeuralFieldParams": "field",
    "RbfInterpolant": "rbf", "rbf_activations": "rbf",
    "interpolate_residuals": "rbf", "update_covariance": "rbf",
    "time_encode": "deform", "tg_gcn_forward": "deform",
    "fast_lg_fusion": "fusion", "predict_residual_flow": "fusion",
    "LossWeights": "losses", "chamfer_loss": "losses", "emd_loss": "losses",
    "smoothness_loss": "losses", "total_loss": "losses",
    "eval_metrics": "metrics", "flow_metrics": "metrics",
    "RunConfig": "config",
    "ModelState": "model",
    "FitResult": "pipeline", "fit_sequence": "pipeline",
    "interpolate": "pipeline", "scene_flow": "pipeline", "densify": "pipeline",
    "save_model": "pipeline", "load_model": "pipeline",
    "pipeline_gradcheck": "gradcheck", "check_gradients": "gradcheck",
}

__all__ = sorted(_EXPORTS)


def __getattr__(name):
    if name in _EXPORTS:
        module = import_module(f".{_EXPORTS[name]}", __name__)
        value = getattr(module, name)
        globals()[name] = value
        return value
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return __all__ + ["__version__"]
