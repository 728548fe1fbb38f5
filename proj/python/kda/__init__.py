"""Key based diversified aggregation: transforms, models and experiments."""

from ._kda import (
    Classifier,
    KdaModel,
    SecretKey,
    SignFlipMask,
    apply_pipeline,
    dct2,
    idct2,
    load_bundle,
    load_checkpoint,
    median_outlier_filter,
    run_experiment,
    sign_flip_mask,
    toy_dataset,
)

__all__ = [
    "Classifier",
    "KdaModel",
    "SecretKey",
    "SignFlipMask",
    "apply_pipeline",
    "dct2",
    "idct2",
    "load_bundle",
    "load_checkpoint",
    "median_outlier_filter",
    "run_experiment",
    "sign_flip_mask",
    "toy_dataset",
]
