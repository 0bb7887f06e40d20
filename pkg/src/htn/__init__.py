"""Tensor-chain classifiers with trainable reduction operators, and a
compiler realizing arbitrary matrices as post-selected circuits."""

from .model import (
    EncodedState,
    HtnModel,
    LabelState,
    LossConfig,
    batch_forward,
    cross_entropy_loss,
    depolarize,
    encode_rotational,
    forward,
    mse_loss,
    normalize,
    predict,
    randomized_completion,
    relative_entropy,
)
from .tncore import contract, isometrize, partial_trace, svd_split

__all__ = [
    "EncodedState",
    "HtnModel",
    "LabelState",
    "LossConfig",
    "batch_forward",
    "contract",
    "cross_entropy_loss",
    "depolarize",
    "encode_rotational",
    "forward",
    "isometrize",
    "mse_loss",
    "normalize",
    "partial_trace",
    "predict",
    "randomized_completion",
    "relative_entropy",
    "svd_split",
]

__version__ = "0.1.0"
