"""Keyed block-wise image transformation for access control of kernel SVMs."""

__version__ = "0.1.0"

from .kernels import KernelSpec, gram, kernel_eval, kernel_matrix
from .keymat import SecretKey, derive_subkeys, gen_flip_mask, gen_permutation
from .svm import (
    BinaryModel,
    ConvergenceError,
    TrainedModel,
    load_model,
    predict_binary,
    predict_multiclass,
    save_model,
    train_binary,
    train_multiclass,
)
from .transform import (
    BlockGrid,
    NormStats,
    TransformConfig,
    assemble,
    flip_bits,
    permute_blocks,
    segment,
    shuffle_pixels,
    transform_dataset,
    zscore_apply,
    zscore_fit,
)
