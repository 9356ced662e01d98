"""Array conventions.

Activations, kernels and gradients are plain numpy arrays laid out as
(batch, channel, height, width), C-contiguous, in float32 for production
runs and float64 for verification runs.  The helpers here validate that
convention at API boundaries; the operations in :mod:`denselabel.ops`
preserve the dtype of whatever they are given.
"""

import numpy as np

from .errors import ShapeError

DTYPE = np.float32
VERIFY_DTYPE = np.float64

FLOAT_DTYPES = (np.float32, np.float64)


def as_tensor4(x, name="tensor"):
    """Validate and return ``x`` as a (n, c, h, w) float array.

    Integer input is promoted to float32.  Raises :class:`ShapeError` if
    the array is not 4-D or any dimension is zero.
    """
    x = np.asarray(x)
    if x.dtype not in FLOAT_DTYPES:
        x = x.astype(DTYPE)
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected 4-D (n, c, h, w), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name}: all dimensions must be >= 1, got shape {x.shape}")
    return np.ascontiguousarray(x)


def same_spatial(a, b, what="tensors"):
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"{what}: batch/spatial mismatch, {a.shape} vs {b.shape}")
