"""Trainable layers: elementwise activations, batch normalization and the
pixelwise softmax cross-entropy loss.

Layer structure (the :class:`Layer` description consumed by the graph
executor) also lives here; the executor itself is in
:mod:`denselabel.graph`.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, StateError

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


# ---------------------------------------------------------------------------
# layer description
# ---------------------------------------------------------------------------

KINDS = (
    "conv", "tconv", "maxpool", "dilmaxpool", "avgpool", "maxunpool",
    "batchnorm", "relu", "concat", "add",
)


@dataclass
class Layer:
    """One node of an architecture graph.

    ``inputs`` name the producing nodes ("input" refers to the network
    input).  ``pair`` links an unpooling layer to the pooling layer whose
    recorded argmax offsets it replays.  ``size_like`` names a node whose
    activation fixes this layer's output height/width, which pins the
    otherwise ambiguous output size of strided transposed convolutions
    and unpooling.  ``init`` selects the weight initializer ("he" or
    "bilinear"); bilinear marks learnable interpolation kernels.
    """

    name: str
    kind: str
    inputs: tuple = ()
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    pad: int = 0
    dilation: int = 1
    crop: int = 0
    window: int = 2
    pair: str = None
    size_like: str = None
    init: str = "he"
    bias: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ShapeError(f"unknown layer kind: {self.kind!r}")
        self.inputs = tuple(self.inputs)

    def param_names(self):
        if self.kind == "conv":
            names = [f"{self.name}.w"]
            if self.bias:
                names.append(f"{self.name}.b")
            return names
        if self.kind == "tconv":
            return [f"{self.name}.w"]
        if self.kind == "batchnorm":
            return [f"{self.name}.{s}" for s in
                    ("gamma", "beta", "mean", "var", "count")]
        return []


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, dy):
    """Pass dy where x > 0; the subgradient at exactly zero is zero."""
    return dy * (x > 0)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def batchnorm_forward(x, gamma, beta, eps=BN_EPS, mode="train",
                      running_mean=None, running_var=None,
                      momentum=BN_MOMENTUM):
    """Per-channel normalization over the (batch, height, width) axes.

    Train mode normalizes with batch statistics and, when running buffers
    are supplied, updates them in place with the given momentum.  Infer
    mode normalizes with the running statistics.  Returns ``(y, cache)``;
    the cache feeds :func:`batchnorm_backward`.
    """
    if mode == "train":
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu[None, :, None, None]) * inv[None, :, None, None]
        if running_mean is not None:
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mu
            running_var *= momentum
            running_var += (1.0 - momentum) * var
        y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
        return y, (xhat, inv, gamma)
    if mode == "infer":
        if running_mean is None or running_var is None:
            raise StateError("batchnorm: inference requires running statistics")
        scale = gamma / np.sqrt(running_var + eps)
        shift = beta - running_mean * scale
        return x * scale[None, :, None, None] + shift[None, :, None, None], None
    raise ValueError(f"batchnorm: unknown mode {mode!r}")


def batchnorm_backward(dy, cache):
    """Gradients of the full train-mode expression (batch statistics are
    functions of the input)."""
    xhat, inv, gamma = cache
    n = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
    s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    dx = (inv[None, :, None, None] / n) * (n * dxhat - s1 - xhat * s2)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

@dataclass
class LossValue:
    """Scalar loss plus its gradient with respect to the logits."""

    loss: float
    grad: np.ndarray
    n_valid: int


def softmax(logits):
    """Channelwise softmax per pixel, numerically stabilized."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, targets, ignore=None):
    """Mean pixelwise cross-entropy between softmax(logits) and one-hot
    targets.

    ``ignore`` is an optional (n, h, w) boolean mask; True pixels are
    excluded from the average and receive exactly zero gradient.  The
    loss averages over valid pixels only, so masking never dilutes the
    gradient of the rest.
    """
    if logits.shape != targets.shape:
        raise ShapeError(
            f"cross-entropy: logits {logits.shape} vs targets {targets.shape}"
        )
    n, k, h, w = logits.shape
    if ignore is not None:
        if ignore.shape != (n, h, w):
            raise ShapeError(
                f"cross-entropy: ignore mask {ignore.shape} does not match "
                f"pixels {(n, h, w)}"
            )
        valid = ~ignore
    else:
        valid = np.ones((n, h, w), dtype=bool)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ShapeError("cross-entropy: no valid pixels under the ignore mask")

    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    per_pixel = -(targets * logp).sum(axis=1)
    loss = float(per_pixel[valid].sum() / n_valid)

    probs = np.exp(logp)
    grad = (probs - targets) * valid[:, None].astype(logits.dtype)
    grad /= n_valid
    return LossValue(loss, grad, n_valid)


def one_hot(labels, n_classes, dtype=np.float32):
    """(n, h, w) integer labels to (n, k, h, w) one-hot planes.

    Labels outside [0, n_classes) produce all-zero target vectors; pair
    with :func:`ignore_out_of_range` to exclude them from the loss.
    """
    labels = np.asarray(labels)
    n, h, w = labels.shape
    out = np.zeros((n, n_classes, h, w), dtype=dtype)
    valid = (labels >= 0) & (labels < n_classes)
    nn, hh, ww = np.nonzero(valid)
    out[nn, labels[nn, hh, ww], hh, ww] = 1
    return out


def ignore_out_of_range(labels, n_classes, ignore=None):
    """Extend an ignore mask with pixels whose label falls outside
    [0, n_classes)."""
    labels = np.asarray(labels)
    out = (labels < 0) | (labels >= n_classes)
    if ignore is not None:
        out = out | ignore
    return out
