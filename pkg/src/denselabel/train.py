"""Stochastic gradient descent with momentum, exponential learning-rate
decay, random patch sampling with 8-fold geometric augmentation, and the
two-phase pretrain/finetune protocol.

Sampling is counter based: iteration ``i`` of a run seeded with ``k``
draws from ``default_rng([k, i])``, so a run resumed from a checkpoint
consumes exactly the batch sequence of the uninterrupted run.
"""

import csv
import os
from dataclasses import dataclass, field, fields

import numpy as np

from .container import save_checkpoint
from .errors import NumericError, ShapeError
from .graph import graph_backward, graph_forward
from .layers import ignore_out_of_range, one_hot, softmax_cross_entropy


@dataclass
class TrainConfig:
    """Optimization schedule and run shape.

    ``decay_iters`` is the period over which the learning rate falls by a
    factor of ten; ``decay_all`` extends the L2 penalty to biases and
    batch-norm scale/shift, which are exempt by default.
    """

    base_lr: float = 0.1
    finetune_lr: float = 0.01
    decay_iters: int = 10_000
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 5
    patch_size: int = 256
    max_iters: int = 1000
    seed: int = 0
    checkpoint_every: int = 0
    decay_all: bool = False

    def __post_init__(self):
        if self.patch_size % 32:
            raise ShapeError(
                f"patch_size must be divisible by 32, got {self.patch_size}"
            )
        if self.decay_iters < 1 or self.batch_size < 1 or self.max_iters < 0:
            raise ShapeError(f"invalid training config: {self}")


def lr_at(iteration, config: TrainConfig, base_lr=None):
    """Exponentially decayed rate: divided by ten every ``decay_iters``."""
    base = config.base_lr if base_lr is None else base_lr
    t = config.decay_iters
    if iteration % t == 0:
        return base / (10.0 ** (iteration // t))
    return base * 10.0 ** (-iteration / t)


def sgd_update(store, lr, momentum=0.9, weight_decay=0.0, decay_all=False):
    """One momentum step per trainable entry; gradients are then zeroed.

    g = grad + weight_decay * w   (decay-exempt entries skip the penalty)
    v = momentum * v - lr * g
    w = w + v
    """
    for _, e in store.trainable():
        g = e.grad
        if weight_decay and (e.decay or decay_all):
            g = g + weight_decay * e.value
        e.velocity *= momentum
        e.velocity -= lr * g
        e.value += e.velocity
        e.grad[...] = 0


# ---------------------------------------------------------------------------
# augmentation: the 8 axis-aligned symmetries of a square
# ---------------------------------------------------------------------------

N_TRANSFORMS = 8


def apply_dihedral(a, t):
    """Apply symmetry ``t`` in [0, 8) to the last two axes: bit 0 flips
    vertically, bit 1 flips horizontally, bit 2 transposes (applied
    last)."""
    if not 0 <= t < N_TRANSFORMS:
        raise ValueError(f"transform id must be in [0, 8), got {t}")
    if t & 1:
        a = a[..., ::-1, :]
    if t & 2:
        a = a[..., :, ::-1]
    if t & 4:
        a = a.swapaxes(-1, -2)
    return a


def invert_dihedral(a, t):
    """Inverse of :func:`apply_dihedral` (the constituent operations are
    involutions, applied in reverse order)."""
    if t & 4:
        a = a.swapaxes(-1, -2)
    if t & 2:
        a = a[..., :, ::-1]
    if t & 1:
        a = a[..., ::-1, :]
    return a


@dataclass
class Batch:
    images: np.ndarray    # (b, c, p, p)
    labels: np.ndarray    # (b, p, p)
    ignore: np.ndarray    # (b, p, p) bool
    transforms: np.ndarray


def sample_batch(dataset, config: TrainConfig, rng) -> Batch:
    """Uniform random tile, position and symmetry per patch; image,
    labels and mask receive the identical geometric transform.  Tiles
    smaller than the patch are excluded."""
    p = config.patch_size
    usable = [t for t in dataset
              if t.labels.shape[0] >= p and t.labels.shape[1] >= p]
    if not usable:
        raise ShapeError(
            f"no tile is at least {p}x{p}; largest is "
            f"{max((t.labels.shape for t in dataset), default=None)}"
        )
    images = np.empty((config.batch_size, usable[0].image.shape[0], p, p),
                      dtype=usable[0].image.dtype)
    labels = np.empty((config.batch_size, p, p), dtype=np.int64)
    ignore = np.empty((config.batch_size, p, p), dtype=bool)
    tids = np.empty(config.batch_size, dtype=np.int64)
    for b in range(config.batch_size):
        tile = usable[rng.integers(len(usable))]
        h, w = tile.labels.shape
        y = int(rng.integers(h - p + 1))
        x = int(rng.integers(w - p + 1))
        t = int(rng.integers(N_TRANSFORMS))
        images[b] = apply_dihedral(tile.image[:, y:y + p, x:x + p], t)
        labels[b] = apply_dihedral(tile.labels[y:y + p, x:x + p], t)
        ignore[b] = apply_dihedral(tile.ignore[y:y + p, x:x + p], t)
        tids[b] = t
    return Batch(images, labels, ignore, tids)


def batch_rng(seed, iteration):
    return np.random.default_rng([seed, iteration])


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

@dataclass
class TraceRow:
    iteration: int
    lr: float
    loss: float


@dataclass
class TrainResult:
    store: object
    trace: list
    checkpoints: list = field(default_factory=list)


def write_trace(path, trace):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iter", "lr", "loss"])
        for row in trace:
            w.writerow([row.iteration, repr(row.lr), repr(row.loss)])


def train(arch, store, dataset, config: TrainConfig, out_dir=None,
          base_lr=None, start_iter=0, meta=None) -> TrainResult:
    """SGD loop: sample, forward (train mode), pixelwise cross-entropy,
    backward, momentum update at the scheduled rate.

    Labels outside [0, n_classes) are ignored.  A non-finite loss aborts
    with the offending iteration recorded.  With ``out_dir`` set, the
    loss trace and periodic checkpoints are written there.
    """
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    trace = []
    checkpoints = []
    meta = dict(meta or {})
    meta.setdefault("arch", arch.name)
    meta.setdefault("in_channels", arch.in_channels)
    meta.setdefault("n_classes", arch.n_classes)

    def checkpoint(it):
        if not out_dir:
            return
        path = os.path.join(out_dir, f"ckpt_{it:06d}.ckpt")
        save_checkpoint(path, store, dict(meta, iteration=it))
        checkpoints.append(path)

    for it in range(start_iter, config.max_iters):
        rng = batch_rng(config.seed, it)
        batch = sample_batch(dataset, config, rng)
        state = graph_forward(arch, store, batch.images, mode="train")
        targets = one_hot(batch.labels, arch.n_classes,
                          dtype=state[arch.output].dtype)
        ignore = ignore_out_of_range(batch.labels, arch.n_classes, batch.ignore)
        loss = softmax_cross_entropy(state[arch.output], targets, ignore)
        if not np.isfinite(loss.loss):
            raise NumericError(
                f"non-finite loss {loss.loss} at iteration {it}", iteration=it
            )
        graph_backward(arch, store, state, loss.grad)
        lr = lr_at(it, config, base_lr)
        sgd_update(store, lr, config.momentum, config.weight_decay,
                   config.decay_all)
        trace.append(TraceRow(it, lr, loss.loss))
        if config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            checkpoint(it + 1)
    if out_dir:
        checkpoint(config.max_iters)
        write_trace(os.path.join(out_dir, "trace.csv"), trace)
    return TrainResult(store, trace, checkpoints)


def warm_start(store, pretrained, required):
    """Copy every name-matched parameter value from ``pretrained``.

    ``required`` names must all be present; anything missing aborts with
    the full list of misses.  Velocities and gradients start fresh.
    """
    missing = [n for n in required if n not in pretrained]
    if missing:
        raise ShapeError(
            "warm start: checkpoint lacks required parameters: "
            + ", ".join(sorted(missing))
        )
    copied = []
    for name, entry in store.items():
        if name in pretrained:
            src = pretrained[name].value
            if src.shape != entry.value.shape:
                raise ShapeError(
                    f"warm start: shape mismatch for {name!r}: checkpoint "
                    f"{src.shape} vs model {entry.value.shape}"
                )
            entry.value[...] = src
            copied.append(name)
    return copied


def finetune(arch, store, pretrained_store, dataset, config: TrainConfig,
             out_dir=None, meta=None) -> TrainResult:
    """Second training phase: the shared trunk is warm-started from a
    pretrained checkpoint, new layers keep their fresh initialization,
    and training runs at the (lower) finetune rate."""
    warm_start(store, pretrained_store, arch.warm_start)
    return train(arch, store, dataset, config, out_dir=out_dir,
                 base_lr=config.finetune_lr, meta=meta)
