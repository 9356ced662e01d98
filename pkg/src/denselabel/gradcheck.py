"""Finite-difference verification of the analytic backward pass.

Runs in 64-bit: analytic gradients come from one forward/backward sweep,
reference gradients from central differences of the scalar loss, and the
two are compared coordinate by coordinate with the relative error
|g_a - g_fd| / max(|g_a|, |g_fd|, 1e-12).
"""

from dataclasses import dataclass

import numpy as np

from .graph import graph_backward, graph_forward
from .layers import one_hot, softmax_cross_entropy


@dataclass
class CoordReport:
    param: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    max_rel_error: float
    mean_rel_error: float
    coords: list

    def worst(self, n=5):
        return sorted(self.coords, key=lambda c: -c.rel_error)[:n]


def _loss_of(arch, store, x, targets, ignore, mode):
    state = graph_forward(arch, store, x, mode=mode)
    return softmax_cross_entropy(state[arch.output], targets, ignore)


def grad_check(arch, store, x, targets=None, ignore=None, n_coords=50,
               epsilon=1e-4, rng=None, mode="train") -> GradCheckReport:
    """Compare analytic parameter gradients against central differences
    at ``n_coords`` randomly sampled trainable coordinates.

    Inputs are promoted to float64; the caller's store is not modified.
    When ``targets`` is omitted a random one-hot labeling of the output
    raster is generated.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    store = store.astype(np.float64)
    x = x.astype(np.float64)

    if targets is None:
        probe = graph_forward(arch, store, x, mode=mode)
        out_shape = probe[arch.output].shape
        labels = rng.integers(0, arch.n_classes, (out_shape[0],) + out_shape[2:])
        targets = one_hot(labels, arch.n_classes, dtype=np.float64)
    else:
        targets = targets.astype(np.float64)

    store.zero_grads()
    state = graph_forward(arch, store, x, mode=mode)
    loss = softmax_cross_entropy(state[arch.output], targets, ignore)
    graph_backward(arch, store, state, loss.grad)

    trainable = store.trainable()
    sizes = np.array([e.value.size for _, e in trainable])
    picks = rng.choice(int(sizes.sum()), size=min(n_coords, int(sizes.sum())),
                       replace=False)
    bounds = np.cumsum(sizes)

    coords = []
    for flat in sorted(picks):
        which = int(np.searchsorted(bounds, flat, side="right"))
        name, entry = trainable[which]
        offset = int(flat - (bounds[which] - sizes[which]))
        index = np.unravel_index(offset, entry.value.shape)
        analytic = float(entry.grad[index])

        keep = entry.value[index]
        entry.value[index] = keep + epsilon
        up = _loss_of(arch, store, x, targets, ignore, mode).loss
        entry.value[index] = keep - epsilon
        down = _loss_of(arch, store, x, targets, ignore, mode).loss
        entry.value[index] = keep

        numeric = (up - down) / (2 * epsilon)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
        coords.append(CoordReport(name, tuple(int(i) for i in index),
                                  analytic, numeric, rel))
    errs = [c.rel_error for c in coords]
    return GradCheckReport(max(errs), float(np.mean(errs)), coords)
