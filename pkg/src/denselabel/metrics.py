"""Confusion-matrix metrics, boundary-eroded ground truth and tiled
full-image inference."""

from dataclasses import dataclass

import numpy as np

from . import arch as arch_mod
from .errors import DataError, ShapeError
from .graph import graph_forward


@dataclass
class ConfusionMatrix:
    """K-by-K counts; rows index the reference class, columns the
    prediction."""

    counts: np.ndarray

    @classmethod
    def zeros(cls, n_classes):
        return cls(np.zeros((n_classes, n_classes), dtype=np.int64))

    @property
    def n_classes(self):
        return self.counts.shape[0]

    def total(self):
        return int(self.counts.sum())


def accumulate(pred, ref, ignore=None, n_classes=None,
               matrix: ConfusionMatrix = None) -> ConfusionMatrix:
    """Tally non-ignored pixels into a confusion matrix."""
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    if pred.shape != ref.shape:
        raise ShapeError(
            f"confusion: prediction {pred.shape} vs reference {ref.shape}"
        )
    if ignore is not None and ignore.shape != ref.shape:
        raise ShapeError(
            f"confusion: ignore mask {ignore.shape} vs reference {ref.shape}"
        )
    if matrix is None:
        if n_classes is None:
            n_classes = int(max(pred.max(initial=0), ref.max(initial=0))) + 1
        matrix = ConfusionMatrix.zeros(n_classes)
    k = matrix.n_classes
    valid = (ref >= 0) & (ref < k) & (pred >= 0) & (pred < k)
    if ignore is not None:
        valid &= ~ignore
    flat = ref[valid].astype(np.int64) * k + pred[valid].astype(np.int64)
    matrix.counts += np.bincount(flat, minlength=k * k).reshape(k, k)
    return matrix


def precision_recall(matrix: ConfusionMatrix, k):
    tp = float(matrix.counts[k, k])
    fp = float(matrix.counts[:, k].sum() - matrix.counts[k, k])
    fn = float(matrix.counts[k, :].sum() - matrix.counts[k, k])
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    return precision, recall


def f1(matrix: ConfusionMatrix, k):
    """Harmonic mean of precision and recall; 0 when both are zero (a
    class absent from prediction and reference scores 0 by convention)."""
    p, r = precision_recall(matrix, k)
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass
class EvalReport:
    overall_accuracy: float
    f1_per_class: np.ndarray
    mean_f1: float
    precision: np.ndarray
    recall: np.ndarray
    matrix: ConfusionMatrix
    class_names: tuple = None

    @classmethod
    def from_matrix(cls, matrix: ConfusionMatrix, class_names=None):
        total = matrix.total()
        if total == 0:
            raise DataError("evaluation: no pixels counted (all ignored?)")
        k = matrix.n_classes
        pr = np.array([precision_recall(matrix, i) for i in range(k)])
        f1s = np.array([f1(matrix, i) for i in range(k)])
        return cls(
            overall_accuracy=float(np.trace(matrix.counts)) / total,
            f1_per_class=f1s,
            mean_f1=float(f1s.mean()),
            precision=pr[:, 0],
            recall=pr[:, 1],
            matrix=matrix,
            class_names=tuple(class_names) if class_names else
            tuple(f"class_{i}" for i in range(k)),
        )

    def to_text(self):
        width = max(len(n) for n in self.class_names) + 2
        lines = [f"{'class':<{width}}{'precision':>10}{'recall':>10}{'F1':>10}"]
        lines.append("-" * (width + 30))
        for i, name in enumerate(self.class_names):
            lines.append(
                f"{name:<{width}}{self.precision[i]:>10.4f}"
                f"{self.recall[i]:>10.4f}{self.f1_per_class[i]:>10.4f}"
            )
        lines.append("-" * (width + 30))
        lines.append(f"mean F1:          {self.mean_f1:.4f}")
        lines.append(f"overall accuracy: {self.overall_accuracy:.4f}")
        lines.append("note: a class absent from prediction and reference "
                      "scores F1 = 0")
        return "\n".join(lines)

    def to_csv(self):
        rows = ["class,precision,recall,f1"]
        for i, name in enumerate(self.class_names):
            rows.append(f"{name},{self.precision[i]!r},{self.recall[i]!r},"
                        f"{self.f1_per_class[i]!r}")
        rows.append(f"mean_f1,,,{self.mean_f1!r}")
        rows.append(f"overall_accuracy,,,{self.overall_accuracy!r}")
        return "\n".join(rows) + "\n"


def erode_labels(labels, radius):
    """Ignore mask for boundary-eroded ground truth: every pixel within
    Chebyshev distance ``radius`` of a differently labeled pixel is
    marked True.  radius 0 ignores nothing."""
    labels = np.asarray(labels)
    if radius < 0:
        raise ShapeError(f"erosion radius must be >= 0, got {radius}")
    ignore = np.zeros(labels.shape, dtype=bool)
    h, w = labels.shape
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy == 0 and dx == 0:
                continue
            ys0, ys1 = max(0, dy), min(h, h + dy)
            xs0, xs1 = max(0, dx), min(w, w + dx)
            a = labels[ys0:ys1, xs0:xs1]
            b = labels[ys0 - dy:ys1 - dy, xs0 - dx:xs1 - dx]
            ignore[ys0:ys1, xs0:xs1] |= a != b
    return ignore


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def predict_image(arch, store, image, exact=False):
    """Whole-image class scores, (k, h, w)."""
    x = np.asarray(image, dtype=np.float32)[None]
    state = graph_forward(arch, store, x, mode="infer", exact=exact)
    return state[arch.output][0]


def predict_tiled(arch, store, image, tile=64, overlap=None, exact=False):
    """Tile-by-tile inference equal to the whole-image result.

    Each written ``tile``-sized interior is computed from a surrounding
    window padded by ``overlap`` on every side, so no written pixel's
    receptive field crosses a window border; windows at the image edge
    are shifted inward, never zero-padded beyond the network's own
    padding.  ``overlap`` must cover the architecture's halo (the
    default) and is rounded up so windows match the size divisor.

    Returns ``(labels, scores)`` with scores shaped (k, h, w).
    """
    image = np.asarray(image, dtype=np.float32)
    c, h, w = image.shape
    halo = arch_mod.halo(arch)
    if overlap is None:
        overlap = halo
    if overlap < halo:
        raise ShapeError(
            f"tile overlap {overlap} is below the network halo; need at "
            f"least {halo} input pixels"
        )
    div = arch.size_divisor
    if tile % div:
        raise ShapeError(f"tile size {tile} must be divisible by {div}")

    window = tile + 2 * overlap
    window = ((window + div - 1) // div) * div
    if window >= min(h, w):
        scores = predict_image(arch, store, image, exact=exact)
        return scores.argmax(axis=0).astype(np.uint8), scores

    margin = (window - tile) // 2
    scores = np.zeros((arch.n_classes, h, w), dtype=np.float32)
    for ty in range(0, h, tile):
        for tx in range(0, w, tile):
            iy0, ix0 = min(ty, h - tile), min(tx, w - tile)
            wy = min(max(iy0 - margin, 0), h - window)
            wx = min(max(ix0 - margin, 0), w - window)
            out = predict_image(arch, store, image[:, wy:wy + window,
                                                   wx:wx + window],
                                exact=exact)
            # Interior pixels sit at least ``margin`` >= halo away from any
            # window face that is not flush with the image border, so the
            # written region matches the whole-image response exactly.
            hi_y, hi_x = min(iy0 + tile, h), min(ix0 + tile, w)
            scores[:, iy0:hi_y, ix0:hi_x] = out[:, iy0 - wy:hi_y - wy,
                                                ix0 - wx:hi_x - wx]
    return scores.argmax(axis=0).astype(np.uint8), scores
