"""Named parameter storage with gradients and optimizer state."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


@dataclass
class ParamEntry:
    """One named tensor with its gradient accumulator and velocity.

    ``trainable`` distinguishes learned parameters from tracked state
    (batch-norm running statistics).  ``decay`` marks entries subject to
    the L2 penalty; biases and batch-norm scale/shift are exempt by
    default.
    """

    value: np.ndarray
    grad: np.ndarray = None
    velocity: np.ndarray = None
    trainable: bool = True
    decay: bool = True
    role: str = "weight"

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.velocity is None:
            self.velocity = np.zeros_like(self.value)
        if not (self.value.shape == self.grad.shape == self.velocity.shape):
            raise ShapeError(
                f"param entry: value/grad/velocity shapes differ: "
                f"{self.value.shape}, {self.grad.shape}, {self.velocity.shape}"
            )


class ParamStore:
    """Mapping from parameter name to :class:`ParamEntry`.

    A store is exclusively owned by one trainer at a time; read-only
    copies (``clone``) may be shared for concurrent inference.
    """

    def __init__(self):
        self._entries: dict[str, ParamEntry] = {}

    def add(self, name, value, trainable=True, decay=True, role="weight"):
        if name in self._entries:
            raise ShapeError(f"duplicate parameter name: {name}")
        self._entries[name] = ParamEntry(
            np.asarray(value), trainable=trainable, decay=decay, role=role
        )
        return self._entries[name]

    def __getitem__(self, name) -> ParamEntry:
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def trainable(self):
        return [(n, e) for n, e in self._entries.items() if e.trainable]

    def zero_grads(self):
        for e in self._entries.values():
            e.grad[...] = 0

    def n_params(self, trainable_only=True):
        return sum(
            e.value.size
            for e in self._entries.values()
            if e.trainable or not trainable_only
        )

    def clone(self):
        out = ParamStore()
        for n, e in self._entries.items():
            out._entries[n] = ParamEntry(
                e.value.copy(), e.grad.copy(), e.velocity.copy(),
                e.trainable, e.decay, e.role,
            )
        return out

    def astype(self, dtype):
        """Copy of the store with every float entry cast to ``dtype``
        (used to run verification passes in 64-bit)."""
        out = ParamStore()
        for n, e in self._entries.items():
            cast = (lambda a: a.astype(dtype)) if np.issubdtype(
                e.value.dtype, np.floating) else (lambda a: a.copy())
            out._entries[n] = ParamEntry(
                cast(e.value), cast(e.grad), cast(e.velocity),
                e.trainable, e.decay, e.role,
            )
        return out
