"""Architecture graphs and their forward/backward execution.

An :class:`ArchGraph` is an acyclic list of :class:`~denselabel.layers.Layer`
nodes in topological order (enforced at build time: every edge must point
backwards in the list).  ``graph_forward`` evaluates all activations;
``graph_backward`` runs exact reverse-mode differentiation, accumulating
gradients additively wherever a node fans out to several consumers.
"""

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import GraphError, ShapeError
from .layers import (Layer, batchnorm_backward, batchnorm_forward,
                     relu_backward, relu_forward)
from .params import ParamStore

INPUT = "input"


@dataclass
class ArchGraph:
    """A directed acyclic network description.

    ``warm_start`` lists the parameter names a derived architecture shares
    with its pretraining source; ``size_divisor`` is the input size
    granularity the pooling structure requires.  ``meta`` carries builder
    flags so derived builders can reconstruct the same trunk.
    """

    name: str
    in_channels: int
    n_classes: int
    layers: list = field(default_factory=list)
    warm_start: tuple = ()
    size_divisor: int = 16
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._by_name = {}
        seen = {INPUT}
        for layer in self.layers:
            if layer.name in self._by_name or layer.name == INPUT:
                raise GraphError(f"duplicate node name: {layer.name}")
            for src in layer.inputs:
                if src not in seen:
                    raise GraphError(
                        f"node {layer.name!r} consumes {src!r} before it is "
                        f"produced (cycle or dangling edge)"
                    )
            if layer.pair is not None:
                pool = self._by_name.get(layer.pair)
                if pool is None:
                    raise GraphError(
                        f"unpool node {layer.name!r} pairs with unknown node "
                        f"{layer.pair!r}"
                    )
                if pool.kind != "maxpool" or pool.window != layer.window:
                    raise GraphError(
                        f"unpool node {layer.name!r} (window {layer.window}) "
                        f"must pair with a max pool of the same window, got "
                        f"{pool.kind} {layer.pair!r} (window {pool.window})"
                    )
            self._by_name[layer.name] = layer
            seen.add(layer.name)
        if not self.layers:
            raise GraphError("empty graph")

    @property
    def output(self):
        return self.layers[-1].name

    def node(self, name) -> Layer:
        return self._by_name[name]

    def channels(self):
        """Channel count of every activation, input included."""
        ch = {INPUT: self.in_channels}
        for l in self.layers:
            if l.kind in ("conv", "tconv"):
                ch[l.name] = l.out_channels
            elif l.kind == "concat":
                ch[l.name] = sum(ch[s] for s in l.inputs)
            elif l.kind == "add":
                parts = {ch[s] for s in l.inputs}
                if len(parts) != 1:
                    raise GraphError(
                        f"add node {l.name!r} mixes channel counts {parts}"
                    )
                ch[l.name] = parts.pop()
            else:
                ch[l.name] = ch[l.inputs[0]]
        if ch[self.output] != self.n_classes:
            raise GraphError(
                f"output node {self.output!r} emits {ch[self.output]} channels, "
                f"expected {self.n_classes}"
            )
        return ch


@dataclass
class ForwardState:
    """Activations plus the per-node caches backward needs."""

    mode: str
    exact: bool
    acts: dict
    caches: dict

    def __getitem__(self, name):
        return self.acts[name]


def _target_hw(layer, state):
    if layer.size_like is None:
        return None
    return state.acts[layer.size_like].shape[2:]


# ---------------------------------------------------------------------------
# per-kind forward
# ---------------------------------------------------------------------------

def _fwd_conv(layer, store, xs, state):
    w = store[f"{layer.name}.w"].value
    b = store[f"{layer.name}.b"].value if layer.bias else None
    if state.exact:
        y = ops.conv2d(xs[0], w, b, layer.stride, layer.pad, layer.dilation,
                       exact=True)
        state.caches[layer.name] = None
    else:
        y, cols = ops.conv_forward_cols(xs[0], w, b, layer.stride, layer.pad,
                                        layer.dilation)
        state.caches[layer.name] = cols
    return y


def _fwd_tconv(layer, store, xs, state):
    w = store[f"{layer.name}.w"].value
    return ops.transposed_conv2d(xs[0], w, layer.stride, layer.crop,
                                 out_hw=_target_hw(layer, state),
                                 exact=state.exact)


def _fwd_maxpool(layer, store, xs, state):
    y, idx = ops.maxpool2d(xs[0], layer.window)
    state.caches[layer.name] = idx
    return y


def _fwd_dilmaxpool(layer, store, xs, state):
    y, idx = ops.dilated_maxpool2d(xs[0], layer.window, layer.dilation)
    state.caches[layer.name] = idx
    return y


def _fwd_avgpool(layer, store, xs, state):
    return ops.avgpool2d(xs[0], layer.window)


def _fwd_maxunpool(layer, store, xs, state):
    idx = state.caches[layer.pair]
    return ops.max_unpool2d(xs[0], idx, layer.window)


def _fwd_batchnorm(layer, store, xs, state):
    gamma = store[f"{layer.name}.gamma"]
    beta = store[f"{layer.name}.beta"]
    mean = store[f"{layer.name}.mean"]
    var = store[f"{layer.name}.var"]
    count = store[f"{layer.name}.count"]
    if state.mode == "infer" and count.value[0] < 1:
        from .errors import StateError
        raise StateError(
            f"batchnorm {layer.name!r}: inference before any training update"
        )
    y, cache = batchnorm_forward(
        xs[0], gamma.value, beta.value, mode=state.mode,
        running_mean=mean.value, running_var=var.value,
    )
    if state.mode == "train":
        count.value[0] += 1
    state.caches[layer.name] = cache
    return y


def _fwd_relu(layer, store, xs, state):
    state.caches[layer.name] = xs[0] > 0
    return relu_forward(xs[0])


def _fwd_concat(layer, store, xs, state):
    state.caches[layer.name] = [x.shape[1] for x in xs]
    return ops.concat_channels(xs)


def _fwd_add(layer, store, xs, state):
    y = xs[0].copy()
    for x in xs[1:]:
        if x.shape != y.shape:
            raise ShapeError(
                f"add node {layer.name!r}: shapes differ, {y.shape} vs {x.shape}"
            )
        y += x
    return y


FORWARD = {
    "conv": _fwd_conv,
    "tconv": _fwd_tconv,
    "maxpool": _fwd_maxpool,
    "dilmaxpool": _fwd_dilmaxpool,
    "avgpool": _fwd_avgpool,
    "maxunpool": _fwd_maxunpool,
    "batchnorm": _fwd_batchnorm,
    "relu": _fwd_relu,
    "concat": _fwd_concat,
    "add": _fwd_add,
}


# ---------------------------------------------------------------------------
# per-kind backward: return list of gradients, one per layer input
# ---------------------------------------------------------------------------

def _bwd_conv(layer, store, state, dy):
    x = state.acts[layer.inputs[0]]
    w = store[f"{layer.name}.w"]
    cols = state.caches[layer.name]
    if cols is None:
        dx, dw, db = ops.conv2d_backward(
            x, w.value, dy, layer.stride, layer.pad, layer.dilation,
            with_bias=layer.bias,
        )
    else:
        dx, dw, db = ops.conv_backward_from_cols(
            cols, x.shape, w.value, dy, layer.stride, layer.pad,
            layer.dilation, with_bias=layer.bias,
        )
    w.grad += dw
    if layer.bias:
        store[f"{layer.name}.b"].grad += db
    return [dx]


def _bwd_tconv(layer, store, state, dy):
    x = state.acts[layer.inputs[0]]
    w = store[f"{layer.name}.w"]
    dx, dw = ops.transposed_conv2d_backward(x, w.value, dy, layer.stride,
                                            layer.crop)
    w.grad += dw
    return [dx]


def _bwd_maxpool(layer, store, state, dy):
    x = state.acts[layer.inputs[0]]
    idx = state.caches[layer.name]
    return [ops.maxpool2d_backward(dy, idx, layer.window, x.shape)]


def _bwd_dilmaxpool(layer, store, state, dy):
    x = state.acts[layer.inputs[0]]
    idx = state.caches[layer.name]
    return [ops.dilated_maxpool2d_backward(dy, idx, layer.window,
                                           layer.dilation, x.shape)]


def _bwd_avgpool(layer, store, state, dy):
    return [ops.avgpool2d_backward(dy, layer.window)]


def _bwd_maxunpool(layer, store, state, dy):
    idx = state.caches[layer.pair]
    return [ops.max_unpool2d_backward(dy, idx, layer.window)]


def _bwd_batchnorm(layer, store, state, dy):
    dx, dgamma, dbeta = batchnorm_backward(dy, state.caches[layer.name])
    store[f"{layer.name}.gamma"].grad += dgamma
    store[f"{layer.name}.beta"].grad += dbeta
    return [dx]


def _bwd_relu(layer, store, state, dy):
    return [dy * state.caches[layer.name]]


def _bwd_concat(layer, store, state, dy):
    return ops.split_channels(dy, state.caches[layer.name])


def _bwd_add(layer, store, state, dy):
    return [dy] * len(layer.inputs)


BACKWARD = {
    "conv": _bwd_conv,
    "tconv": _bwd_tconv,
    "maxpool": _bwd_maxpool,
    "dilmaxpool": _bwd_dilmaxpool,
    "avgpool": _bwd_avgpool,
    "maxunpool": _bwd_maxunpool,
    "batchnorm": _bwd_batchnorm,
    "relu": _bwd_relu,
    "concat": _bwd_concat,
    "add": _bwd_add,
}


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

def graph_forward(arch: ArchGraph, store: ParamStore, x, mode="train",
                  exact=False) -> ForwardState:
    """Evaluate every node.  ``mode`` selects batch-norm behaviour.

    The returned state holds all activations (keyed by node name, with
    "input" for the network input) and is consumed by
    :func:`graph_backward`; forward/backward pairs are reentrant given
    separate states.
    """
    if x.shape[1] != arch.in_channels:
        raise ShapeError(
            f"{arch.name}: input has {x.shape[1]} channels, expected "
            f"{arch.in_channels} (input shape {x.shape})"
        )
    state = ForwardState(mode=mode, exact=exact, acts={INPUT: x}, caches={})
    for layer in arch.layers:
        xs = [state.acts[s] for s in layer.inputs]
        state.acts[layer.name] = FORWARD[layer.kind](layer, store, xs, state)
    return state


def graph_backward(arch: ArchGraph, store: ParamStore, state: ForwardState,
                   dout):
    """Reverse-mode sweep from the output gradient ``dout``.

    Parameter gradients accumulate into the store (callers zero them
    between steps); the return value is the gradient with respect to the
    network input.
    """
    grads = {arch.output: dout}
    for layer in reversed(arch.layers):
        dy = grads.pop(layer.name, None)
        if dy is None:
            continue
        dxs = BACKWARD[layer.kind](layer, store, state, dy)
        for src, dx in zip(layer.inputs, dxs):
            if src in grads:
                grads[src] = grads[src] + dx
            else:
                grads[src] = dx
    return grads.get(INPUT)
