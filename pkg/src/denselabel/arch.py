"""Builders for the five labeling architectures and their static analysis.

All variants grow out of one base trunk: an entry convolution with
stride 2 followed by three conv/conv/pool levels (32, 64, 96, 128
filters), batch normalization and ReLU after every convolution except
the final 1x1 scoring layer, for a total downsampling factor of 16.
A literal variant with a fourth pooling stage (factor 32) is available
behind ``literal_pool4`` for comparison; the derived architectures
require the standard factor-16 trunk.

* ``build_base_fcn``  - trunk + 1x1 score layer + learnable x16
  upsampling initialized to bilinear interpolation.
* ``build_dilation``  - same trunk computed densely at stride 2: each
  pooling stage becomes a stride-1 dilated max and later convolutions
  double their dilation, which interleaves the coarse network over all
  spatial phases without adding parameters.
* ``build_unpooling`` - encoder/decoder: the trunk minus the score layer,
  mirrored with transposed convolutions and max-unpooling driven by the
  recorded pooling argmax offsets.
* ``build_skip``      - per-level 1x1 score maps combined coarse-to-fine
  by learnable x2 upsampling and elementwise addition.
* ``build_mlp``       - per-level features upsampled to the finest grid,
  concatenated, and fused per pixel by a two-layer 1x1-kernel network
  with a configurable hidden width.
"""

import math
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from . import ops
from .errors import GraphError, ShapeError
from .graph import INPUT, ArchGraph
from .layers import Layer
from .params import ParamStore

# (level, kernel, filters, stride, pad); a 2x2 pool follows each level
# except the last (and follows the last too in the literal variant).
TRUNK_LEVELS = (
    (1, ((5, 32, 2, 2), (3, 32, 1, 1))),
    (2, ((3, 64, 1, 1), (3, 64, 1, 1))),
    (3, ((3, 96, 1, 1), (3, 96, 1, 1))),
    (4, ((3, 128, 1, 1), (3, 128, 1, 1))),
)

ARCH_NAMES = ("fcn", "dilation", "unpool", "skip", "mlp")


def _conv_block(layers, warm, name, src, kernel, filters, stride, pad,
                dilation=1, bn_relu=True):
    layers.append(Layer(f"conv{name}", "conv", (src,), out_channels=filters,
                        kernel=kernel, stride=stride, pad=pad,
                        dilation=dilation))
    warm += [f"conv{name}.w", f"conv{name}.b"]
    out = f"conv{name}"
    if bn_relu:
        layers.append(Layer(f"bn{name}", "batchnorm", (out,)))
        warm += [f"bn{name}.{s}" for s in ("gamma", "beta", "mean", "var", "count")]
        layers.append(Layer(f"relu{name}", "relu", (f"bn{name}",)))
        out = f"relu{name}"
    return out


def _upsample(name, src, channels, factor, size_like):
    """Learnable transposed convolution initialized to bilinear
    interpolation by ``factor``."""
    return Layer(name, "tconv", (src,), out_channels=channels,
                 kernel=2 * factor, stride=factor, crop=factor // 2,
                 size_like=size_like, init="bilinear", bias=False)


def _trunk(in_channels, literal_pool4=False, dilated=False):
    """Shared feature trunk.  Returns (layers, warm names, taps, last node).

    ``taps`` maps each level to its final post-activation feature node
    (taken before pooling).  With ``dilated`` the pooling stages become
    stride-1 dilated maxima and later convolutions carry doubled
    dilations, keeping the maps dense at the entry stride.
    """
    layers, warm = [], []
    taps = {}
    src = INPUT
    removed = 0  # pooling stages converted to dense form so far
    for level, convs in TRUNK_LEVELS:
        for j, (kernel, filters, stride, pad) in enumerate(convs, start=1):
            d = 2 ** removed if dilated else 1
            src = _conv_block(layers, warm, f"{level}_{j}", src, kernel,
                              filters, stride, pad if d == 1 else d * (kernel - 1) // 2,
                              dilation=d)
        taps[level] = src
        last_level = level == TRUNK_LEVELS[-1][0]
        if not last_level or literal_pool4:
            if dilated:
                layers.append(Layer(f"dilpool{level}", "dilmaxpool", (src,),
                                    window=2, dilation=2 ** removed))
                src = f"dilpool{level}"
                removed += 1
            else:
                layers.append(Layer(f"pool{level}", "maxpool", (src,), window=2))
                src = f"pool{level}"
    return layers, warm, taps, src


def _require_standard(base, what):
    if base.meta.get("literal_pool4"):
        raise GraphError(
            f"{what} requires the standard factor-16 trunk; rebuild the base "
            f"network without literal_pool4"
        )


def build_base_fcn(in_channels, n_classes, literal_pool4=False) -> ArchGraph:
    """Plain fully convolutional labeler: trunk, 1x1 score layer, one
    learnable upsampling back to input resolution."""
    if in_channels < 1 or n_classes < 2:
        raise ShapeError(
            f"need in_channels >= 1 and n_classes >= 2, got {in_channels}, {n_classes}"
        )
    layers, warm, taps, src = _trunk(in_channels, literal_pool4)
    layers.append(Layer("conv_score", "conv", (src,), out_channels=n_classes,
                        kernel=1))
    warm += ["conv_score.w", "conv_score.b"]
    factor = 32 if literal_pool4 else 16
    layers.append(_upsample("up_out", "conv_score", n_classes, factor, INPUT))
    return ArchGraph(
        "fcn", in_channels, n_classes, layers, warm_start=tuple(warm),
        size_divisor=factor,
        meta={"literal_pool4": literal_pool4, "taps": taps,
              "score_src": src, "base": "fcn"},
    )


def build_dilation(base: ArchGraph, n_classes=None) -> ArchGraph:
    """Dense variant of the base network: identical parameters, pooling
    replaced by stride-1 dilated maxima, dilations doubled after each
    converted stage, and a final x2 upsampling.

    On any input its pre-upsampling output equals the base network's
    coarse outputs interleaved over all spatial phases of the entry grid.
    """
    _require_standard(base, "build_dilation")
    n_classes = base.n_classes if n_classes is None else n_classes
    layers, warm, taps, src = _trunk(base.in_channels, dilated=True)
    layers.append(Layer("conv_score", "conv", (src,), out_channels=n_classes,
                        kernel=1))
    warm += ["conv_score.w", "conv_score.b"]
    layers.append(_upsample("up_out", "conv_score", n_classes, 2, INPUT))
    return ArchGraph(
        "dilation", base.in_channels, n_classes, layers,
        warm_start=tuple(warm), size_divisor=2,
        meta={"literal_pool4": False, "taps": taps, "base": "fcn"},
    )


def build_unpooling(base: ArchGraph, n_classes=None) -> ArchGraph:
    """Encoder/decoder variant: the trunk without its score layer,
    mirrored layer for layer.

    Every pooling stage is paired with a max-unpooling stage that replays
    its argmax offsets, every convolution with a transposed convolution
    of mirrored kernel/stride/padding; the final decoder layer emits the
    class maps directly.
    """
    n_classes = base.n_classes if n_classes is None else n_classes
    literal = base.meta.get("literal_pool4", False)
    layers, warm, taps, src = _trunk(base.in_channels, literal)

    # Mirror plan: walk encoder conv/pool nodes in reverse.
    encoder = [l for l in layers if l.kind in ("conv", "maxpool")]
    ch = {INPUT: base.in_channels}
    prev = INPUT
    enc_input = {}
    for l in layers:
        enc_input[l.name] = ch[_feed(l)]
        ch[l.name] = l.out_channels if l.kind == "conv" else ch[_feed(l)]

    mirrored = list(reversed(encoder))
    for i, enc in enumerate(mirrored):
        last = i == len(mirrored) - 1
        if enc.kind == "maxpool":
            name = f"unpool{enc.name[len('pool'):]}"
            layers.append(Layer(name, "maxunpool", (src,), window=enc.window,
                                pair=enc.name, size_like=enc.inputs[0]))
            src = name
        else:
            name = f"dec{enc.name[len('conv'):]}"
            out_ch = n_classes if last else enc_input[enc.name]
            layers.append(Layer(name, "tconv", (src,), out_channels=out_ch,
                                kernel=enc.kernel, stride=enc.stride,
                                crop=enc.pad, size_like=enc.inputs[0],
                                bias=False))
            src = name
            if not last:
                layers.append(Layer(f"dec_bn{enc.name[len('conv'):]}",
                                    "batchnorm", (src,)))
                src = f"dec_bn{enc.name[len('conv'):]}"
                layers.append(Layer(f"dec_relu{enc.name[len('conv'):]}",
                                    "relu", (src,)))
                src = f"dec_relu{enc.name[len('conv'):]}"
    return ArchGraph(
        "unpool", base.in_channels, n_classes, layers,
        warm_start=tuple(warm), size_divisor=base.size_divisor,
        meta={"literal_pool4": literal, "taps": taps, "base": "fcn"},
    )


def _feed(layer):
    return layer.inputs[0]


def build_skip(base: ArchGraph, n_classes=None) -> ArchGraph:
    """Multi-resolution score fusion: a 1x1 score layer per level tap,
    combined pairwise from the coarsest scale up by learnable x2
    upsampling and elementwise addition, then one final x2 upsampling
    (the finest tap sits at the entry stride)."""
    _require_standard(base, "build_skip")
    n_classes = base.n_classes if n_classes is None else n_classes
    layers, warm, taps, src = _trunk(base.in_channels)
    # The coarsest branch reuses the base score layer so pretrained
    # weights transfer by name.
    layers.append(Layer("conv_score", "conv", (taps[4],),
                        out_channels=n_classes, kernel=1))
    warm += ["conv_score.w", "conv_score.b"]
    for level in (1, 2, 3):
        layers.append(Layer(f"skip_score{level}", "conv", (taps[level],),
                            out_channels=n_classes, kernel=1))
    combined = "conv_score"
    for level in (3, 2, 1):
        up = f"skip_up{level}"
        layers.append(_upsample(up, combined, n_classes, 2, taps[level]))
        layers.append(Layer(f"skip_add{level}", "add",
                            (up, f"skip_score{level}")))
        combined = f"skip_add{level}"
    layers.append(_upsample("up_out", combined, n_classes, 2, INPUT))
    return ArchGraph(
        "skip", base.in_channels, n_classes, layers, warm_start=tuple(warm),
        size_divisor=16,
        meta={"literal_pool4": False, "taps": taps, "base": "fcn"},
    )


def build_mlp(base: ArchGraph, n_classes=None, hidden=1024) -> ArchGraph:
    """Multi-resolution feature fusion: level taps are upsampled to the
    finest tap's grid, concatenated into one feature pool, and combined
    per pixel by a hidden 1x1 convolution stage; the score layer of the
    base network is dropped."""
    _require_standard(base, "build_mlp")
    n_classes = base.n_classes if n_classes is None else n_classes
    layers, warm, taps, src = _trunk(base.in_channels)
    ch_per_level = {lvl: convs[-1][1] for lvl, convs in TRUNK_LEVELS}
    pool = [taps[1]]
    for level, factor in ((2, 2), (3, 4), (4, 8)):
        name = f"mlp_up{level}"
        layers.append(_upsample(name, taps[level], ch_per_level[level],
                                factor, taps[1]))
        pool.append(name)
    layers.append(Layer("mlp_concat", "concat", tuple(pool)))
    layers.append(Layer("mlp_hidden", "conv", ("mlp_concat",),
                        out_channels=hidden, kernel=1))
    layers.append(Layer("mlp_hidden_relu", "relu", ("mlp_hidden",)))
    layers.append(Layer("mlp_logits", "conv", ("mlp_hidden_relu",),
                        out_channels=n_classes, kernel=1))
    layers.append(_upsample("up_out", "mlp_logits", n_classes, 2, INPUT))
    return ArchGraph(
        "mlp", base.in_channels, n_classes, layers, warm_start=tuple(warm),
        size_divisor=16,
        meta={"literal_pool4": False, "taps": taps, "base": "fcn",
              "hidden": hidden},
    )


def wrap_halfres(arch: ArchGraph) -> ArchGraph:
    """Half-resolution wrapper: average-pool the input by 2, run the
    architecture, upsample the result by 2.  Used to keep the receptive
    field comparable in ground units on finer imagery."""
    layers = [Layer("halfres_pool", "avgpool", (INPUT,), window=2)]
    rename = {INPUT: "halfres_pool"}
    for l in arch.layers:
        layers.append(replace(
            l,
            inputs=tuple(rename.get(s, s) for s in l.inputs),
            size_like=rename.get(l.size_like, l.size_like),
        ))
    layers.append(_upsample("halfres_up", arch.output, arch.n_classes, 2, INPUT))
    return ArchGraph(
        f"{arch.name}", arch.in_channels, arch.n_classes, layers,
        warm_start=arch.warm_start, size_divisor=arch.size_divisor * 2,
        meta=dict(arch.meta, halfres=True),
    )


def build(name, in_channels, n_classes, literal_pool4=False, halfres=False,
          hidden=1024) -> ArchGraph:
    """Build any architecture by registry name
    (fcn, dilation, unpool, skip, mlp)."""
    if name not in ARCH_NAMES:
        raise GraphError(f"unknown architecture {name!r}; choose from {ARCH_NAMES}")
    base = build_base_fcn(in_channels, n_classes, literal_pool4)
    if name == "fcn":
        arch = base
    elif name == "dilation":
        arch = build_dilation(base)
    elif name == "unpool":
        arch = build_unpooling(base)
    elif name == "skip":
        arch = build_skip(base)
    else:
        arch = build_mlp(base, hidden=hidden)
    return wrap_halfres(arch) if halfres else arch


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def init_params(arch: ArchGraph, rng=None, dtype=np.float32) -> ParamStore:
    """Fresh parameters: zero-mean Gaussians with variance 2/fan_in for
    convolution kernels (matching ReLU variance scaling), zero biases,
    unit batch-norm scale, and exact bilinear kernels for layers tagged
    as upsamplers."""
    rng = np.random.default_rng(0) if rng is None else rng
    ch = arch.channels()
    store = ParamStore()
    for l in arch.layers:
        cin = sum(ch[s] for s in l.inputs) if l.kind == "concat" else ch[l.inputs[0]]
        if l.kind == "conv":
            fan_in = cin * l.kernel * l.kernel
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in),
                           (l.out_channels, cin, l.kernel, l.kernel))
            store.add(f"{l.name}.w", w.astype(dtype))
            if l.bias:
                store.add(f"{l.name}.b", np.zeros(l.out_channels, dtype=dtype),
                          decay=False, role="bias")
        elif l.kind == "tconv":
            if l.init == "bilinear":
                if cin != l.out_channels:
                    raise GraphError(
                        f"bilinear init needs matching channels at {l.name!r}"
                    )
                w = ops.make_bilinear_kernel(cin, l.stride, dtype)
                if w.shape[2] != l.kernel:
                    raise GraphError(
                        f"upsampler {l.name!r}: kernel {l.kernel} does not "
                        f"match factor {l.stride}"
                    )
            else:
                fan_in = cin * l.kernel * l.kernel
                w = rng.normal(0.0, math.sqrt(2.0 / fan_in),
                               (cin, l.out_channels, l.kernel, l.kernel)
                               ).astype(dtype)
            store.add(f"{l.name}.w", np.asarray(w, dtype=dtype))
        elif l.kind == "batchnorm":
            store.add(f"{l.name}.gamma", np.ones(cin, dtype=dtype),
                      decay=False, role="bn_scale")
            store.add(f"{l.name}.beta", np.zeros(cin, dtype=dtype),
                      decay=False, role="bn_shift")
            store.add(f"{l.name}.mean", np.zeros(cin, dtype=dtype),
                      trainable=False, decay=False, role="bn_mean")
            store.add(f"{l.name}.var", np.ones(cin, dtype=dtype),
                      trainable=False, decay=False, role="bn_var")
            store.add(f"{l.name}.count", np.zeros(1, dtype=np.int64),
                      trainable=False, decay=False, role="bn_count")
    return store


# ---------------------------------------------------------------------------
# static analysis
# ---------------------------------------------------------------------------

@dataclass
class NodeReport:
    name: str
    kind: str
    channels: int
    stride: Fraction
    rf: Fraction
    params: int
    act_bytes: int
    out_hw: tuple


@dataclass
class AnalyzeReport:
    arch: str
    input_hw: tuple
    nodes: list
    total_params: int
    downsampling: int
    halo: int

    def to_text(self):
        head = f"{'layer':<16}{'kind':<12}{'ch':>5}{'stride':>8}{'rf':>7}" \
               f"{'params':>10}{'act bytes':>12}  out hw"
        lines = [f"architecture: {self.arch}", head, "-" * len(head)]
        for n in self.nodes:
            lines.append(
                f"{n.name:<16}{n.kind:<12}{n.channels:>5}"
                f"{str(n.stride):>8}{str(n.rf):>7}{n.params:>10}"
                f"{n.act_bytes:>12}  {n.out_hw[0]}x{n.out_hw[1]}"
            )
        lines.append("-" * len(head))
        lines.append(f"total parameters: {self.total_params}")
        lines.append(f"total downsampling factor: {self.downsampling}")
        lines.append(f"border halo (input pixels): {self.halo}")
        return "\n".join(lines)

    def to_csv(self):
        rows = ["layer,kind,channels,stride,rf,params,act_bytes,out_h,out_w"]
        for n in self.nodes:
            rows.append(
                f"{n.name},{n.kind},{n.channels},{n.stride},{n.rf},"
                f"{n.params},{n.act_bytes},{n.out_hw[0]},{n.out_hw[1]}"
            )
        return "\n".join(rows) + "\n"


def _node_params(layer, cin):
    if layer.kind == "conv":
        n = layer.out_channels * cin * layer.kernel * layer.kernel
        return n + (layer.out_channels if layer.bias else 0)
    if layer.kind == "tconv":
        return cin * layer.out_channels * layer.kernel * layer.kernel
    if layer.kind == "batchnorm":
        return 2 * cin
    return 0


def analyze(arch: ArchGraph, input_hw=(256, 256), batch=1,
            bytes_per_value=4) -> AnalyzeReport:
    """Per-node receptive field, accumulated stride, channels, parameter
    count and activation-memory estimate, plus the trunk downsampling
    factor and the tiling halo."""
    ch = arch.channels()
    sizes = {INPUT: tuple(input_hw)}
    stride = {INPUT: Fraction(1)}
    rf = {INPUT: Fraction(1)}
    nodes = []
    total = 0
    for l in arch.layers:
        j = stride[l.inputs[0]]
        r = rf[l.inputs[0]]
        h, w = sizes[l.inputs[0]]
        if l.kind == "conv":
            r = r + (l.kernel - 1) * l.dilation * j
            jn = j * l.stride
            h = ops.conv_out_size(h, l.kernel, l.stride, l.pad, l.dilation)
            w = ops.conv_out_size(w, l.kernel, l.stride, l.pad, l.dilation)
        elif l.kind in ("maxpool", "avgpool"):
            r = r + (l.window - 1) * j
            jn = j * l.window
            if h % l.window or w % l.window:
                raise ShapeError(
                    f"{l.name}: window {l.window} does not tile {h}x{w} "
                    f"(input {input_hw} violates the size divisor "
                    f"{arch.size_divisor})"
                )
            h, w = h // l.window, w // l.window
        elif l.kind == "dilmaxpool":
            r = r + (l.window - 1) * l.dilation * j
            jn = j
        elif l.kind == "tconv":
            jn = j / l.stride
            r = r + (l.kernel - 1) * jn
            if l.size_like is not None:
                h, w = sizes[l.size_like]
            else:
                h, w = ops.tconv_out_hw((h, w), l.kernel, l.stride, l.crop)
        elif l.kind == "maxunpool":
            jn = j / l.window
            h, w = sizes[l.size_like]
        elif l.kind in ("concat", "add"):
            js = {stride[s] for s in l.inputs}
            if len(js) != 1:
                raise GraphError(f"{l.name}: mixing strides {js}")
            jn = js.pop()
            r = max(rf[s] for s in l.inputs)
        else:  # relu, batchnorm
            jn = j
        stride[l.name] = jn
        rf[l.name] = r
        sizes[l.name] = (h, w)
        cin = ch[l.inputs[0]]
        p = _node_params(l, cin)
        total += p
        nodes.append(NodeReport(
            l.name, l.kind, ch[l.name], jn, r, p,
            batch * ch[l.name] * h * w * bytes_per_value, (h, w),
        ))
    down = int(max(stride.values()))
    return AnalyzeReport(arch.name, tuple(input_hw), nodes, total, down,
                         halo(arch))


def input_support(arch: ArchGraph, lo, hi):
    """Inclusive input index interval that can influence output positions
    [lo, hi] (1-D; identical in both axes for these square networks)."""
    need = {arch.output: (lo, hi)}
    for l in reversed(arch.layers):
        if l.name not in need:
            continue
        a, b = need.pop(l.name)
        if l.kind == "conv":
            ia = l.stride * a - l.pad
            ib = l.stride * b - l.pad + l.dilation * (l.kernel - 1)
        elif l.kind in ("maxpool", "avgpool"):
            ia, ib = l.window * a, l.window * b + l.window - 1
        elif l.kind == "dilmaxpool":
            ia, ib = a, b + l.dilation * (l.window - 1)
        elif l.kind == "tconv":
            ia = math.ceil((a + l.crop - l.kernel + 1) / l.stride)
            ib = math.floor((b + l.crop) / l.stride)
        elif l.kind == "maxunpool":
            ia, ib = a // l.window, b // l.window
        else:
            ia, ib = a, b
        for src in l.inputs:
            if src in need:
                pa, pb = need[src]
                need[src] = (min(pa, ia), max(pb, ib))
            else:
                need[src] = (ia, ib)
    return need[INPUT]


def halo(arch: ArchGraph, period=64, probe=4096):
    """Largest one-sided input reach of any output pixel: the margin
    within which outputs can differ from the infinite-image response.
    Governs the minimum tiling overlap."""
    left = right = 0
    for q in range(period):
        p = probe + q
        lo, hi = input_support(arch, p, p)
        left = max(left, p - lo)
        right = max(right, hi - p)
    return max(left, right)
