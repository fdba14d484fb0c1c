"""Desk-scale builders for the two studied network families.

``build_mini_caffenet`` follows the five-conv / three-FC template where every
convolution is followed by a pooling layer.  ``build_mini_googlenet`` chains
inception modules (1x1, reduced 3x3, reduced 5x5 and pooled-projection
branches concatenated on channels) with an optional auxiliary classifier.

Pooling in both families uses 3x3 windows, stride 2 and padding 1, so every
stage halves the spatial size rounding up and small inputs never vanish.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import forward
from .graph import INPUT, NetworkGraph
from .layers import LRN, Concat, Conv2D, Dense, Dropout, Pool2D
from .tensor import ShapeError, make_rng

CAFFENET_CHANNELS = (16, 32, 48, 48, 32)
CAFFENET_FC = (256, 128)
AUX_LOSS_WEIGHT = 0.3


class HeadError(ValueError):
    """The network head cannot be replaced (not a fully-connected layer)."""


@dataclass(frozen=True)
class InceptionSpec:
    b1x1: int
    reduce3: int
    b3x3: int
    reduce5: int
    b5x5: int
    pool_proj: int

    @property
    def out_channels(self) -> int:
        return self.b1x1 + self.b3x3 + self.b5x5 + self.pool_proj


DEFAULT_INCEPTION = (
    InceptionSpec(16, 16, 24, 4, 8, 8),
    InceptionSpec(24, 24, 32, 8, 12, 12),
    InceptionSpec(32, 24, 48, 8, 16, 16),
)


def _per_sample(shape) -> tuple[int, int, int]:
    shape = tuple(int(n) for n in shape)
    if len(shape) == 4:
        shape = shape[1:]
    if len(shape) != 3:
        raise ValueError(f"input shape must be (C, H, W) or (N, C, H, W), got {shape}")
    return shape


def _downsample():
    return Pool2D("max", 3, stride=2, padding=1)


def init_parameters(net: NetworkGraph, seed: int) -> NetworkGraph:
    """Glorot-uniform weights, zero biases/thresholds; node ``i`` draws from stream (seed, i)."""
    for i, node in enumerate(net.nodes):
        if node.layer.params:
            node.layer.init_params(make_rng(seed, i))
    return net


def _finish(net: NetworkGraph, seed: int) -> NetworkGraph:
    try:
        net.validate()
    except ShapeError as exc:
        raise ShapeError(f"spatial underflow at {exc}") from None
    return init_parameters(net, seed)


def build_mini_caffenet(input_shape, num_classes: int, width_scale: float = 1.0, seed: int = 0,
                        channels: Sequence[int] = CAFFENET_CHANNELS, fc_units: Sequence[int] = CAFFENET_FC,
                        lrn: bool = True, dropout: float = 0.5) -> NetworkGraph:
    """Five conv+pool stages followed by three fully-connected layers.

    conv1 is 5x5, the others 3x3 (all 'same' padded, ReLU).  LRN follows the
    first two pools and dropout the first two FC layers; both are optional.
    """
    if width_scale <= 0:
        raise ValueError("width_scale must be positive")
    c, h, w = _per_sample(input_shape)
    net = NetworkGraph((c, h, w), family="caffenet")
    prev, in_ch = INPUT, c
    for stage, base in enumerate(channels, start=1):
        out_ch = max(1, int(round(base * width_scale)))
        k = 5 if stage == 1 else 3
        prev = net.add(f"conv{stage}", Conv2D(in_ch, out_ch, k, stride=1, padding=k // 2), prev)
        prev = net.add(f"pool{stage}", _downsample(), prev)
        if lrn and stage <= 2:
            prev = net.add(f"lrn{stage}", LRN(), prev)
        in_ch = out_ch
    try:
        fc_in = int(np.prod(net.shapes()[prev]))
    except ShapeError as exc:
        raise ShapeError(f"spatial underflow at {exc}") from None
    widths = list(fc_units) + [num_classes]
    for i, units in enumerate(widths, start=1):
        last = i == len(widths)
        prev = net.add(f"fc{i}", Dense(fc_in, units, "identity" if last else "relu"), prev)
        if not last and dropout > 0:
            prev = net.add(f"drop{i}", Dropout(dropout, seed), prev)
        fc_in = units
    net.main_head = prev
    return _finish(net, seed)


def add_inception(net: NetworkGraph, prefix: str, src: str, in_channels: int, spec: InceptionSpec) -> str:
    """Append one inception module reading ``src``; returns the concat node name."""
    b1 = net.add(f"{prefix}_1x1", Conv2D(in_channels, spec.b1x1, 1), src)
    r3 = net.add(f"{prefix}_3x3_reduce", Conv2D(in_channels, spec.reduce3, 1), src)
    b3 = net.add(f"{prefix}_3x3", Conv2D(spec.reduce3, spec.b3x3, 3, padding=1), r3)
    r5 = net.add(f"{prefix}_5x5_reduce", Conv2D(in_channels, spec.reduce5, 1), src)
    b5 = net.add(f"{prefix}_5x5", Conv2D(spec.reduce5, spec.b5x5, 5, padding=2), r5)
    pool = net.add(f"{prefix}_pool", Pool2D("max", 3, stride=1, padding=1), src)
    proj = net.add(f"{prefix}_pool_proj", Conv2D(in_channels, spec.pool_proj, 1), pool)
    return net.add(f"{prefix}_output", Concat(), (b1, b3, b5, proj))


def build_mini_googlenet(input_shape, num_classes: int, inception_specs: Sequence[InceptionSpec] = DEFAULT_INCEPTION,
                         use_aux: bool = True, seed: int = 0, stem_channels: int = 16,
                         aux_weight: float = AUX_LOSS_WEIGHT, dropout: float = 0.4) -> NetworkGraph:
    """Conv stem, inception chain with interleaved max pools, global average pool, FC head.

    With ``use_aux`` an auxiliary classifier (avg pool, 1x1 conv, FC) reads
    the middle inception module and contributes ``aux_weight`` times its loss.
    """
    specs = [s if isinstance(s, InceptionSpec) else InceptionSpec(*s) for s in inception_specs]
    if len(specs) < 2:
        raise ValueError("at least two inception modules are required")
    c, h, w = _per_sample(input_shape)
    net = NetworkGraph((c, h, w), family="googlenet")
    prev = net.add("conv1", Conv2D(c, stem_channels, 3, padding=1))
    prev = net.add("pool1", _downsample(), prev)
    ch = stem_channels
    middle = (len(specs) - 1) // 2
    aux_src = None
    for m, spec in enumerate(specs):
        prev = add_inception(net, f"inc{m + 1}", prev, ch, spec)
        ch = spec.out_channels
        if m == middle:
            aux_src = (prev, ch)
        if m < len(specs) - 1:
            prev = net.add(f"pool{m + 2}", _downsample(), prev)
    try:
        shapes = net.shapes()
    except ShapeError as exc:
        raise ShapeError(f"spatial underflow at {exc}") from None
    _, fh, fw = shapes[prev]
    prev = net.add("avgpool", Pool2D("avg", fh, fw, stride=1), prev)
    if dropout > 0:
        prev = net.add("drop", Dropout(dropout, seed), prev)
    net.main_head = net.add("classifier", Dense(ch, num_classes, "identity"), prev)

    if use_aux:
        src, src_ch = aux_src
        _, ah, aw = shapes[src]
        win = min(2, ah, aw)
        a = net.add("aux_pool", Pool2D("avg", win, stride=win), src)
        a = net.add("aux_conv", Conv2D(src_ch, stem_channels, 1), a)
        aux_in = int(np.prod(net.shapes()[a]))
        net.add("aux_classifier", Dense(aux_in, num_classes, "identity"), a)
        net.aux_heads["aux_classifier"] = float(aux_weight)
    return _finish(net, seed)


def build_linear_net(input_shape, num_classes: int, seed: int = 0) -> NetworkGraph:
    """Single identity-activation FC layer on the flattened input."""
    net = NetworkGraph(tuple(input_shape), family="linear")
    net.main_head = net.add("fc1", Dense(int(np.prod(input_shape)), num_classes, "identity"))
    return _finish(net, seed)


ARCHITECTURES = {
    "mini_caffenet": build_mini_caffenet,
    "mini_googlenet": build_mini_googlenet,
    "linear": build_linear_net,
}


def build_network(architecture: str, input_shape, num_classes: int, **kwargs) -> NetworkGraph:
    if architecture not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {architecture!r}; expected one of {sorted(ARCHITECTURES)}")
    return ARCHITECTURES[architecture](input_shape, num_classes, **kwargs)


def replace_head(net: NetworkGraph, new_num_classes: int, seed: int = 0) -> NetworkGraph:
    """Copy of ``net`` whose final FC layers (main and auxiliary) are freshly initialized for a new class count."""
    out = net.copy()
    for head in out.heads:
        node = out.node(head)
        if not isinstance(node.layer, Dense):
            raise HeadError(f"head {head!r} is a {node.layer.kind} layer, not fully-connected")
        old = node.layer
        new = Dense(old.in_units, new_num_classes, old.activation)
        new.init_params(make_rng(seed, out.index(head)))
        new.astype(old.params["weight"].dtype)
        node.layer = new
    out.validate()
    return out


def penultimate_input(net: NetworkGraph) -> str:
    return net.node(net.main_head).inputs[0]


def penultimate_features(net: NetworkGraph, x: np.ndarray) -> np.ndarray:
    """Eval-mode activation feeding the main head, flattened per sample."""
    _, tape = forward(net, x, "eval")
    feats = tape.value(penultimate_input(net))
    return feats.reshape(feats.shape[0], -1)
