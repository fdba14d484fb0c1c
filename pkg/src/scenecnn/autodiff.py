"""Reverse-mode differentiation over a :class:`NetworkGraph`.

``forward`` records a tape (one entry per node, with the cached values each
layer's backward needs) and ``backward`` walks it in reverse, accumulating
gradients into nodes that feed several consumers.  Frozen layers produce no
parameter gradients but still pass gradients to their inputs whenever an
upstream layer is trainable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Iterable

import numpy as np

from .graph import INPUT, NetworkGraph
from .layers import Conv2D, Dense, Pool2D, softmax_xent
from .tensor import ShapeError


@dataclass
class TapeNode:
    node_id: int
    name: str
    inputs: tuple[str, ...]
    output: np.ndarray
    cache: Any


class Tape(list):
    """List of :class:`TapeNode` plus the graph it was recorded on."""

    def __init__(self, net: NetworkGraph, x: np.ndarray):
        super().__init__()
        self.net = net
        self.input = x

    def value(self, name: str) -> np.ndarray:
        if name == INPUT:
            return self.input
        return self[self.net.index(name)].output


class GradientSet(dict):
    """Parameter gradients keyed by ``"<node>.<field>"``; ``input_grad`` when requested."""

    input_grad: np.ndarray | None = None


def forward(net: NetworkGraph, x: np.ndarray, mode: str = "eval", key: tuple = ()):
    """Run the graph on a batch; returns (logits per head, tape).

    ``key`` seeds stochastic layers: node ``i`` draws from the stream
    ``(layer seed, *key, i)``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if x.ndim != len(net.input_shape) + 1 or tuple(x.shape[1:]) != net.input_shape:
        raise ShapeError(f"input shape {x.shape[1:]} does not match network input {net.input_shape}")
    train = mode == "train"
    tape = Tape(net, x)
    values = {INPUT: x}
    for i, node in enumerate(net.nodes):
        try:
            out, cache = node.layer.forward([values[s] for s in node.inputs], train, (*key, i))
        except ShapeError as exc:
            raise ShapeError(f"{node.name}: {exc}") from None
        values[node.name] = out
        tape.append(TapeNode(i, node.name, node.inputs, out, cache))
    return [values[h] for h in net.heads], tape


def backward(tape: Tape | None, loss_grads: list, frozen: Iterable[str] = (), wrt_input: bool = False) -> GradientSet:
    """Gradients of every parameter in non-frozen layers given one upstream gradient per head."""
    if not tape:
        raise RuntimeError("backward called without a forward tape")
    net = tape.net
    frozen = set(frozen)
    heads = net.heads
    if len(loss_grads) != len(heads):
        raise ValueError(f"expected {len(heads)} head gradients, got {len(loss_grads)}")

    requires = {INPUT: wrt_input}
    for node in net.nodes:
        trainable = bool(node.layer.params) and node.name not in frozen
        requires[node.name] = trainable or any(requires[s] for s in node.inputs)

    pending: dict[str, np.ndarray] = {}
    for head, g in zip(heads, loss_grads):
        if g is None:
            continue
        out = tape.value(head)
        if g.shape != out.shape:
            raise ShapeError(f"gradient for head {head!r} has shape {g.shape}, expected {out.shape}")
        pending[head] = pending[head] + g if head in pending else g

    grads = GradientSet()
    for entry in reversed(tape):
        g = pending.pop(entry.name, None)
        if g is None or not requires[entry.name]:
            continue
        layer = net.node(entry.name).layer
        need_in = any(requires[s] for s in entry.inputs)
        g_inputs, g_params = layer.backward(entry.cache, g, need_in)
        if layer.params and entry.name not in frozen:
            for field_name, value in g_params.items():
                grads[f"{entry.name}.{field_name}"] = value
        for src, gi in zip(entry.inputs, g_inputs):
            if gi is None or not requires[src]:
                continue
            pending[src] = pending[src] + gi if src in pending else gi
    if wrt_input:
        grads.input_grad = pending.get(INPUT, np.zeros_like(tape.input))
    return grads


def network_loss(net: NetworkGraph, logits: list, labels, denom: int | None = None,
                 aux_weight: float | None = None):
    """Main cross-entropy plus weighted auxiliary cross-entropies.

    ``aux_weight`` overrides the per-head weights stored on the graph.
    Returns (total loss, main-head probabilities, per-head logit gradients).
    """
    aux = net.aux_heads.values() if aux_weight is None else [aux_weight] * len(net.aux_heads)
    weights = [1.0] + list(aux)
    total = 0.0
    grads = []
    probs = None
    for w, z in zip(weights, logits):
        p, loss, g = softmax_xent(z, labels, denom)
        if probs is None:
            probs = p
        total += w * loss
        grads.append(g if w == 1.0 else g * z.dtype.type(w))
    return total, probs, grads


def _kink_signature(tape: Tape) -> list:
    sig = []
    for entry in tape:
        layer = tape.net.node(entry.name).layer
        if isinstance(layer, (Conv2D, Dense)) and layer.activation == "relu":
            sig.append(entry.output > 0)
        elif isinstance(layer, Pool2D) and layer.mode == "max":
            sig.append(entry.cache[1])
    return sig


def _same_signature(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


@dataclass
class GradCheckReport:
    max_relative_error: float
    worst_param: str | None
    checked: int
    skipped: int


def gradient_check(net: NetworkGraph, x, labels, epsilon: float = 1e-5, mode: str = "train",
                   key: tuple = (0,), skip_kinks: bool = True, loss_fn=None) -> GradCheckReport:
    """Central-difference check of ``backward`` against the scalar network loss.

    ``loss_fn(logits) -> (loss, head_grads)`` replaces the default softmax
    cross-entropy against ``labels``.

    Perturbations that flip a ReLU mask or a max-pool winner are skipped when
    ``skip_kinks`` is set, since the loss is not differentiable across them.
    """
    dtypes = {p.dtype for _, p in net.parameters()} | {x.dtype}
    if dtypes != {np.dtype(np.float64)}:
        raise TypeError("gradient checks require a 64-bit network and input")

    def run():
        logits, tape = forward(net, x, mode, key)
        if loss_fn is not None:
            loss, grads = loss_fn(logits)
        else:
            loss, _, grads = network_loss(net, logits, labels)
        return loss, tape, grads

    _, tape, head_grads = run()
    base_sig = _kink_signature(tape)
    analytic = backward(tape, head_grads)

    worst, worst_name, checked, skipped = 0.0, None, 0, 0
    for name, p in list(net.parameters()):
        a = analytic[name]
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + epsilon
            plus, tape_p, _ = run()
            p[idx] = orig - epsilon
            minus, tape_m, _ = run()
            p[idx] = orig
            if skip_kinks and not (_same_signature(base_sig, _kink_signature(tape_p))
                                   and _same_signature(base_sig, _kink_signature(tape_m))):
                skipped += 1
                continue
            numeric = (plus - minus) / (2 * epsilon)
            err = abs(a[idx] - numeric) / max(abs(a[idx]), abs(numeric), 1e-12)
            checked += 1
            if err > worst:
                worst, worst_name = err, f"{name}{list(idx)}"
    return GradCheckReport(worst, worst_name, checked, skipped)


def check_gradients(net: NetworkGraph, x, labels, epsilon: float = 1e-5, **kwargs) -> float:
    """Max relative error between analytic and central-difference parameter gradients."""
    return gradient_check(net, x, labels, epsilon, **kwargs).max_relative_error
