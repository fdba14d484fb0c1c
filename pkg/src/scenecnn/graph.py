"""Static layer graph shared by the builders, the tape and the serializer."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .layers import Dense, Layer
from .tensor import ShapeError

INPUT = "input"


@dataclass
class Node:
    name: str
    layer: Layer
    inputs: tuple[str, ...]


class NetworkGraph:
    """Named layer nodes in topological order with one main head and optional auxiliary heads.

    ``input_shape`` is the per-sample (channels, height, width).  Heads are
    node names; ``aux_heads`` maps each auxiliary head to its loss weight.
    """

    def __init__(self, input_shape, family: str = "custom"):
        self.input_shape = tuple(int(n) for n in input_shape)
        self.family = family
        self.nodes: list[Node] = []
        self._index: dict[str, int] = {}
        self.main_head: str | None = None
        self.aux_heads: dict[str, float] = {}
        self.meta: dict = {}

    def add(self, name: str, layer: Layer, inputs=(INPUT,)) -> str:
        if name == INPUT or name in self._index:
            raise ValueError(f"duplicate node name {name!r}")
        if isinstance(inputs, str):
            inputs = (inputs,)
        for src in inputs:
            if src != INPUT and src not in self._index:
                raise ValueError(f"node {name!r} reads unknown node {src!r}")
        self._index[name] = len(self.nodes)
        self.nodes.append(Node(name, layer, tuple(inputs)))
        return name

    def node(self, name: str) -> Node:
        return self.nodes[self._index[name]]

    def index(self, name: str) -> int:
        return self._index[name]

    def __contains__(self, name: str) -> bool:
        return name in self._index

    @property
    def heads(self) -> list[str]:
        return [self.main_head] + list(self.aux_heads)

    @property
    def num_classes(self) -> int:
        return self.node(self.main_head).layer.out_units

    def shapes(self) -> dict[str, tuple]:
        """Per-sample output shape of every node; raises ShapeError naming the failing node."""
        out = {INPUT: self.input_shape}
        for node in self.nodes:
            try:
                out[node.name] = node.layer.output_shape([out[i] for i in node.inputs])
            except ShapeError as exc:
                raise ShapeError(f"{node.name}: {exc}") from None
        return out

    def validate(self) -> None:
        if self.main_head is None:
            raise ValueError("graph has no main head")
        if self.aux_heads and self.family in ("caffenet", "linear"):
            raise ValueError(f"auxiliary heads are only allowed on inception-style graphs, not {self.family}")
        shapes = self.shapes()
        for head in self.heads:
            layer = self.node(head).layer
            if not isinstance(layer, Dense):
                raise ValueError(f"head {head!r} is not a fully-connected layer")
            if shapes[head] != (self.num_classes,):
                raise ValueError(f"head {head!r} has {shapes[head]} outputs, expected {self.num_classes}")
        reached = {INPUT}
        for node in self.nodes:
            if all(i in reached for i in node.inputs):
                reached.add(node.name)
        missing = [n.name for n in self.nodes if n.name not in reached]
        if missing:
            raise ValueError(f"nodes not reachable from input: {missing}")

    def parameters(self) -> Iterator[tuple[str, np.ndarray]]:
        """(qualified name, array) in topological then field order."""
        for node in self.nodes:
            for field_name, value in node.layer.params.items():
                yield f"{node.name}.{field_name}", value

    def param_layers(self) -> list[str]:
        return [n.name for n in self.nodes if n.layer.params]

    def get_param(self, qualified: str) -> np.ndarray:
        node, field_name = qualified.rsplit(".", 1)
        return self.node(node).layer.params[field_name]

    def set_param(self, qualified: str, value: np.ndarray) -> None:
        node, field_name = qualified.rsplit(".", 1)
        params = self.node(node).layer.params
        if params[field_name].shape != value.shape:
            raise ShapeError(f"{qualified}: expected shape {params[field_name].shape}, got {value.shape}")
        params[field_name] = value

    def param_count(self) -> int:
        return sum(p.size for _, p in self.parameters())

    @property
    def dtype(self):
        for _, p in self.parameters():
            return p.dtype
        return np.dtype(np.float32)

    def astype(self, dtype) -> "NetworkGraph":
        """Copy of the graph with every parameter cast to ``dtype``."""
        net = self.copy()
        for node in net.nodes:
            node.layer.astype(dtype)
        return net

    def copy(self) -> "NetworkGraph":
        return copy.deepcopy(self)

    def summary(self) -> str:
        shapes = self.shapes()
        lines = [f"{'node':<16}{'kind':<9}{'output':<18}params"]
        for node in self.nodes:
            n_params = sum(p.size for p in node.layer.params.values())
            lines.append(f"{node.name:<16}{node.layer.kind:<9}{str(shapes[node.name]):<18}{n_params}")
        return "\n".join(lines)
