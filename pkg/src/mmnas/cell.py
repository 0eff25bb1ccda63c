"""Continuous cell search space: softmax-mixed edges and node summation.

Source numbering inside a cell: 0 and 1 are the two cell inputs, 2 + m is
intermediate node m. Edge (i, j) feeds source i into node j.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .ops import OP_KINDS, apply_op
from .params import decode_arrays, encode_arrays, load_arrays, save_arrays
from .tensor import Tensor

CELL_TYPES = ("normal", "reduce")


def source_label(i: int) -> str:
    return f"input{i}" if i < 2 else f"n{i - 2}"


@dataclass(frozen=True)
class CellSpec:
    cell_type: str
    num_nodes: int = 4

    def __post_init__(self):
        if self.cell_type not in CELL_TYPES:
            raise ValueError(f"cell_type must be one of {CELL_TYPES}, got {self.cell_type!r}")
        if self.num_nodes < 1:
            raise ValueError("a cell needs at least one intermediate node")

    def incoming(self, j: int) -> list[int]:
        return list(range(j + 2))

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [(i, j) for j in range(self.num_nodes) for i in self.incoming(j)]


def edge_name(i: int, j: int) -> str:
    return f"edge_{i}_{j}"


def mixed_weights(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class AlphaTable:
    """Architecture logits, one vector per edge per cell type, shared by all cells of a type."""

    def __init__(self, num_nodes: int = 4, kinds: Sequence[str] = OP_KINDS):
        self.num_nodes = num_nodes
        self.kinds = tuple(kinds)
        self._t: dict[str, Tensor] = {}
        for ct in CELL_TYPES:
            for i, j in CellSpec(ct, num_nodes).edges:
                self._t[self.name(ct, i, j)] = Tensor(np.zeros(len(self.kinds)), requires_grad=True)

    @staticmethod
    def name(cell_type: str, i: int, j: int) -> str:
        return f"alpha/{cell_type}/{edge_name(i, j)}"

    def logits(self, cell_type: str, i: int, j: int) -> Tensor:
        return self._t[self.name(cell_type, i, j)]

    def items(self) -> list[tuple[str, Tensor]]:
        return [(n, self._t[n]) for n in sorted(self._t)]

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.items()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        if set(state) != set(self._t):
            raise ValueError("alpha snapshot does not match this table's edges")
        for n, arr in state.items():
            self._t[n].data = np.array(arr, dtype=np.float64).reshape(len(self.kinds))

    def weights(self, cell_type: str) -> dict[tuple[int, int], np.ndarray]:
        return {(i, j): mixed_weights(self.logits(cell_type, i, j).data)
                for i, j in CellSpec(cell_type, self.num_nodes).edges}

    def to_bytes(self) -> bytes:
        return encode_arrays(self.state())

    def save(self, path) -> None:
        save_arrays(self.state(), path)

    @classmethod
    def from_state(cls, state: Mapping[str, np.ndarray], kinds: Sequence[str] = OP_KINDS) -> "AlphaTable":
        normal = [n for n in state if n.startswith("alpha/normal/")]
        # edges per type = M(M+3)/2
        m = int(round((-3 + np.sqrt(9 + 8 * len(normal))) / 2))
        table = cls(m, kinds)
        table.load_state(state)
        return table

    @classmethod
    def load(cls, path) -> "AlphaTable":
        return cls.from_state(load_arrays(path))

    @classmethod
    def from_bytes(cls, blob: bytes) -> "AlphaTable":
        return cls.from_state(decode_arrays(blob))


def alpha_softmax(alpha: AlphaTable, cell_type: str, edge: tuple[int, int]) -> Tensor:
    """Recorded softmax of one edge's logits (mixing weights)."""
    i, j = edge
    if edge not in CellSpec(cell_type, alpha.num_nodes).edges:
        raise KeyError(f"no edge {edge} in a {cell_type} cell with {alpha.num_nodes} nodes")
    return T.softmax(alpha.logits(cell_type, i, j))


def mixed_op_forward(x: Tensor, weights: Tensor, op_params: Mapping[str, Mapping[str, Tensor]],
                     kinds: Sequence[str] = OP_KINDS) -> Tensor:
    """Weighted sum of every candidate op applied to x."""
    outs = [apply_op(k, x, op_params.get(k)) for k in kinds]
    return T.weighted_sum(outs, weights)


EdgeFn = Callable[[int, int, Tensor], "Tensor | None"]


def node_forward(j: int, states: Sequence[Tensor | None], edge_forward: EdgeFn) -> Tensor:
    """Node j = sum over its predecessors i of edge_forward(i, j, state_i).

    edge_forward may return None for an edge that is not part of the cell.
    """
    if len(states) < j + 2 or any(s is None for s in states[:j + 2]):
        raise ValueError(f"node {j}: missing predecessor output")
    terms = [edge_forward(i, j, states[i]) for i in range(j + 2)]
    terms = [t for t in terms if t is not None]
    if not terms:
        raise ValueError(f"node {j}: no incoming edges")
    return terms[0] if len(terms) == 1 else T.add_n(terms)


def cell_forward(spec: CellSpec, in0: Tensor, in1: Tensor, edge_forward: EdgeFn) -> Tensor:
    """Run all nodes in order and concatenate them along channels."""
    if in0.shape != in1.shape:
        raise T.ShapeError(f"cell inputs differ in shape: {in0.shape} vs {in1.shape}")
    states: list[Tensor] = [in0, in1]
    for j in range(spec.num_nodes):
        states.append(node_forward(j, states, edge_forward))
    nodes = states[2:]
    return nodes[0] if len(nodes) == 1 else T.concat(nodes, axis=1)
