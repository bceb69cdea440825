"""Linear graph propagation with layer-sum readout, plus the MXEMB matrix format."""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .dataset import NormalizedGraph

MAGIC = b"MXEMB"
_HEADER = struct.Struct("<5sQQ")


class ConfigurationError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class LayerStack:
    layers: tuple  # L + 1 arrays of shape (M + N, d); layers[0] is the input table

    @property
    def num_layers(self) -> int:
        return len(self.layers) - 1

    def dump(self, path) -> None:
        """Write all layers stacked vertically as one MXEMB matrix."""
        save_matrix(path, np.vstack(self.layers))


def propagate(graph: NormalizedGraph, table: np.ndarray, num_layers: int, counter: Counter | None = None,
              tag: str = "forward") -> LayerStack:
    """Apply the normalized adjacency ``num_layers`` times.

    When ``counter`` is given, ``counter[tag]`` is increased by the number of
    stored adjacency entries visited (two per undirected edge per layer).
    """
    if table.ndim != 2 or table.shape[0] != graph.num_nodes:
        raise ConfigurationError(
            f"embedding table has shape {table.shape}, graph has {graph.num_nodes} nodes"
        )
    if num_layers < 0:
        raise ConfigurationError("num_layers must be non-negative")
    adj = graph.adj.astype(table.dtype, copy=False)
    layers = [table]
    for _ in range(num_layers):
        layers.append(adj @ layers[-1])
        if counter is not None:
            counter[tag] += adj.nnz
    return LayerStack(tuple(layers))


def readout(stack: LayerStack, include_layer0: bool = False) -> np.ndarray:
    """Sum of propagated layers 1..L; with L = 0 the input table itself."""
    if stack.num_layers == 0:
        return stack.layers[0]
    out = stack.layers[1].copy()
    for layer in stack.layers[2:]:
        out += layer
    if include_layer0:
        out += stack.layers[0]
    return out


def encode(graph, table, num_layers, include_layer0=False, counter=None):
    return readout(propagate(graph, table, num_layers, counter), include_layer0)


def backpropagate(graph: NormalizedGraph, grad_final: np.ndarray, num_layers: int, include_layer0: bool = False,
                  counter: Counter | None = None) -> np.ndarray:
    """Gradient w.r.t. the input table given the gradient w.r.t. the readout.

    The adjacency is symmetric, so the transpose pass reuses it:
    ``sum_{l=1..L} A^l G`` evaluated Horner-style.
    """
    if num_layers == 0:
        return grad_final.copy()
    adj = graph.adj.astype(grad_final.dtype, copy=False)
    acc = grad_final
    for step in range(num_layers):
        acc = adj @ acc
        if counter is not None:
            counter["backward"] += adj.nnz
        if step < num_layers - 1:
            acc = acc + grad_final
    if include_layer0:
        acc = acc + grad_final
    return acc


def save_matrix(path, matrix: np.ndarray) -> None:
    matrix = np.ascontiguousarray(matrix, dtype="<f8")
    rows, cols = matrix.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, rows, cols))
        fh.write(matrix.tobytes(order="C"))


def load_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size or head[:5] != MAGIC:
            raise CheckpointError("bad checkpoint header")
        _, rows, cols = _HEADER.unpack(head)
        payload = fh.read()
    if len(payload) != rows * cols * 8:
        raise CheckpointError(f"checkpoint payload has {len(payload)} bytes, expected {rows * cols * 8}")
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(np.float64)
