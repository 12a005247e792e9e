"""Input checks shared by the estimator classes."""

import numpy as np
from sklearn.utils.validation import check_array

from .graph import Graph


def check_graph(graph) -> Graph:
    if not isinstance(graph, Graph):
        raise TypeError(f"graph must be a graphlang Graph, got {type(graph).__name__}")
    return graph


def check_node_ids(X, graph: Graph) -> np.ndarray:
    """Accept node ids as a 1-D sequence or an ``(n, 1)`` column; returns int64 ids."""
    arr = check_array(X, ensure_2d=False, dtype=None)
    if arr.ndim == 2:
        if arr.shape[1] != 1:
            raise ValueError(f"expected one node id per row, got shape {arr.shape}")
        arr = arr[:, 0]
    if arr.dtype.kind == "f":
        if not np.all(np.mod(arr, 1) == 0):
            raise ValueError("node ids must be integers")
    elif arr.dtype.kind not in "iu":
        raise ValueError(f"node ids must be integers, got dtype {arr.dtype}")
    ids = arr.astype(np.int64)
    bad = ids[(ids < 0) | (ids >= graph.node_count)]
    if bad.size:
        raise ValueError(f"node ids {bad[:5].tolist()} out of range [0, {graph.node_count})")
    return ids
