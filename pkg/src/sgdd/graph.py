"""Graph containers, Laplacians, SBM generation, sampling and the JSON format."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import InputError, ParseError
from .seeding import substream

GRAPH_SUFFIX = ".graph.json"
MASK_NAMES = ("train", "val", "test")


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Graph:
    """Node-classified graph ``(A, X, Y)`` with train/val/test masks.

    Arrays are stored read-only; build new graphs instead of mutating.
    """

    adjacency: sp.csr_matrix
    features: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    num_classes: int

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def masks(self) -> dict[str, np.ndarray]:
        return {"train": self.train_mask, "val": self.val_mask, "test": self.test_mask}

    def dense_adjacency(self) -> np.ndarray:
        return self.adjacency.toarray()

    def edge_list(self) -> list[tuple[int, int]]:
        upper = sp.triu(self.adjacency, k=1).tocoo()
        order = np.lexsort((upper.col, upper.row))
        return [(int(upper.row[k]), int(upper.col[k])) for k in order]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.adjacency.shape == other.adjacency.shape
            and (self.adjacency != other.adjacency).nnz == 0
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and all(np.array_equal(self.masks[k], other.masks[k]) for k in MASK_NAMES)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class CondensedGraph:
    """Synthetic graph ``(A', X', Y')`` with weighted dense adjacency."""

    adjacency: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    ratio: float

    def __post_init__(self):
        check_condensed_adjacency(self.adjacency)
        if self.features.shape[0] != self.adjacency.shape[0]:
            raise InputError(
                f"features have {self.features.shape[0]} rows, adjacency is {self.adjacency.shape}"
            )
        if self.labels.shape != (self.adjacency.shape[0],):
            raise InputError(f"labels shape {self.labels.shape} does not match adjacency")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InputError("condensed label outside [0, num_classes)")
        for name in ("adjacency", "features", "labels"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    @property
    def n_prime(self) -> int:
        return self.adjacency.shape[0]

    @property
    def n(self) -> int:
        return self.n_prime

    def dense_adjacency(self) -> np.ndarray:
        return np.asarray(self.adjacency)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CondensedGraph):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.ratio == other.ratio
            and np.array_equal(self.adjacency, other.adjacency)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None  # type: ignore[assignment]


def check_condensed_adjacency(adj: np.ndarray, atol: float = 0.0) -> None:
    """Raise InputError unless ``adj`` is square, symmetric, zero-diagonal, in [0, 1]."""
    adj = np.asarray(adj)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise InputError(f"adjacency must be square, got shape {adj.shape}")
    if not np.all(np.isfinite(adj)):
        raise InputError("adjacency has non-finite entries")
    if np.max(np.abs(adj - adj.T), initial=0.0) > atol:
        raise InputError("adjacency is not symmetric")
    if np.any(np.diag(adj) != 0):
        raise InputError("adjacency diagonal must be zero")
    if adj.size and (adj.min() < -atol or adj.max() > 1 + atol):
        raise InputError("adjacency entries must lie in [0, 1]")


@dataclass(frozen=True)
class SbmSpec:
    n: int
    c: int
    p: float
    q: float
    seed: int = 0

    def validate(self) -> None:
        if self.c < 1 or self.n < self.c:
            raise InputError(f"SBM needs 1 <= c <= n, got n={self.n}, c={self.c}")
        if not (0.0 <= self.q < self.p <= 1.0):
            raise InputError(f"SBM needs 0 <= q < p <= 1, got p={self.p}, q={self.q}")

    def block_sizes(self) -> list[int]:
        base = self.n // self.c
        sizes = [base] * self.c
        sizes[-1] += self.n - base * self.c
        return sizes


def build_graph(
    edges: Iterable[Sequence[int]],
    features,
    labels,
    masks: Mapping[str, Sequence[bool]] | Sequence[Sequence[bool]],
    num_classes: int | None = None,
) -> Graph:
    """Build a Graph from an undirected edge list.

    Pairs are symmetrized and deduplicated. Self-loops and out-of-range
    indices raise InputError.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise InputError(f"features must be a 2-D matrix, got shape {features.shape}")
    n = features.shape[0]
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise InputError(f"labels must have length {n}, got shape {labels.shape}")
    if labels.size and not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise InputError("labels must be integers")
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if n else 0
    if n and (labels.min() < 0 or labels.max() >= num_classes):
        raise InputError(f"label outside [0, {num_classes})")

    edge_arr = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
    if edge_arr.size:
        if edge_arr.min() < 0 or edge_arr.max() >= n:
            bad = edge_arr[(edge_arr < 0).any(axis=1) | (edge_arr >= n).any(axis=1)][0]
            raise InputError(f"edge ({bad[0]}, {bad[1]}) out of range for {n} nodes")
        loops = edge_arr[:, 0] == edge_arr[:, 1]
        if loops.any():
            i = int(edge_arr[loops][0, 0])
            raise InputError(f"self-loop ({i}, {i}) is not allowed")
    lo = np.minimum(edge_arr[:, 0], edge_arr[:, 1])
    hi = np.maximum(edge_arr[:, 0], edge_arr[:, 1])
    pairs = np.unique(np.stack([lo, hi], axis=1), axis=0) if edge_arr.size else edge_arr
    rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
    adj = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    adj.sort_indices()

    if isinstance(masks, Mapping):
        mask_list = [masks.get(k, np.zeros(n, bool)) for k in MASK_NAMES]
    else:
        mask_list = list(masks)
        if len(mask_list) != 3:
            raise InputError("expected three masks (train, val, test)")
    mask_arrs = []
    for name, m in zip(MASK_NAMES, mask_list):
        m = np.asarray(m, dtype=bool)
        if m.shape != (n,):
            raise InputError(f"{name} mask must have length {n}")
        mask_arrs.append(_frozen(m))
    overlap = (
        (mask_arrs[0] & mask_arrs[1]) | (mask_arrs[0] & mask_arrs[2]) | (mask_arrs[1] & mask_arrs[2])
    )
    if overlap.any():
        raise InputError(f"masks overlap at node {int(np.flatnonzero(overlap)[0])}")

    adj.data.flags.writeable = False
    return Graph(adj, _frozen(features), _frozen(labels), *mask_arrs, int(num_classes))


def _dense(g) -> np.ndarray:
    if isinstance(g, (Graph, CondensedGraph)):
        return g.dense_adjacency()
    if sp.issparse(g):
        return g.toarray()
    return np.asarray(g, dtype=np.float64)


def normalized_laplacian(g) -> np.ndarray:
    """``I - D^-1/2 A D^-1/2``; isolated nodes get a zero row/column and diagonal 1."""
    adj = _dense(g)
    if adj.shape[0] == 0:
        raise InputError("graph is empty")
    deg = adj.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    lap = np.eye(adj.shape[0]) - inv_sqrt[:, None] * adj * inv_sqrt[None, :]
    return 0.5 * (lap + lap.T)


def combinatorial_laplacian(g) -> np.ndarray:
    """``D - A``."""
    adj = _dense(g)
    if adj.shape[0] == 0:
        raise InputError("graph is empty")
    return np.diag(adj.sum(axis=1)) - adj


def stratified_split(labels: np.ndarray, rng: np.random.Generator, fractions=(0.6, 0.2, 0.2)):
    """Per-class shuffled split into three disjoint boolean masks."""
    n = labels.shape[0]
    masks = [np.zeros(n, bool) for _ in fractions]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        n_train = int(round(fractions[0] * idx.size))
        n_val = int(round(fractions[1] * idx.size))
        masks[0][idx[:n_train]] = True
        masks[1][idx[n_train : n_train + n_val]] = True
        masks[2][idx[n_train + n_val :]] = True
    return masks


SBM_NOISE_DIMS = 8


def sbm_generate(spec: SbmSpec) -> Graph:
    """Sample an undirected stochastic block model graph.

    Block index is the node label. Features are the one-hot block indicator
    followed by ``SBM_NOISE_DIMS`` standard-normal columns. Masks are a seeded
    60/20/20 stratified split.
    """
    spec.validate()
    labels = np.repeat(np.arange(spec.c), spec.block_sizes())
    same = labels[:, None] == labels[None, :]
    prob = np.where(same, spec.p, spec.q)
    draws = substream(spec.seed, "graph-gen:edges").random((spec.n, spec.n))
    upper = np.triu(draws < prob, k=1)
    rows, cols = np.nonzero(upper)

    onehot = np.eye(spec.c)[labels]
    noise = substream(spec.seed, "graph-gen:features").standard_normal((spec.n, SBM_NOISE_DIMS))
    features = np.hstack([onehot, noise])
    masks = stratified_split(labels, substream(spec.seed, "graph-gen:split"))
    return build_graph(zip(rows, cols), features, labels, masks, num_classes=spec.c)


def sample_subgraph(g: Graph, k: int, seed: int) -> Graph:
    """Induced subgraph on ``k`` nodes drawn uniformly without replacement.

    Selected nodes keep their original relative order.
    """
    if not 1 <= k <= g.n:
        raise InputError(f"sample size {k} must be in [1, {g.n}]")
    idx = np.sort(substream(seed, "sample-subgraph").choice(g.n, size=k, replace=False))
    return induced_subgraph(g, idx)


def induced_subgraph(g: Graph, idx: np.ndarray) -> Graph:
    idx = np.asarray(idx, dtype=np.int64)
    sub = g.adjacency[idx][:, idx].tocoo()
    keep = sub.row < sub.col
    return build_graph(
        zip(sub.row[keep], sub.col[keep]),
        g.features[idx],
        g.labels[idx],
        [m[idx] for m in (g.train_mask, g.val_mask, g.test_mask)],
        num_classes=g.num_classes,
    )


# --- JSON format -------------------------------------------------------------


def _fmt(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise InputError(f"cannot serialize non-finite value {x}")
    return format(x, ".17g")


def _float_rows(mat: np.ndarray) -> str:
    return "[" + ",".join("[" + ",".join(_fmt(v) for v in row) + "]" for row in mat) + "]"


def _int_list(values) -> str:
    return "[" + ",".join(str(int(v)) for v in values) + "]"


def dumps_graph(g: Graph | CondensedGraph) -> str:
    """Serialize to the canonical JSON text (17 significant digits for floats)."""
    parts = [f'"n":{g.n}', f'"num_classes":{g.num_classes}']
    if isinstance(g, CondensedGraph):
        adj = g.adjacency
        iu, ju = np.nonzero(np.triu(adj, k=1))
        parts.insert(0, '"kind":"condensed"')
        parts.append(f'"ratio":{_fmt(g.ratio)}')
        parts.append('"edges":[' + ",".join(f"[{i},{j}]" for i, j in zip(iu, ju)) + "]")
        parts.append('"weights":[' + ",".join(_fmt(adj[i, j]) for i, j in zip(iu, ju)) + "]")
        masks = {"train": np.ones(g.n, bool), "val": np.zeros(g.n, bool), "test": np.zeros(g.n, bool)}
    else:
        parts.append('"edges":[' + ",".join(f"[{i},{j}]" for i, j in g.edge_list()) + "]")
        masks = g.masks
    parts.append('"features":' + _float_rows(g.features))
    parts.append('"labels":' + _int_list(g.labels))
    mask_txt = ",".join(f'"{k}":' + _int_list(np.flatnonzero(masks[k])) for k in MASK_NAMES)
    parts.append('"masks":{' + mask_txt + "}")
    return "{" + ",\n".join(parts) + "}\n"


def save_graph(g: Graph | CondensedGraph, path) -> Path:
    path = Path(path)
    path.write_text(dumps_graph(g), encoding="utf-8")
    return path


def _field(doc: dict, name: str, kind):
    if name not in doc:
        raise ParseError(f"missing field '{name}'")
    value = doc[name]
    if not isinstance(value, kind):
        raise ParseError(f"field '{name}' has type {type(value).__name__}")
    return value


def loads_graph(text: str, source: str = "<string>") -> Graph | CondensedGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{source}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ParseError(f"{source}: top level must be an object")
    try:
        n = _field(doc, "n", int)
        num_classes = _field(doc, "num_classes", int)
        edges = _field(doc, "edges", list)
        feats = _field(doc, "features", list)
        labels = _field(doc, "labels", list)
        masks_doc = _field(doc, "masks", dict)
        for pos, e in enumerate(edges):
            if not (isinstance(e, list) and len(e) == 2 and all(isinstance(v, int) for v in e)):
                raise ParseError(f"field 'edges[{pos}]' must be a pair of integers")
        try:
            features = np.asarray(feats, dtype=np.float64)
        except (TypeError, ValueError):
            raise ParseError("field 'features' must be a rectangular numeric matrix") from None
        if features.ndim != 2 or features.shape[0] != n:
            raise ParseError(f"field 'features' must have {n} rows")
        if len(labels) != n:
            raise ParseError(f"field 'labels' must have {n} entries")
        masks = {}
        for k in MASK_NAMES:
            idx = np.asarray(_field(masks_doc, k, list), dtype=np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise ParseError(f"field 'masks.{k}' has an out-of-range node index")
            m = np.zeros(n, bool)
            m[idx] = True
            masks[k] = m
    except ParseError as exc:
        raise ParseError(f"{source}: {exc}") from None

    if doc.get("kind") == "condensed":
        weights = doc.get("weights", [1.0] * len(edges))
        if len(weights) != len(edges):
            raise ParseError(f"{source}: field 'weights' must match 'edges' in length")
        if any(not (0 <= i < n and 0 <= j < n) for i, j in edges):
            raise ParseError(f"{source}: field 'edges' has an out-of-range node index")
        adj = np.zeros((n, n))
        for (i, j), w in zip(edges, weights):
            adj[i, j] = adj[j, i] = float(w)
        ratio = doc.get("ratio")
        if not isinstance(ratio, (int, float)):
            raise ParseError(f"{source}: field 'ratio' must be a number")
        try:
            return CondensedGraph(adj, features, np.asarray(labels, np.int64), num_classes, float(ratio))
        except InputError as exc:
            raise ParseError(f"{source}: {exc}") from None

    if any(i > j for i, j in edges):
        warnings.warn(
            f"{source}: edge list is not in canonical i<j form; symmetrizing",
            stacklevel=2,
        )
    try:
        return build_graph(edges, features, labels, masks, num_classes=num_classes)
    except InputError as exc:
        raise ParseError(f"{source}: {exc}") from None


def load_graph(path) -> Graph | CondensedGraph:
    path = Path(path)
    return loads_graph(path.read_text(encoding="utf-8"), source=str(path))
