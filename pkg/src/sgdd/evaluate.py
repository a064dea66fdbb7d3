"""Evaluation of condensed graphs (train on S, test on G), cross-architecture
tables, coreset baselines and the metrics CSV."""

from __future__ import annotations

import contextlib
import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Adam, Tape, no_grad
from .condense import CondenseConfig, class_counts, condense
from .errors import InputError
from .graph import CondensedGraph, Graph
from .models import ARCHITECTURES, accuracy, cross_entropy, gnn_forward, graph_operator, init_gnn
from .seeding import substream

EVAL_EPOCHS = 1000
EVAL_LR = 0.001
EVAL_HIDDEN = 128
METRICS_COLUMNS = ("method", "condense_arch", "test_arch", "ratio", "seed", "accuracy", "sc", "wallclock_s")


@dataclass(frozen=True)
class EvalResult:
    arch: str
    seeds: tuple[int, ...]
    accuracies: tuple[float, ...]
    epochs: int
    lr: float

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))

    @property
    def accuracy(self) -> float:
        return self.mean


@dataclass
class CrossArchTable:
    """Cells keyed by ``(condense_arch, test_arch)``; row aggregates are the
    mean and (population) std of the cell means across test architectures."""

    cells: dict[tuple[str, str], EvalResult] = field(default_factory=dict)

    def rows(self) -> list[str]:
        return sorted({k[0] for k in self.cells})

    def row(self, condense_arch: str) -> dict[str, EvalResult]:
        return {t: r for (c, t), r in self.cells.items() if c == condense_arch}

    def avg(self, condense_arch: str) -> float:
        return float(np.mean([r.mean for r in self.row(condense_arch).values()]))

    def std(self, condense_arch: str) -> float:
        return float(np.std([r.mean for r in self.row(condense_arch).values()]))

    def to_dict(self) -> dict:
        out = {}
        for c in self.rows():
            out[c] = {
                "cells": {t: {"mean": r.mean, "std": r.std, "accuracies": list(r.accuracies)} for t, r in sorted(self.row(c).items())},
                "avg": self.avg(c),
                "std": self.std(c),
                "note": "std over the implemented architectures only",
            }
        return out


class LeakError(AssertionError):
    """The original graph was read while a model was being fitted."""


class LeakGuard:
    """Proxy around a Graph that refuses attribute access during fitting.

    Pass it to :func:`train_eval` in place of the graph; ``accesses`` records
    ``(phase, attribute)`` pairs.
    """

    def __init__(self, g: Graph):
        object.__setattr__(self, "_g", g)
        object.__setattr__(self, "_fitting", False)
        object.__setattr__(self, "accesses", [])

    @contextlib.contextmanager
    def fitting(self):
        object.__setattr__(self, "_fitting", True)
        try:
            yield
        finally:
            object.__setattr__(self, "_fitting", False)

    def __getattr__(self, name):
        phase = "fit" if self._fitting else "eval"
        self.accesses.append((phase, name))
        if self._fitting:
            raise LeakError(f"original graph attribute {name!r} read during fitting")
        return getattr(self._g, name)


def _fit(arch: str, s: CondensedGraph, epochs: int, lr: float, rng: np.random.Generator, hidden: int):
    params = init_gnn(arch, s.features.shape[1], s.num_classes, hidden, rng)
    op = graph_operator(arch, s.adjacency)
    opt = Adam(params.parameters(), lr=lr)
    x = s.features
    for _ in range(epochs):
        with Tape() as tape:
            loss = cross_entropy(gnn_forward(params, s.adjacency, x, op=op), s.labels)
            grads = tape.grad(loss, params.parameters())
        opt.step([gr.data for gr in grads])
    return params


def train_eval(
    arch: str,
    s: CondensedGraph,
    g: Graph | LeakGuard,
    epochs: int = EVAL_EPOCHS,
    lr: float = EVAL_LR,
    seeds: Sequence[int] = tuple(range(10)),
    hidden: int = EVAL_HIDDEN,
    root_seed: int = 0,
) -> EvalResult:
    """Train ``arch`` on all nodes of ``s`` and report accuracy on ``g``'s test mask.

    One run per seed; each seed draws its weights from the ``eval:<arch>:<seed>``
    sub-stream of ``root_seed``, so results do not depend on run order.
    """
    if arch not in ARCHITECTURES:
        raise InputError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
    if epochs < 0:
        raise InputError("epochs must be nonnegative")
    if not seeds:
        raise InputError("need at least one seed")
    guard = g if isinstance(g, LeakGuard) else None
    accs = []
    for seed in seeds:
        rng = substream(root_seed, f"eval:{arch}:{int(seed)}")
        with guard.fitting() if guard is not None else contextlib.nullcontext():
            params = _fit(arch, s, epochs, lr, rng, hidden)
        if g.features.shape[1] != s.features.shape[1]:
            raise InputError("condensed and original graphs have different feature widths")
        with no_grad():
            logits = gnn_forward(params, g.adjacency, g.features).data
        accs.append(accuracy(logits, g.labels, g.test_mask))
    return EvalResult(arch, tuple(int(x) for x in seeds), tuple(accs), epochs, lr)


def cross_architecture(
    s: CondensedGraph,
    g: Graph,
    test_archs: Sequence[str] = ARCHITECTURES,
    seeds: Sequence[int] = tuple(range(10)),
    condense_arch: str = "gcn",
    epochs: int = EVAL_EPOCHS,
    lr: float = EVAL_LR,
    root_seed: int = 0,
) -> CrossArchTable:
    table = CrossArchTable()
    for arch in test_archs:
        table.cells[(condense_arch, arch)] = train_eval(arch, s, g, epochs, lr, seeds, root_seed=root_seed)
    return table


# --- coreset baselines -------------------------------------------------------------


def _coreset_counts(g: Graph, r: float) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 < r <= 1.0:
        raise InputError(f"ratio must be in (0, 1], got {r}")
    n_prime = int(np.floor(r * g.n + 1e-9))
    if n_prime < 1:
        raise InputError(f"ratio {r} selects no nodes")
    train_idx = np.flatnonzero(g.train_mask)
    counts = class_counts(g.labels[train_idx], g.num_classes, n_prime)
    for c in range(g.num_classes):
        have = int(np.sum(g.labels[train_idx] == c))
        if counts[c] > have:
            raise InputError(f"class {c} needs {counts[c]} nodes but has {have} training nodes")
    return train_idx, counts


def _coreset_graph(g: Graph, idx: np.ndarray, r: float) -> CondensedGraph:
    idx = np.asarray(idx, dtype=np.int64)
    adj = g.adjacency[idx][:, idx].toarray()
    return CondensedGraph(adj, g.features[idx].astype(np.float64), g.labels[idx], g.num_classes, float(r))


def baseline_random(g: Graph, r: float, seed: int) -> CondensedGraph:
    """Uniform sample of training nodes per class; structure is the induced subgraph."""
    train_idx, counts = _coreset_counts(g, r)
    rng = substream(seed, "baseline:random")
    picks = []
    for c in range(g.num_classes):
        pool = train_idx[g.labels[train_idx] == c]
        picks.append(np.sort(rng.choice(pool, size=counts[c], replace=False)))
    return _coreset_graph(g, np.concatenate(picks), r)


def herding_select(x: np.ndarray, k: int) -> list[int]:
    """Greedy mean matching: each pick minimizes the distance between the mean
    of the selected rows and the mean of all rows."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=0)
    chosen: list[int] = []
    total = np.zeros_like(mu)
    avail = np.ones(x.shape[0], bool)
    for t in range(1, k + 1):
        cand = (total[None, :] + x) / t
        dist = np.linalg.norm(cand - mu[None, :], axis=1)
        dist[~avail] = np.inf
        i = int(np.argmin(dist))
        chosen.append(i)
        avail[i] = False
        total += x[i]
    return chosen


def kcenter_select(x: np.ndarray, k: int, rng: np.random.Generator | None = None) -> list[int]:
    """Greedy farthest-point selection, started from the row farthest from the mean.

    Ties are broken uniformly at random with ``rng`` (lowest index without it).
    """
    x = np.asarray(x, dtype=np.float64)

    def pick(scores):
        best = np.flatnonzero(scores == scores.max())
        return int(best[0] if rng is None or best.size == 1 else rng.choice(best))

    first = pick(np.linalg.norm(x - x.mean(axis=0), axis=1))
    chosen = [first]
    mind = np.linalg.norm(x - x[first], axis=1)
    while len(chosen) < k:
        scores = mind.copy()
        scores[chosen] = -np.inf
        i = pick(scores)
        chosen.append(i)
        mind = np.minimum(mind, np.linalg.norm(x - x[i], axis=1))
    return chosen


def baseline_herding(g: Graph, r: float) -> CondensedGraph:
    train_idx, counts = _coreset_counts(g, r)
    picks = []
    for c in range(g.num_classes):
        pool = train_idx[g.labels[train_idx] == c]
        picks.append(pool[herding_select(g.features[pool], counts[c])])
    return _coreset_graph(g, np.concatenate(picks), r)


def baseline_kcenter(g: Graph, r: float, seed: int) -> CondensedGraph:
    train_idx, counts = _coreset_counts(g, r)
    rng = substream(seed, "baseline:kcenter")
    picks = []
    for c in range(g.num_classes):
        pool = train_idx[g.labels[train_idx] == c]
        picks.append(pool[kcenter_select(g.features[pool], counts[c], rng)])
    return _coreset_graph(g, np.concatenate(picks), r)


def feature_similarity_config(cfg: CondenseConfig) -> CondenseConfig:
    """The condenser settings with the generator replaced by cosine similarity
    and both structure terms switched off."""
    return replace(cfg, structure="cosine", alpha=0.0, beta=0.0)


def baseline_feature_similarity(g: Graph, cfg: CondenseConfig):
    """Gradient matching on features with ``A' = relu(cos(X'))``, thresholded.

    Returns ``(CondensedGraph, CondenseReport)``.
    """
    return condense(g, feature_similarity_config(cfg))


BASELINES = ("random", "herding", "kcenter", "feature-similarity")


# --- metrics CSV ------------------------------------------------------------------


def _num(x) -> str:
    if x is None:
        return ""
    return format(float(x), ".17g")


def metrics_rows(
    method: str, condense_arch: str, ratio: float, sc: float | None, wallclock_s: float | None, results: Iterable[EvalResult]
) -> list[list[str]]:
    rows = []
    for res in results:
        for seed, acc in zip(res.seeds, res.accuracies):
            rows.append([method, condense_arch, res.arch, _num(ratio), str(seed), _num(acc), _num(sc), _num(wallclock_s)])
    return rows


def format_metrics(rows: Sequence[Sequence[str]], header: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if header:
        writer.writerow(METRICS_COLUMNS)
    writer.writerows(rows)
    return buf.getvalue()


def append_metrics_csv(path, rows: Sequence[Sequence[str]]) -> Path:
    """Append rows, writing the header first if the file is new or empty.

    An existing file must start with the expected header.
    """
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    if not fresh:
        with path.open(newline="") as fh:
            first = next(csv.reader(fh), None)
        if first is None or tuple(first) != METRICS_COLUMNS:
            raise InputError(f"{path}: not a metrics CSV (header {first!r})")
    with path.open("a", newline="") as fh:
        fh.write(format_metrics(rows, header=fresh))
    return path


def read_metrics_csv(path) -> list[dict[str, str]]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_COLUMNS:
            raise InputError(f"{path}: unexpected header {reader.fieldnames!r}")
        return list(reader)


def whole_graph_eval(
    arch: str,
    g: Graph,
    epochs: int = EVAL_EPOCHS,
    lr: float = EVAL_LR,
    seeds: Sequence[int] = tuple(range(10)),
    hidden: int = EVAL_HIDDEN,
    root_seed: int = 0,
) -> EvalResult:
    """Reference run: train on ``g``'s own training nodes, test on its test mask."""
    if arch not in ARCHITECTURES:
        raise InputError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
    op = graph_operator(arch, g.adjacency)
    accs = []
    for seed in seeds:
        params = init_gnn(arch, g.num_features, g.num_classes, hidden, substream(root_seed, f"eval:whole:{arch}:{int(seed)}"))
        opt = Adam(params.parameters(), lr=lr)
        for _ in range(epochs):
            with Tape() as tape:
                loss = cross_entropy(gnn_forward(params, g.adjacency, g.features, op=op), g.labels, g.train_mask)
                grads = tape.grad(loss, params.parameters())
            opt.step([gr.data for gr in grads])
        with no_grad():
            logits = gnn_forward(params, g.adjacency, g.features, op=op).data
        accs.append(accuracy(logits, g.labels, g.test_mask))
    return EvalResult(arch, tuple(int(x) for x in seeds), tuple(accs), epochs, lr)
