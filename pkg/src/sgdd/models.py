"""GNN models (GCN, SGC, MLP, Cheby), the conditional SIREN structure generator
and the classification loss, all built on :mod:`sgdd.autodiff`."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InputError, ParseError

ARCHITECTURES = ("gcn", "sgc", "mlp", "cheby")
SGC_HOPS = 2
CHEBY_ORDER = 2


@dataclass
class GnnParams:
    arch: str
    tensors: dict[str, Tensor]
    hidden: int
    layers: int = 2
    hops: int = 0

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_gnn(arch: str, in_dim: int, n_classes: int, hidden: int = 128, rng=None) -> GnnParams:
    """Glorot-initialized weights, zero biases, all requiring gradients."""
    if arch not in ARCHITECTURES:
        raise InputError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
    rng = rng if rng is not None else np.random.default_rng(0)
    t = {}
    if arch == "sgc":
        t["W"] = Tensor(_glorot(rng, in_dim, n_classes), requires_grad=True)
        t["b"] = Tensor(np.zeros((1, n_classes)), requires_grad=True)
        return GnnParams(arch, t, hidden=0, layers=1, hops=SGC_HOPS)
    if arch == "cheby":
        for layer, (fi, fo) in enumerate([(in_dim, hidden), (hidden, n_classes)], start=1):
            for k in range(CHEBY_ORDER + 1):
                t[f"W{layer}_{k}"] = Tensor(_glorot(rng, fi, fo), requires_grad=True)
            t[f"b{layer}"] = Tensor(np.zeros((1, fo)), requires_grad=True)
        return GnnParams(arch, t, hidden=hidden, layers=2, hops=CHEBY_ORDER)
    t["W1"] = Tensor(_glorot(rng, in_dim, hidden), requires_grad=True)
    t["b1"] = Tensor(np.zeros((1, hidden)), requires_grad=True)
    t["W2"] = Tensor(_glorot(rng, hidden, n_classes), requires_grad=True)
    t["b2"] = Tensor(np.zeros((1, n_classes)), requires_grad=True)
    return GnnParams(arch, t, hidden=hidden, layers=2)


# --- graph operators ---------------------------------------------------------


def _adjacency_tensor(adj) -> Tensor:
    if isinstance(adj, Tensor):
        return adj
    if hasattr(adj, "dense_adjacency"):
        return Tensor(adj.dense_adjacency())
    if sp.issparse(adj):
        return Tensor(adj.toarray())
    return Tensor(np.asarray(adj, dtype=np.float64))


def _sym_scale(adj: Tensor, deg: Tensor) -> Tensor:
    """``D^-1/2 adj D^-1/2`` with zero scaling for zero-degree rows."""
    nonzero = (deg.data > 0).astype(np.float64)
    inv_sqrt = ad.div(nonzero, ad.sqrt(ad.add(deg, 1.0 - nonzero)))
    return ad.mul(ad.mul(adj, inv_sqrt), ad.transpose(inv_sqrt))


def gcn_normalize(adj) -> Tensor:
    """Renormalized adjacency ``D^-1/2 (A + I) D^-1/2`` (degrees include the self-loop)."""
    a = _adjacency_tensor(adj)
    if a.rows != a.cols:
        raise InputError(f"adjacency must be square, got {a.shape}")
    a_hat = ad.add(a, np.eye(a.rows))
    return _sym_scale(a_hat, ad.sum_(a_hat, axis=1))


def scaled_laplacian(adj) -> Tensor:
    """``L~ - I = -D^-1/2 A D^-1/2``: the normalized Laplacian shifted to spectrum [-1, 1]."""
    a = _adjacency_tensor(adj)
    return ad.scale(_sym_scale(a, ad.sum_(a, axis=1)), -1.0)


def _check_features(params: GnnParams, x: Tensor, first: str) -> None:
    w = params[first]
    if x.cols != w.rows:
        raise InputError(f"features have {x.cols} columns, {first} expects {w.rows} ({w.shape})")


def gcn_forward(params: GnnParams, adj, x, a_norm: Tensor | None = None) -> Tensor:
    """Two-layer GCN: ``Â relu(Â X W1 + b1) W2 + b2``."""
    x = ad.as_tensor(x)
    _check_features(params, x, "W1")
    a_norm = a_norm if a_norm is not None else gcn_normalize(adj)
    if a_norm.rows != x.rows:
        raise InputError(f"adjacency {a_norm.shape} does not match features {x.shape}")
    h = ad.relu(ad.add(ad.matmul(a_norm, ad.matmul(x, params["W1"])), params["b1"]))
    return ad.add(ad.matmul(a_norm, ad.matmul(h, params["W2"])), params["b2"])


def sgc_forward(params: GnnParams, adj, x, a_norm: Tensor | None = None) -> Tensor:
    """``Â^k X W + b`` with no nonlinearity."""
    x = ad.as_tensor(x)
    _check_features(params, x, "W")
    a_norm = a_norm if a_norm is not None else gcn_normalize(adj)
    h = x
    for _ in range(params.hops):
        h = ad.matmul(a_norm, h)
    return ad.add(ad.matmul(h, params["W"]), params["b"])


def mlp_forward(params: GnnParams, x) -> Tensor:
    x = ad.as_tensor(x)
    _check_features(params, x, "W1")
    h = ad.relu(ad.add(ad.matmul(x, params["W1"]), params["b1"]))
    return ad.add(ad.matmul(h, params["W2"]), params["b2"])


def _cheby_layer(params: GnnParams, layer: int, lhat: Tensor, x: Tensor) -> Tensor:
    t_prev, t_cur = x, ad.matmul(lhat, x)
    out = ad.matmul(t_prev, params[f"W{layer}_0"])
    out = ad.add(out, ad.matmul(t_cur, params[f"W{layer}_1"]))
    for k in range(2, CHEBY_ORDER + 1):
        t_prev, t_cur = t_cur, ad.sub(ad.scale(ad.matmul(lhat, t_cur), 2.0), t_prev)
        out = ad.add(out, ad.matmul(t_cur, params[f"W{layer}_{k}"]))
    return ad.add(out, params[f"b{layer}"])


def cheby_forward(params: GnnParams, adj, x, lhat: Tensor | None = None) -> Tensor:
    """Two-layer Chebyshev network over ``T_0..T_2`` of ``L~ - I``."""
    x = ad.as_tensor(x)
    _check_features(params, x, "W1_0")
    lhat = lhat if lhat is not None else scaled_laplacian(adj)
    h = ad.relu(_cheby_layer(params, 1, lhat, x))
    return _cheby_layer(params, 2, lhat, h)


def graph_operator(arch: str, adj) -> Tensor | None:
    """The propagation matrix an architecture needs, for reuse across calls."""
    if arch in ("gcn", "sgc"):
        return gcn_normalize(adj)
    if arch == "cheby":
        return scaled_laplacian(adj)
    if arch == "mlp":
        return None
    raise InputError(f"unknown architecture {arch!r}")


def gnn_forward(params: GnnParams, adj, x, op: Tensor | None = None) -> Tensor:
    """Dispatch on ``params.arch``; ``op`` is an optional precomputed graph operator."""
    if params.arch == "gcn":
        return gcn_forward(params, adj, x, a_norm=op)
    if params.arch == "sgc":
        return sgc_forward(params, adj, x, a_norm=op)
    if params.arch == "cheby":
        return cheby_forward(params, adj, x, lhat=op)
    if params.arch == "mlp":
        return mlp_forward(params, x)
    raise InputError(f"unknown architecture {params.arch!r}")


def cross_entropy(logits, labels, mask=None) -> Tensor:
    """Mean negative log-likelihood of the true class over masked rows."""
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise InputError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    mask = np.ones(n, bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise InputError("cross_entropy: mask selects no nodes")
    target = np.zeros((n, c))
    rows = np.flatnonzero(mask)
    target[rows, labels[rows]] = 1.0 / count
    return ad.scale(ad.sum_(ad.mul(ad.log_softmax(logits), target)), -1.0)


def accuracy(logits: np.ndarray, labels: np.ndarray, mask=None) -> float:
    pred = np.asarray(logits).argmax(axis=1)
    mask = np.ones(pred.shape[0], bool) if mask is None else np.asarray(mask, bool)
    if not mask.any():
        raise InputError("accuracy: mask selects no nodes")
    return float(np.mean(pred[mask] == np.asarray(labels)[mask]))


# --- structure generator -----------------------------------------------------

PE_FEATURES = 16
SIREN_OMEGA0 = 30.0


@dataclass
class GenParams:
    """Conditional SIREN generator parameters.

    ``freq`` (2 x PE_FEATURES) is fixed at init; everything in ``tensors`` is
    trainable. Layer ``k`` owns ``W{k}``/``b{k}`` (sinusoidal branch) and
    ``Ci{k}``/``Cj{k}``/``cb{k}`` (conditional branch for the two endpoints);
    ``Wout``/``bout`` map to the edge probability.
    """

    freq: np.ndarray
    tensors: dict[str, Tensor]
    layers: int
    hidden: int
    cond_width: int
    cond_dim: int
    n_classes: int = 0

    def __post_init__(self):
        self.freq = np.array(self.freq, dtype=np.float64)
        self.freq.flags.writeable = False

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]


def init_gen(
    feature_dim: int,
    n_classes: int,
    rng: np.random.Generator,
    layers: int = 2,
    hidden: int = 64,
    cond_width: int = 64,
    omega0: float = SIREN_OMEGA0,
) -> GenParams:
    """SIREN-style init: the first sinusoidal layer is scaled by ``omega0``."""
    if layers < 1:
        raise InputError("generator needs at least one layer")
    cond_dim = feature_dim + n_classes
    freq = rng.standard_normal((2, PE_FEATURES))
    t = {}
    in_dim = 2 * PE_FEATURES
    for k in range(1, layers + 1):
        if k == 1:
            w = omega0 * rng.uniform(-1.0 / in_dim, 1.0 / in_dim, size=(in_dim, hidden))
        else:
            bound = math.sqrt(6.0 / in_dim)
            w = rng.uniform(-bound, bound, size=(in_dim, hidden))
        t[f"W{k}"] = Tensor(w, requires_grad=True)
        t[f"b{k}"] = Tensor(rng.uniform(-1.0 / math.sqrt(in_dim), 1.0 / math.sqrt(in_dim), (1, hidden)), requires_grad=True)
        cb = math.sqrt(6.0 / (2 * cond_dim + cond_width))
        t[f"Ci{k}"] = Tensor(rng.uniform(-cb, cb, (cond_dim, cond_width)), requires_grad=True)
        t[f"Cj{k}"] = Tensor(rng.uniform(-cb, cb, (cond_dim, cond_width)), requires_grad=True)
        t[f"cb{k}"] = Tensor(np.zeros((1, cond_width)), requires_grad=True)
        in_dim = hidden + cond_width
    bound = math.sqrt(6.0 / in_dim) / omega0
    t["Wout"] = Tensor(rng.uniform(-bound, bound, (in_dim, 1)), requires_grad=True)
    t["bout"] = Tensor(np.zeros((1, 1)), requires_grad=True)
    return GenParams(freq, t, layers, hidden, cond_width, cond_dim, n_classes)


def sample_coordinates(n_prime: int, rng: np.random.Generator) -> np.ndarray:
    """Latent node coordinates, uniform on [0, 1]."""
    return rng.uniform(0.0, 1.0, size=n_prime)


def positional_encoding(coords: np.ndarray, freq: np.ndarray) -> np.ndarray:
    """Random Fourier features of every ordered pair ``(v_i, v_j)``, row ``i*n + j``."""
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    pairs = np.stack([np.repeat(coords, n), np.tile(coords, n)], axis=1)
    proj = 2.0 * np.pi * pairs @ freq
    return np.hstack([np.sin(proj), np.cos(proj)])


def gen_forward(phi: GenParams, coords, x_syn, y_syn) -> Tensor:
    """Dense N'xN' edge-probability matrix: symmetric, zero diagonal, entries in (0, 1)."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1)
    x_syn = ad.as_tensor(x_syn)
    y_syn = np.asarray(y_syn, dtype=np.int64)
    n = coords.shape[0]
    if x_syn.rows != n or y_syn.shape != (n,):
        raise InputError(
            f"coords ({n}), features {x_syn.shape} and labels {y_syn.shape} disagree on N'"
        )
    if x_syn.cols + phi.n_classes != phi.cond_dim:
        raise InputError(
            f"features have {x_syn.cols} columns; generator expects {phi.cond_dim - phi.n_classes}"
        )
    if y_syn.size and (y_syn.min() < 0 or y_syn.max() >= phi.n_classes):
        raise InputError("condensed label outside the generator's class range")
    cond = ad.concat_cols([x_syn, np.eye(phi.n_classes)[y_syn]])
    rows_i = np.repeat(np.arange(n), n)
    rows_j = np.tile(np.arange(n), n)

    h = Tensor(positional_encoding(coords, phi.freq))
    for k in range(1, phi.layers + 1):
        wave = ad.sin(ad.add(ad.matmul(h, phi[f"W{k}"]), phi[f"b{k}"]))
        ci = ad.index_rows(ad.matmul(cond, phi[f"Ci{k}"]), rows_i)
        cj = ad.index_rows(ad.matmul(cond, phi[f"Cj{k}"]), rows_j)
        cond_h = ad.relu(ad.add(ad.add(ci, cj), phi[f"cb{k}"]))
        h = ad.concat_cols([cond_h, wave])
    prob = ad.sigmoid(ad.add(ad.matmul(h, phi["Wout"]), phi["bout"]))
    square = ad.reshape(prob, (n, n))
    sym = ad.scale(ad.add(square, ad.transpose(square)), 0.5)
    return ad.mul(sym, 1.0 - np.eye(n))


# --- checkpoints -------------------------------------------------------------


def _tensor_doc(t: Tensor) -> dict:
    return {"shape": list(t.shape), "values": [float(v) for v in t.data.reshape(-1)]}


def params_to_json(params: GnnParams | GenParams) -> str:
    """Checkpoint: named tensors as ``{"shape": [r, c], "values": [...]}`` (row-major)."""
    named = {k: _tensor_doc(v) for k, v in params.tensors.items()}
    if isinstance(params, GenParams):
        meta = {
            "kind": "gen",
            "layers": params.layers,
            "hidden": params.hidden,
            "cond_width": params.cond_width,
            "cond_dim": params.cond_dim,
            "n_classes": params.n_classes,
        }
        named["freq"] = _tensor_doc(Tensor(params.freq))
    else:
        meta = {"kind": "gnn", "arch": params.arch, "hidden": params.hidden,
                "layers": params.layers, "hops": params.hops}
    return json.dumps({"meta": meta, "tensors": named}, indent=1)


def _tensor_from_doc(name: str, doc: dict) -> np.ndarray:
    try:
        r, c = doc["shape"]
        values = np.asarray(doc["values"], dtype=np.float64)
        return values.reshape(int(r), int(c))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"tensor '{name}': {exc}") from None


def params_from_json(text: str) -> GnnParams | GenParams:
    try:
        doc = json.loads(text)
        meta, named = doc["meta"], doc["tensors"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"bad checkpoint: {exc}") from None
    arrays = {k: _tensor_from_doc(k, v) for k, v in named.items()}
    if meta.get("kind") == "gen":
        freq = arrays.pop("freq")
        tensors = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        return GenParams(freq, tensors, meta["layers"], meta["hidden"], meta["cond_width"],
                         meta["cond_dim"], meta["n_classes"])
    tensors = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    return GnnParams(meta["arch"], tensors, meta["hidden"], meta["layers"], meta["hops"])


def save_params(params, path) -> None:
    Path(path).write_text(params_to_json(params), encoding="utf-8")


def load_params(path):
    return params_from_json(Path(path).read_text(encoding="utf-8"))
