"""The bi-level condensation loop: gradient matching on features, OT matching on
structure, a sparsity penalty, and final thresholding of the generated graph."""

from __future__ import annotations

import time
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tape, Tensor
from .errors import InputError, NumericalError
from .graph import CondensedGraph, Graph, check_condensed_adjacency, sample_subgraph
from .models import (
    ARCHITECTURES,
    GnnParams,
    cross_entropy,
    gen_forward,
    gnn_forward,
    graph_operator,
    init_gen,
    init_gnn,
    sample_coordinates,
)
from .ot import OtConfig, condensed_pinv, got_objective, laplacian_pinv, optimize_plan
from .seeding import substream
from .spectral import shift_coefficient

STRUCTURES = ("generator", "cosine")
THRESHOLD = 0.5
INNER_LR = 0.01


@dataclass(frozen=True)
class CondenseConfig:
    ratio: float = 0.1
    alpha: float = 0.1
    beta: float = 0.1
    lr_feature: float = 1e-4
    lr_structure: float = 1e-3
    tau1: int = 10
    tau2: int = 5
    tau_theta: int = 3
    restarts: int = 3
    epochs: int = 200
    arch: str = "gcn"
    hidden: int = 128
    inner_lr: float = INNER_LR
    structure: str = "generator"
    debug: bool = False
    seed: int = 0
    ot: OtConfig = field(default_factory=OtConfig)

    def validate(self) -> "CondenseConfig":
        if not 0.0 < self.ratio < 1.0:
            raise InputError(f"ratio must be in (0, 1), got {self.ratio}")
        if self.alpha < 0 or self.beta < 0:
            raise InputError("alpha and beta must be nonnegative")
        for name in ("tau1", "tau2", "tau_theta", "restarts", "epochs", "hidden"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise InputError(f"{name} must be an integer >= 1, got {value!r}")
        for name in ("lr_feature", "lr_structure", "inner_lr"):
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive")
        if self.arch not in ARCHITECTURES:
            raise InputError(f"unknown architecture {self.arch!r}; expected one of {ARCHITECTURES}")
        if self.structure not in STRUCTURES:
            raise InputError(f"unknown structure mode {self.structure!r}; expected one of {STRUCTURES}")
        self.ot.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CondenseReport:
    feature: list[float] = field(default_factory=list)
    structure: list[float] = field(default_factory=list)
    regularizer: list[float] = field(default_factory=list)
    total: list[float] = field(default_factory=list)
    sc: float | None = None
    wallclock_s: float = 0.0
    config: dict = field(default_factory=dict)
    seed: int = 0
    n_prime: int = 0
    plan_converged: bool = True
    status: str = "ok"

    @property
    def epochs(self) -> int:
        return len(self.total)

    def to_dict(self) -> dict:
        """Deterministic content only; wall-clock is reported separately."""
        return {
            "status": self.status,
            "seed": self.seed,
            "n_prime": self.n_prime,
            "epochs": self.epochs,
            "sc": self.sc,
            "plan_converged": self.plan_converged,
            "loss": {
                "feature": self.feature,
                "structure": self.structure,
                "regularizer": self.regularizer,
                "total": self.total,
            },
            "config": self.config,
        }


class CondenseDiverged(NumericalError):
    """Raised when the loss turns non-finite; ``report`` holds the finite prefix."""

    def __init__(self, message: str, report: CondenseReport):
        super().__init__(message)
        self.report = report


# --- pieces -------------------------------------------------------------------


def class_counts(train_labels: np.ndarray, num_classes: int, n_prime: int) -> np.ndarray:
    """``floor(N' * share_c)`` per class; leftover nodes go to the largest classes."""
    share = np.bincount(train_labels, minlength=num_classes) / max(train_labels.size, 1)
    counts = np.floor(n_prime * share + 1e-9).astype(np.int64)
    order = np.lexsort((np.arange(num_classes), -share))
    left = n_prime - counts.sum()
    for i in range(int(left)):
        counts[order[i % num_classes]] += 1
    return counts


def init_condensed(g: Graph, r: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Synthetic labels proportional to the training class shares and features
    copied from randomly chosen training nodes of the same class."""
    n_prime = int(np.floor(r * g.n + 1e-9))
    if n_prime < g.num_classes:
        raise InputError(
            f"ratio {r} gives {n_prime} condensed nodes for {g.num_classes} classes; need at least one per class"
        )
    train_idx = np.flatnonzero(g.train_mask)
    if train_idx.size == 0:
        raise InputError("graph has no training nodes")
    counts = class_counts(g.labels[train_idx], g.num_classes, n_prime)
    rng = substream(seed, "init:features")
    rows, labels = [], []
    for c in range(g.num_classes):
        pool = train_idx[g.labels[train_idx] == c]
        if counts[c] == 0:
            continue
        if pool.size == 0:
            raise InputError(f"class {c} has no training nodes to initialize from")
        pick = rng.choice(pool, size=counts[c], replace=counts[c] > pool.size)
        rows.append(g.features[pick])
        labels.append(np.full(counts[c], c, dtype=np.int64))
    return np.vstack(rows).astype(np.float64), np.concatenate(labels)


def _grad_match(real: list[Tensor], syn: list[Tensor]) -> Tensor:
    total = None
    for gr, gs in zip(real, syn):
        diff = ad.sub(gs, gr.data)
        term = ad.sum_(ad.mul(diff, diff))
        total = term if total is None else ad.add(total, term)
    return total


def feature_loss(
    theta: GnnParams,
    g_class_batch: tuple,
    s_batch: tuple,
    tape: Tape,
) -> Tensor:
    """Squared distance between the parameter gradients of cross-entropy on a
    class of the original graph and on the same class of the condensed graph.

    ``g_class_batch = (op_or_adj, features, labels, mask)`` for the original side
    and ``s_batch = (op_or_adj, x_syn, y_syn, mask_syn)`` for the condensed side.
    A precomputed ``graph_operator`` may stand in for either adjacency. Must be
    called inside ``tape``; the result is differentiable in the condensed inputs.
    """
    params = theta.parameters()
    op_g, x_g, y_g, m_g = g_class_batch
    op_s, x_s, y_s, m_s = s_batch
    if not np.any(m_g) or not np.any(m_s):
        raise InputError("empty class on one side of the gradient match")
    real_loss = cross_entropy(gnn_forward(theta, None, x_g, op=_as_op(theta.arch, op_g)), y_g, m_g)
    real = [gr.detach() for gr in tape.grad(real_loss, params)]
    syn_loss = cross_entropy(gnn_forward(theta, None, x_s, op=_as_op(theta.arch, op_s)), y_s, m_s)
    syn = tape.grad(syn_loss, params, create_graph=True)
    return _grad_match(real, syn)


def _as_op(arch: str, op_or_adj):
    if op_or_adj is None or arch == "mlp":
        return None
    if isinstance(op_or_adj, _Operator):
        return op_or_adj.tensor
    return graph_operator(arch, op_or_adj)


@dataclass(frozen=True)
class _Operator:
    """Marks an already-built graph operator (as opposed to a raw adjacency)."""

    tensor: Tensor


def operator(arch: str, adj) -> _Operator | None:
    op = graph_operator(arch, adj)
    return None if op is None else _Operator(op)


def total_loss(feat: Tensor, struct: Tensor | None, a_prime: Tensor, alpha: float, beta: float) -> Tensor:
    """``L_feature + alpha * L_structure + beta * ||A'||_F``."""
    out = feat
    if alpha != 0.0 and struct is not None:
        out = ad.add(out, ad.scale(struct, alpha))
    if beta != 0.0:
        out = ad.add(out, ad.scale(ad.frobenius_norm(a_prime), beta))
    return out


def threshold_structure(a_prime, tau: float = THRESHOLD) -> np.ndarray:
    """Zero every entry ``<= tau``; surviving entries keep their weight."""
    a = np.array(ad.as_tensor(a_prime).data if isinstance(a_prime, Tensor) else a_prime, dtype=np.float64)
    a[a <= tau] = 0.0
    np.fill_diagonal(a, 0.0)
    return a


def cosine_structure(x: Tensor) -> Tensor:
    """``relu(cos(X'_i, X'_j))`` with a zero diagonal, differentiable in ``X'``."""
    x = ad.as_tensor(x)
    norms = ad.sqrt(ad.add(ad.sum_(ad.mul(x, x), axis=1), 1e-24))
    unit = ad.div(x, norms)
    cos = ad.matmul(unit, ad.transpose(unit))
    n = x.rows
    sym = ad.scale(ad.add(cos, ad.transpose(cos)), 0.5)
    return ad.mul(ad.relu(sym), 1.0 - np.eye(n))


# --- main loop -------------------------------------------------------------------


def _finite(x: float) -> bool:
    return bool(np.isfinite(x))


def condense(g: Graph, cfg: CondenseConfig) -> tuple[CondensedGraph, CondenseReport]:
    """Condense ``g`` to ``floor(ratio * N)`` synthetic nodes.

    Each restart re-initializes the inner GNN. Each epoch regenerates ``A'``,
    sums the per-class gradient-matching losses plus (once per class) the
    weighted structure and sparsity terms, and updates either ``X'`` (first
    ``tau1`` epochs of a cycle) or the generator (remaining ``tau2``). The
    transport plan advances at the start of every cycle. The inner GNN then
    takes ``tau_theta`` Adam steps on the current condensed graph.

    ``cfg.structure == "cosine"`` replaces the generator by cosine similarity
    of ``X'``; structure epochs then only log losses and train the inner GNN.
    """
    cfg.validate()
    start = time.perf_counter()
    seed = cfg.seed
    x0, y_syn = init_condensed(g, cfg.ratio, seed)
    n_prime = x0.shape[0]
    c = g.num_classes
    report = CondenseReport(config=cfg.to_dict(), seed=seed, n_prime=n_prime)

    x_syn = Tensor(x0, requires_grad=True)
    x_opt = Adam([x_syn], lr=cfg.lr_feature)
    use_gen = cfg.structure == "generator"
    phi = coords = phi_opt = None
    if use_gen:
        phi = init_gen(g.num_features, c, substream(seed, "init:generator"))
        coords = sample_coordinates(n_prime, substream(seed, "init:coords"))
        phi_opt = Adam(phi.parameters(), lr=cfg.lr_structure)

    # original side: fixed sample for the OT term, full graph for gradient matching
    k = min(cfg.ot.sample_size, g.n)
    sample = g if k == g.n else sample_subgraph(g, k, seed)
    lg_pinv = laplacian_pinv(sample.dense_adjacency(), cfg.ot.gamma)
    plan = None

    op_g = operator(cfg.arch, g.adjacency)
    train = np.asarray(g.train_mask)
    classes = [cl for cl in range(c) if np.any(train & (g.labels == cl)) and np.any(y_syn == cl)]
    for cl in range(c):
        if cl not in classes:
            warnings.warn(f"class {cl} is empty on one side; skipped in gradient matching", RuntimeWarning)

    cycle = cfg.tau1 + cfg.tau2

    def build_structure():
        return gen_forward(phi, coords, x_syn, y_syn) if use_gen else cosine_structure(x_syn)

    for restart in range(cfg.restarts):
        theta = init_gnn(cfg.arch, g.num_features, c, cfg.hidden, substream(seed, f"init:gnn:{restart}"))
        theta_opt = Adam(theta.parameters(), lr=cfg.inner_lr)
        for t in range(cfg.epochs):
            feature_phase = t % cycle < cfg.tau1
            if use_gen and t % cycle == 0:
                with ad.no_grad():
                    ls_now = condensed_pinv(build_structure(), cfg.ot.gamma).data
                plan = optimize_plan(lg_pinv, ls_now, cfg.ot, seed, plan)
                report.plan_converged = report.plan_converged and plan.converged
            with Tape() as tape:
                a_prime = build_structure()
                if cfg.debug:
                    check_condensed_adjacency(a_prime.data, atol=1e-12)
                op_s = operator(cfg.arch, a_prime)
                feat = None
                for cl in classes:
                    term = feature_loss(
                        theta,
                        (op_g, g.features, g.labels, train & (g.labels == cl)),
                        (op_s, x_syn, y_syn, y_syn == cl),
                        tape,
                    )
                    feat = term if feat is None else ad.add(feat, term)
                struct = None
                if use_gen:
                    struct = got_objective(lg_pinv, condensed_pinv(a_prime, cfg.ot.gamma), plan)
                # per-class structure and sparsity terms are identical; add them once, times C
                total = total_loss(feat, struct, a_prime, cfg.alpha * len(classes), cfg.beta * len(classes))
                reg = ad.frobenius_norm(a_prime).item()
                values = (feat.item(), struct.item() if struct is not None else 0.0, reg, total.item())
                if not all(_finite(v) for v in values):
                    report.wallclock_s = time.perf_counter() - start
                    report.status = "diverged"
                    raise CondenseDiverged(
                        f"non-finite loss at restart {restart}, epoch {t}", report
                    )
                if feature_phase:
                    x_opt.step([gr.data for gr in tape.grad(total, [x_syn])])
                elif use_gen:
                    phi_opt.step([gr.data for gr in tape.grad(total, phi.parameters())])
            _log(report, *values)
            _inner_steps(theta, theta_opt, cfg, build_structure, x_syn, y_syn)

    with ad.no_grad():
        a_final = build_structure().data
    adj = threshold_structure(a_final)
    s = CondensedGraph(adj, x_syn.data.copy(), y_syn, c, float(cfg.ratio))
    report.sc = shift_coefficient(g, s)
    report.wallclock_s = time.perf_counter() - start
    return s, report


def _log(report: CondenseReport, feat: float, struct: float, reg: float, total: float) -> None:
    report.feature.append(float(feat))
    report.structure.append(float(struct))
    report.regularizer.append(float(reg))
    report.total.append(float(total))


def _inner_steps(theta, theta_opt, cfg, build_structure, x_syn, y_syn) -> None:
    with ad.no_grad():
        a_prime = build_structure().detach()
    op = graph_operator(cfg.arch, a_prime)
    x = x_syn.detach()
    params = theta.parameters()
    for _ in range(cfg.tau_theta):
        with Tape() as tape:
            loss = cross_entropy(gnn_forward(theta, a_prime, x, op=op), y_syn)
            grads = tape.grad(loss, params)
        theta_opt.step([gr.data for gr in grads])
