"""Optimal-transport structure loss: Laplacian pseudo-inverses, the closed-form
Gaussian 2-Wasserstein objective over a transport plan, and Sinkhorn-Knopp."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.sparse.csgraph import connected_components

from . import autodiff as ad
from .autodiff import Tensor, Tape
from .errors import InputError, NumericalError
from .seeding import substream

PLAN_FLOOR = 1e-30
MONOTONE_TOL = 1e-6
MAX_HALVINGS = 10
INIT_JITTER = 0.01


@dataclass(frozen=True)
class OtConfig:
    gamma: float = 1.0
    sinkhorn_iters: int = 30
    sinkhorn_tol: float = 1e-6
    plan_lr: float = 0.05
    plan_steps: int = 5
    sample_size: int = 2000

    def validate(self) -> "OtConfig":
        for name in ("gamma", "sinkhorn_iters", "sinkhorn_tol", "plan_lr", "plan_steps", "sample_size"):
            value = getattr(self, name)
            if not value > 0:
                raise InputError(f"ot.{name} must be positive, got {value!r}")
        for name in ("sinkhorn_iters", "plan_steps", "sample_size"):
            if int(getattr(self, name)) != getattr(self, name):
                raise InputError(f"ot.{name} must be an integer")
        return self


@dataclass(frozen=True)
class TransportPlan:
    """Nonnegative ``N' x N`` plan with row sums ``N/N'`` and column sums 1."""

    P: np.ndarray
    row_target: float
    col_target: float
    converged: bool = True
    residual: float = 0.0
    iterations: int = 0
    objective_trace: tuple[float, ...] = field(default=())

    @property
    def shape(self) -> tuple[int, int]:
        return self.P.shape

    def marginal_residual(self) -> float:
        return _residual(self.P, self.row_target, self.col_target)


def _residual(p: np.ndarray, row_target: float, col_target: float) -> float:
    return max(
        float(np.max(np.abs(p.sum(axis=1) - row_target))),
        float(np.max(np.abs(p.sum(axis=0) - col_target))),
    )


# --- pseudo-inverses ----------------------------------------------------------


def laplacian(adj: np.ndarray) -> np.ndarray:
    adj = np.asarray(adj, dtype=np.float64)
    return np.diag(adj.sum(axis=1)) - adj


def laplacian_pinv(adj, gamma: float = 1.0) -> np.ndarray:
    """Regularized pseudo-inverse of ``D - A`` for a constant (non-trained) graph.

    Each connected component ``c`` gets its own rank-one shift
    ``(gamma/n_c) 1_c 1_c^T``, so disconnected graphs stay invertible. For a
    connected graph this equals ``(L + (gamma/n) J)^-1``.
    """
    if hasattr(adj, "dense_adjacency"):
        adj = adj.dense_adjacency()
    adj = np.asarray(adj.toarray() if hasattr(adj, "toarray") else adj, dtype=np.float64)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise InputError(f"adjacency must be square, got {adj.shape}")
    if gamma <= 0:
        raise InputError("gamma must be positive")
    n_comp, comp = connected_components(adj != 0, directed=False)
    shift = np.zeros_like(adj)
    for c in range(n_comp):
        members = comp == c
        shift[np.ix_(members, members)] = gamma / members.sum()
    k = laplacian(adj) + shift
    inv = np.linalg.inv(0.5 * (k + k.T))
    return 0.5 * (inv + inv.T)


def condensed_pinv(adj: Tensor, gamma: float = 1.0) -> Tensor:
    """Differentiable ``reg_inverse(D - A)`` for the condensed adjacency."""
    adj = ad.as_tensor(adj)
    n = adj.rows
    deg = ad.sum_(adj, axis=1)
    lap = ad.sub(ad.mul(ad.broadcast_to(deg, (n, n)), np.eye(n)), adj)
    return ad.reg_inverse(lap, gamma)


# --- objective -----------------------------------------------------------------


def _check_shapes(lg: Tensor, ls: Tensor, p: Tensor) -> None:
    if lg.rows != lg.cols or ls.rows != ls.cols:
        raise InputError("pseudo-inverses must be square")
    if p.shape != (ls.rows, lg.rows):
        raise InputError(f"plan shape {p.shape} does not match ({ls.rows}, {lg.rows})")


def _mapped_original(lg: Tensor, p: Tensor) -> Tensor:
    # P Lg P^T: the original covariance carried onto the condensed nodes
    return ad._sym_t(p @ lg @ p.T)


def got_objective(lg_pinv, ls_pinv, plan) -> Tensor:
    """``N' tr(Ls) - 2 tr sqrt(Ls^1/2 (P Lg P^T) Ls^1/2)``.

    The constant ``tr(Lg)`` term is omitted. Differentiable in ``ls_pinv`` and
    ``plan`` (pass tensors that require gradients).
    """
    lg, ls = ad.as_tensor(lg_pinv), ad.as_tensor(ls_pinv)
    p = ad.as_tensor(plan.P if isinstance(plan, TransportPlan) else plan)
    _check_shapes(lg, ls, p)
    root = ad.sqrtm_psd(ls)
    inner = ad._sym_t(root @ _mapped_original(lg, p) @ root)
    return ad.scale(ad.trace(ls), float(ls.rows)) - ad.scale(ad.trace_sqrtm(inner), 2.0)


def gaussian_w2(lg_pinv, ls_pinv, plan) -> Tensor:
    """Unscaled squared Gaussian 2-Wasserstein distance
    ``tr(Ls) + tr(B) - 2 tr sqrt(Ls^1/2 B Ls^1/2)`` with ``B = P Lg P^T``.

    Zero for identical inputs with identity plan; used as a diagnostic.
    """
    lg, ls = ad.as_tensor(lg_pinv), ad.as_tensor(ls_pinv)
    p = ad.as_tensor(plan.P if isinstance(plan, TransportPlan) else plan)
    _check_shapes(lg, ls, p)
    b = _mapped_original(lg, p)
    root = ad.sqrtm_psd(ls)
    inner = ad._sym_t(root @ b @ root)
    return ad.trace(ls) + ad.trace(b) - ad.scale(ad.trace_sqrtm(inner), 2.0)


# --- Sinkhorn and plan optimization ---------------------------------------------


def plan_targets(n_prime: int, n: int) -> tuple[float, float]:
    return n / n_prime, 1.0


def sinkhorn_project(m, row_target: float, col_target: float, iters: int = 30, tol: float = 1e-6) -> TransportPlan:
    """Alternate row and column scaling of a positive matrix towards the targets.

    Stops once both marginal residuals are below ``tol``. Hitting ``iters``
    first returns the current iterate flagged ``converged=False``.
    """
    p = np.asarray(m, dtype=np.float64)
    if p.ndim != 2 or p.size == 0:
        raise InputError(f"sinkhorn needs a nonempty matrix, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise InputError("sinkhorn input must be finite and nonnegative")
    rows, cols = p.shape
    if abs(rows * row_target - cols * col_target) > 1e-9 * max(1.0, rows * row_target):
        raise InputError("row and column targets carry different total mass")
    p = np.maximum(p, PLAN_FLOOR)
    res = _residual(p, row_target, col_target)
    it = 0
    while res >= tol and it < iters:
        p = p * (row_target / p.sum(axis=1))[:, None]
        p = p * (col_target / p.sum(axis=0))[None, :]
        it += 1
        res = _residual(p, row_target, col_target)
    return TransportPlan(p, row_target, col_target, res < tol, res, it)


def uniform_plan(n_prime: int, n: int, cfg: OtConfig, seed: int | None = None) -> TransportPlan:
    """All entries ``1/N'`` (optionally with seeded multiplicative jitter), projected."""
    row_target, col_target = plan_targets(n_prime, n)
    m = np.full((n_prime, n), 1.0 / n_prime)
    if seed is not None:
        rng = substream(seed, "plan:init")
        m = m * (1.0 + INIT_JITTER * rng.uniform(-1.0, 1.0, size=m.shape))
    return sinkhorn_project(m, row_target, col_target, max(cfg.sinkhorn_iters, 500), cfg.sinkhorn_tol)


def _objective_and_grad(lg: np.ndarray, ls: np.ndarray, p: np.ndarray) -> tuple[float, np.ndarray]:
    with Tape() as tape:
        pt = Tensor(p, requires_grad=True)
        val = got_objective(lg, ls, pt)
        (g,) = tape.grad(val, [pt])
    return val.item(), g.data


def _objective(lg: np.ndarray, ls: np.ndarray, p: np.ndarray) -> float:
    with ad.no_grad():
        return got_objective(lg, ls, p).item()


def _tangent(g: np.ndarray) -> np.ndarray:
    # drop the components that only change row or column sums
    return g - g.mean(axis=1, keepdims=True) - g.mean(axis=0, keepdims=True) + g.mean()


def optimize_plan(lg_pinv, ls_pinv, cfg: OtConfig, seed: int, plan: TransportPlan | None = None) -> TransportPlan:
    """Projected gradient descent on the plan against :func:`got_objective`.

    Starting from ``plan`` (or a jittered uniform plan; exact uniform can be a
    stationary point), each of ``cfg.plan_steps`` steps moves ``P`` by
    ``plan_lr * max(P)`` along the max-normalized negative gradient (with its
    marginal-changing part removed) and re-projects with Sinkhorn. A step that raises the objective by more than
    1e-6 is halved up to 10 times, then accepted with a warning.
    """
    cfg.validate()
    lg = np.asarray(ad.as_tensor(lg_pinv).data)
    ls = np.asarray(ad.as_tensor(ls_pinv).data)
    if plan is None:
        plan = uniform_plan(ls.shape[0], lg.shape[0], cfg, seed)
    p = plan.P
    row_target, col_target = plan.row_target, plan.col_target
    obj, grad = _objective_and_grad(lg, ls, p)
    grad = _tangent(grad)
    trace = [obj]
    last = plan
    for _ in range(cfg.plan_steps):
        gmax = float(np.max(np.abs(grad)))
        if gmax == 0.0 or not np.isfinite(gmax):
            break
        step = cfg.plan_lr * float(p.max())
        for _halving in range(MAX_HALVINGS + 1):
            cand = sinkhorn_project(
                np.maximum(p - step * grad / gmax, PLAN_FLOOR), row_target, col_target, cfg.sinkhorn_iters, cfg.sinkhorn_tol
            )
            cand_obj = _objective(lg, ls, cand.P)
            if cand_obj <= obj + MONOTONE_TOL:
                break
            step *= 0.5
        else:
            warnings.warn(f"plan step raised objective {obj:.6g} -> {cand_obj:.6g}", RuntimeWarning)
        if not np.isfinite(cand_obj):
            raise NumericalError("transport objective became non-finite")
        p, last = cand.P, cand
        obj, grad = _objective_and_grad(lg, ls, p)
        grad = _tangent(grad)
        trace.append(obj)
    return replace(last, objective_trace=tuple(trace))


def structure_loss(a_sample, a_prime: Tensor, plan, cfg: OtConfig, lg_pinv: np.ndarray | None = None) -> Tensor:
    """OT structure loss between a sampled original adjacency and ``A'``.

    ``lg_pinv`` may be passed to reuse a precomputed original-side inverse.
    """
    lg = laplacian_pinv(a_sample, cfg.gamma) if lg_pinv is None else lg_pinv
    ls = condensed_pinv(a_prime, cfg.gamma)
    return got_objective(lg, ls, plan)
