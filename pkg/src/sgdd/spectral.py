"""Laplacian energy distribution (LED), KDE, Jensen-Shannon divergence and the
LED shift coefficient between two graphs."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericalError
from .graph import normalized_laplacian

SYMMETRY_TOL = 1e-8
BANDWIDTH_FLOOR = 1e-4
GRID_POINTS = 512
GRID_PAD = 3.0
MODES = ("scaled", "led", "eigenvalue")
DEFAULT_MODE = "scaled"


@dataclass(frozen=True)
class SpectralDecomposition:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    laplacian: np.ndarray

    def reconstruct(self) -> np.ndarray:
        u = self.eigenvectors
        return (u * self.eigenvalues) @ u.T


@dataclass(frozen=True)
class LedProfile:
    eta: np.ndarray
    samples: np.ndarray
    bandwidth: float
    grid: np.ndarray
    eigenvalues: np.ndarray

    def to_dict(self) -> dict:
        return {
            "eta": self.eta.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "samples": self.samples.tolist(),
            "bandwidth": self.bandwidth,
            "grid": [float(self.grid[0]), float(self.grid[-1]), int(self.grid.size)],
        }


def _check_symmetric(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InputError(f"matrix must be square, got shape {m.shape}")
    asym = float(np.max(np.abs(m - m.T), initial=0.0))
    if asym > SYMMETRY_TOL:
        raise InputError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    return m


def jacobi_eigh(m, tol: float = 1e-14, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigensolver for symmetric matrices.

    Sweeps over all off-diagonal pairs, zeroing each with a plane rotation,
    until the off-diagonal Frobenius norm drops below ``tol`` times the
    matrix norm. Returns ascending eigenvalues and column eigenvectors.
    """
    a = _check_symmetric(m).copy()
    n = a.shape[0]
    v = np.eye(n)
    scale = max(np.linalg.norm(a), 1e-300)
    for _ in range(max_sweeps):
        off = float(np.linalg.norm(a - np.diag(np.diag(a))))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    # theta^2 would overflow; the rotation is ~1/(2 theta)
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
    else:
        raise NumericalError(f"Jacobi did not converge in {max_sweeps} sweeps")
    lam = np.diag(a).copy()
    order = np.argsort(lam, kind="stable")
    return lam[order], v[:, order]


def eigendecompose(lap, method: str = "lapack") -> SpectralDecomposition:
    """Full ascending eigendecomposition of a symmetric matrix.

    ``method="lapack"`` uses the tridiagonal LAPACK driver via numpy;
    ``method="jacobi"`` uses :func:`jacobi_eigh`.
    """
    lap = _check_symmetric(lap)
    if method == "lapack":
        lam, vecs = np.linalg.eigh(0.5 * (lap + lap.T))
    elif method == "jacobi":
        lam, vecs = jacobi_eigh(lap)
    else:
        raise InputError(f"unknown eigensolver {method!r}")
    lam.flags.writeable = False
    vecs.flags.writeable = False
    return SpectralDecomposition(lam, vecs, lap)


def led_eta(x, decomposition: SpectralDecomposition) -> np.ndarray:
    """Energy share of each eigenmode: squared row norms of ``U^T X``, normalized."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    u = decomposition.eigenvectors
    if x.shape[0] != u.shape[0]:
        raise InputError(f"features have {x.shape[0]} rows, Laplacian has {u.shape[0]} nodes")
    x_hat = u.T @ x
    energy = np.sum(x_hat * x_hat, axis=1)
    total = energy.sum()
    if total <= 0.0:
        raise InputError("features are all zero; LED is undefined")
    return energy / total


def silverman_bandwidth(samples) -> float:
    """``0.9 * min(std, IQR/1.34) * m^(-1/5)``, floored at ``BANDWIDTH_FLOOR``."""
    s = np.asarray(samples, dtype=np.float64).reshape(-1)
    m = s.size
    if m == 0:
        raise InputError("bandwidth needs at least one sample")
    sigma = float(np.std(s, ddof=1)) if m > 1 else 0.0
    q75, q25 = np.percentile(s, [75, 25])
    spread = min(sigma, float(q75 - q25) / 1.34)
    h = 0.9 * spread * m ** (-0.2)
    return max(h, BANDWIDTH_FLOOR)


def kde_grid(samples, h: float, points: int = GRID_POINTS) -> np.ndarray:
    s = np.asarray(samples, dtype=np.float64).reshape(-1)
    return np.linspace(s.min() - GRID_PAD * h, s.max() + GRID_PAD * h, points)


def kde_density(samples, h: float, grid, weights=None) -> np.ndarray:
    """Gaussian KDE evaluated on ``grid`` and renormalized to a discrete distribution.

    ``weights`` (nonnegative, any scale) replace the uniform ``1/m`` kernel masses.
    """
    if h <= 0:
        raise InputError("bandwidth must be positive")
    s = np.asarray(samples, dtype=np.float64).reshape(-1)
    grid = np.asarray(grid, dtype=np.float64).reshape(-1)
    if grid.size > 1 and np.any(np.diff(grid) <= 0):
        raise InputError("grid must be strictly increasing")
    w = np.full(s.size, 1.0 / s.size) if weights is None else np.asarray(weights, np.float64)
    z = (grid[:, None] - s[None, :]) / h
    dens = (np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)) @ w / h
    total = dens.sum()
    if total <= 0 or not np.isfinite(total):
        raise NumericalError("KDE has no mass on the grid")
    return dens / total


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence in bits (range [0, 1])."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if p.shape != q.shape:
        raise InputError(f"distributions differ in length: {p.size} vs {q.size}")
    if np.any(p < 0) or np.any(q < 0):
        raise InputError("distributions must be nonnegative")
    if abs(p.sum() - 1) > 1e-9 or abs(q.sum() - 1) > 1e-9:
        raise InputError("distributions must sum to 1")
    m = 0.5 * (p + q)

    def kl(a):
        nz = (a > 0) & (m > 0)
        return float(np.sum(a[nz] * np.log2(a[nz] / m[nz])))

    js = 0.5 * kl(p) + 0.5 * kl(q)
    return min(max(js, 0.0), 1.0)


def led(x, decomposition: SpectralDecomposition, mode: str = DEFAULT_MODE) -> LedProfile:
    """LED of features ``x`` and the KDE inputs derived from it.

    ``"scaled"`` (default) feeds ``N * eta`` to the KDE, i.e. each mode's
    energy relative to the uniform share ``1/N``; this matches ``"led"``
    whenever both graphs have the same size but does not drift with node
    count. ``"led"`` feeds the raw masses. ``"eigenvalue"`` feeds the
    eigenvalues, weighted by LED mass.
    """
    if mode not in MODES:
        raise InputError(f"unknown LED mode {mode!r}; expected one of {MODES}")
    eta = led_eta(x, decomposition)
    if mode == "scaled":
        samples = eta * eta.size
    elif mode == "led":
        samples = eta
    else:
        samples = np.asarray(decomposition.eigenvalues)
    h = silverman_bandwidth(samples)
    return LedProfile(eta, samples, h, kde_grid(samples, h), np.asarray(decomposition.eigenvalues))


@dataclass(frozen=True)
class ShiftResult:
    sc: float
    profile_g: LedProfile
    profile_s: LedProfile
    bandwidth: float
    mode: str

    def to_dict(self) -> dict:
        return {
            "sc": self.sc,
            "mode": self.mode,
            "bandwidth": self.bandwidth,
            "profile_a": self.profile_g.to_dict(),
            "profile_b": self.profile_s.to_dict(),
        }


def graph_profile(g, features=None, mode: str = DEFAULT_MODE) -> LedProfile:
    feats = g.features if features is None else features
    return led(feats, eigendecompose(normalized_laplacian(g)), mode)


def shift(g, s, features_g=None, features_s=None, mode: str = DEFAULT_MODE) -> ShiftResult:
    """LED shift between two graphs, with the KDE bandwidth (Silverman) on the
    pooled samples and a shared 512-point grid padded by 3 bandwidths."""
    pg = graph_profile(g, features_g, mode)
    ps = graph_profile(s, features_s, mode)
    pooled = np.concatenate([pg.samples, ps.samples])
    h = silverman_bandwidth(pooled)
    grid = kde_grid(pooled, h)
    wg = pg.eta if mode == "eigenvalue" else None
    ws = ps.eta if mode == "eigenvalue" else None
    dg = kde_density(pg.samples, h, grid, wg)
    ds = kde_density(ps.samples, h, grid, ws)
    return ShiftResult(js_divergence(dg, ds), pg, ps, h, mode)


def shift_coefficient(g, s, features_g=None, features_s=None, mode: str = DEFAULT_MODE) -> float:
    return shift(g, s, features_g, features_s, mode).sc
