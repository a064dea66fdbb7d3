"""Minimal reverse-mode automatic differentiation over dense 2-D float64 tensors.

Operations are recorded on the active :class:`Tape` whenever one of their
inputs requires a gradient. Backward rules are written with the same tensor
operations, so ``Tape.grad(..., create_graph=True)`` records the backward pass
too and the result can be differentiated again (used by gradient matching).

The matrix-function primitives ``trace_sqrtm`` and ``sqrtm_psd`` only support
first-order differentiation with respect to their matrix argument.

Example::

    with Tape() as tape:
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        y = sum_(sin(x))
        (gx,) = tape.grad(y, [x])
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InputError, NumericalError

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("sgdd_tape", default=None)

SQRT_EIG_FLOOR = 1e-8
PSD_TOLERANCE = 1e-6


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        elif arr.ndim != 2:
            raise InputError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise InputError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Record:
    """One recorded operation: inputs, output and the rule mapping the output
    gradient to input gradients."""

    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[Tensor, Tensor], Sequence[Tensor | None]]


@dataclass
class Tape:
    """Ordered log of recorded operations.

    Records are appended as operations execute, so every input is produced
    before its consumer and the list is already in topological order.
    """

    records: list[Record] = field(default_factory=list)
    recording: bool = True
    _tokens: list = field(default_factory=list, repr=False)

    def __enter__(self) -> "Tape":
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.records)

    def grad(
        self, loss: Tensor, inputs: Sequence[Tensor], create_graph: bool = False
    ) -> list[Tensor]:
        """Gradients of scalar ``loss`` with respect to ``inputs``.

        Inputs that do not influence ``loss`` get zero gradients. With
        ``create_graph`` the backward computation is itself recorded.
        """
        grads = self._propagate(loss, create_graph)
        out = []
        for x in inputs:
            g = grads.get(id(x))
            out.append(g if g is not None else Tensor(np.zeros(x.shape)))
        return out

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Populate ``.grad`` on every leaf that requires a gradient.

        Returns the mapping ``id(leaf) -> gradient array``.
        """
        grads = self._propagate(loss, create_graph=False)
        produced = {id(r.output) for r in self.records}
        result = {}
        for rec in self.records:
            for x in rec.inputs:
                key = id(x)
                if x.requires_grad and key not in produced and key not in result:
                    g = grads.get(key)
                    x.grad = g.data.copy() if g is not None else np.zeros(x.shape)
                    result[key] = x.grad
        if loss.requires_grad and id(loss) not in produced:
            loss.grad = np.ones((1, 1))
            result[id(loss)] = loss.grad
        return result

    def _propagate(self, loss: Tensor, create_graph: bool) -> dict[int, Tensor]:
        if loss.shape != (1, 1):
            raise InputError(f"loss must be a 1x1 scalar tensor, got {loss.shape}")
        grads: dict[int, Tensor] = {id(loss): Tensor(np.ones((1, 1)))}
        snapshot = list(self.records)
        prev = self.recording
        self.recording = create_graph
        token = _ACTIVE_TAPE.set(self)
        try:
            for rec in reversed(snapshot):
                g = grads.get(id(rec.output))
                if g is None:
                    continue
                in_grads = rec.backward(g, rec.output)
                for x, gx in zip(rec.inputs, in_grads):
                    if gx is None or not x.requires_grad:
                        continue
                    key = id(x)
                    grads[key] = gx if key not in grads else add(grads[key], gx)
        finally:
            _ACTIVE_TAPE.reset(token)
            self.recording = prev
        return grads


class no_grad:
    """Context manager that suspends recording on the active tape."""

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(None)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def _record(name, data, inputs, backward) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    if tape is not None and tape.recording and any(x.requires_grad for x in inputs):
        out = Tensor(data, requires_grad=True)
        tape.records.append(Record(name, tuple(inputs), out, backward))
        return out
    return Tensor(data)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, int]:
    shape = []
    for da, db in zip(a.shape, b.shape):
        if da == db or db == 1:
            shape.append(da)
        elif da == 1:
            shape.append(db)
        else:
            raise InputError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    return tuple(shape)


def _unbroadcast(g: Tensor, shape: tuple[int, int]) -> Tensor:
    if g.shape == shape:
        return g
    if shape == (1, 1):
        return sum_(g)
    if shape[0] == 1 and g.rows != 1:
        g = sum_(g, axis=0)
    if shape[1] == 1 and g.cols != 1:
        g = sum_(g, axis=1)
    return g


# --- elementary operations ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _record(
        "add",
        a.data + b.data,
        (a, b),
        lambda g, out: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _record(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g, out: (_unbroadcast(g, a.shape), _unbroadcast(scale(g, -1.0), b.shape)),
    )


def mul(a, b) -> Tensor:
    """Elementwise product with row/column broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _record(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g, out: (
            _unbroadcast(mul(g, b), a.shape) if a.requires_grad else None,
            _unbroadcast(mul(g, a), b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    return _record(
        "div",
        a.data / b.data,
        (a, b),
        lambda g, out: (
            _unbroadcast(div(g, b), a.shape) if a.requires_grad else None,
            _unbroadcast(scale(div(mul(g, out), b), -1.0), b.shape) if b.requires_grad else None,
        ),
    )


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _record("scale", x.data * c, (x,), lambda g, out: (scale(g, c),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.cols != b.rows:
        raise InputError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _record(
        "matmul",
        a.data @ b.data,
        (a, b),
        lambda g, out: (
            matmul(g, transpose(b)) if a.requires_grad else None,
            matmul(transpose(a), g) if b.requires_grad else None,
        ),
    )


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return _record("transpose", x.data.T.copy(), (x,), lambda g, out: (transpose(g),))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise InputError("concat_cols needs at least one tensor")
    rows = {p.rows for p in parts}
    if len(rows) != 1:
        raise InputError(f"concat_cols: row counts differ: {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.cols for p in parts])

    def backward(g, out):
        return tuple(slice_cols(g, int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _record("concat_cols", np.hstack([p.data for p in parts]), parts, backward)


def slice_cols(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    if not 0 <= start <= stop <= x.cols:
        raise InputError(f"slice_cols: [{start}:{stop}] out of range for shape {x.shape}")

    def backward(g, out):
        return (pad_cols(g, start, x.cols),)

    return _record("slice_cols", x.data[:, start:stop].copy(), (x,), backward)


def pad_cols(x, start: int, total: int) -> Tensor:
    """Embed ``x`` into zero columns so it occupies ``[start, start + x.cols)``."""
    x = as_tensor(x)
    data = np.zeros((x.rows, total))
    data[:, start : start + x.cols] = x.data
    return _record(
        "pad_cols", data, (x,), lambda g, out: (slice_cols(g, start, start + x.cols),)
    )


def slice_rows(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    if not 0 <= start <= stop <= x.rows:
        raise InputError(f"slice_rows: [{start}:{stop}] out of range for shape {x.shape}")
    return index_rows(x, np.arange(start, stop))


def index_rows(x, idx) -> Tensor:
    """Gather rows ``x[idx]`` (indices may repeat)."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= x.rows):
        raise InputError(f"index_rows: index out of range for shape {x.shape}")
    return _record(
        "index_rows", x.data[idx], (x,), lambda g, out: (scatter_rows(g, idx, x.rows),)
    )


def scatter_rows(x, idx, n_rows: int) -> Tensor:
    """Sum rows of ``x`` into a zero matrix at positions ``idx`` (adjoint of gather)."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if idx.size != x.rows:
        raise InputError(f"scatter_rows: {idx.size} indices for shape {x.shape}")
    data = np.zeros((n_rows, x.cols))
    np.add.at(data, idx, x.data)
    return _record("scatter_rows", data, (x,), lambda g, out: (index_rows(g, idx),))


def reshape(x, shape: tuple[int, int]) -> Tensor:
    x = as_tensor(x)
    if shape[0] * shape[1] != x.data.size:
        raise InputError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    return _record(
        "reshape", x.data.reshape(shape).copy(), (x,), lambda g, out: (reshape(g, old),)
    )


def broadcast_to(x, shape: tuple[int, int]) -> Tensor:
    x = as_tensor(x)
    for d, s in zip(x.shape, shape):
        if d not in (1, s):
            raise InputError(f"broadcast_to: cannot broadcast {x.shape} to {shape}")
    old = x.shape
    return _record(
        "broadcast_to",
        np.broadcast_to(x.data, shape).copy(),
        (x,),
        lambda g, out: (_unbroadcast(g, old),),
    )


def sum_(x, axis: int | None = None) -> Tensor:
    """Sum of all entries (1x1), or along ``axis`` keeping dimensions."""
    x = as_tensor(x)
    if axis is None:
        data = np.array([[x.data.sum()]])
    elif axis in (0, 1):
        data = x.data.sum(axis=axis, keepdims=True)
    else:
        raise InputError(f"sum: axis must be None, 0 or 1, got {axis}")
    shape = x.shape
    return _record("sum", data, (x,), lambda g, out: (broadcast_to(g, shape),))


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis), 1.0 / count)


def trace(x) -> Tensor:
    x = as_tensor(x)
    if x.rows != x.cols:
        raise InputError(f"trace: matrix must be square, got {x.shape}")
    eye = np.eye(x.rows)
    return _record(
        "trace",
        np.array([[np.trace(x.data)]]),
        (x,),
        lambda g, out: (mul(broadcast_to(g, x.shape), eye),),
    )


def sin(x) -> Tensor:
    x = as_tensor(x)
    return _record("sin", np.sin(x.data), (x,), lambda g, out: (mul(g, cos(x)),))


def cos(x) -> Tensor:
    x = as_tensor(x)
    return _record("cos", np.cos(x.data), (x,), lambda g, out: (scale(mul(g, sin(x)), -1.0),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    return _record("exp", np.exp(x.data), (x,), lambda g, out: (mul(g, out),))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericalError("log of a non-positive value")
    return _record("log", np.log(x.data), (x,), lambda g, out: (div(g, x),))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise NumericalError("sqrt of a negative value")
    return _record(
        "sqrt", np.sqrt(x.data), (x,), lambda g, out: (div(scale(g, 0.5), out),)
    )


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    z = x.data
    data = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    return _record(
        "sigmoid", data, (x,), lambda g, out: (mul(g, mul(out, sub(1.0, out))),)
    )


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = (x.data > 0).astype(np.float64)
    return _record("relu", x.data * mask, (x,), lambda g, out: (mul(g, mask),))


def log_softmax(x) -> Tensor:
    """Row-wise log-softmax, stabilized by subtracting the row maximum."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def backward(g, out):
        return (sub(g, mul(exp(out), sum_(g, axis=1))),)

    return _record("log_softmax", data, (x,), backward)


def frobenius_norm(x) -> Tensor:
    """``sqrt(sum(x**2))``; the gradient at the zero matrix is taken as zero."""
    x = as_tensor(x)
    norm = float(np.sqrt(np.sum(x.data**2)))

    def backward(g, out):
        if norm == 0.0:
            return (Tensor(np.zeros(x.shape)),)
        return (mul(broadcast_to(g, x.shape), div(x, out)),)

    return _record("frobenius_norm", np.array([[norm]]), (x,), backward)


# --- matrix functions --------------------------------------------------------


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def _sym_t(g: Tensor) -> Tensor:
    return scale(add(g, transpose(g)), 0.5)


def _psd_eigh(m: np.ndarray, what: str):
    lam, vecs = np.linalg.eigh(_sym(m))
    if lam.size and lam[0] < -PSD_TOLERANCE:
        raise NumericalError(f"{what}: matrix is not PSD (min eigenvalue {lam[0]:.3e})")
    return np.clip(lam, 0.0, None), vecs


def reg_inverse(m, gamma: float = 1.0) -> Tensor:
    """``(M + (gamma/n) J)^-1`` for symmetric ``M`` (``J`` is all-ones).

    Stands in for the Laplacian pseudo-inverse: the rank-one shift removes the
    constant null vector of a connected graph's Laplacian. The input is
    symmetrized before inversion.
    """
    m = as_tensor(m)
    if m.rows != m.cols:
        raise InputError(f"reg_inverse: matrix must be square, got {m.shape}")
    n = m.rows
    k = _sym(m.data) + (gamma / n) * np.ones((n, n))
    lam = np.linalg.eigvalsh(k)
    scale_ = max(1.0, float(np.abs(lam).max()))
    if np.abs(lam).min() <= 1e-12 * scale_:
        raise NumericalError("reg_inverse: regularized matrix is singular")
    inv = _sym(np.linalg.inv(k))

    def backward(g, out):
        return (scale(matmul(matmul(out, _sym_t(g)), out), -1.0),)

    return _record("reg_inverse", inv, (m,), backward)


def trace_sqrtm(m) -> Tensor:
    """Trace of the PSD square root, i.e. the sum of ``sqrt`` of the eigenvalues.

    Eigenvalues below ``SQRT_EIG_FLOOR`` contribute nothing to the gradient.
    """
    m = as_tensor(m)
    if m.rows != m.cols:
        raise InputError(f"trace_sqrtm: matrix must be square, got {m.shape}")
    lam, vecs = _psd_eigh(m.data, "trace_sqrtm")
    root = np.sqrt(lam)
    w = np.zeros_like(lam)
    keep = lam > SQRT_EIG_FLOOR
    w[keep] = 0.5 / root[keep]
    dmat = (vecs * w) @ vecs.T

    def backward(g, out):
        return (mul(broadcast_to(g, m.shape), dmat),)

    return _record("trace_sqrtm", np.array([[root.sum()]]), (m,), backward)


def sqrtm_psd(m) -> Tensor:
    """Principal square root of a symmetric PSD matrix."""
    m = as_tensor(m)
    if m.rows != m.cols:
        raise InputError(f"sqrtm_psd: matrix must be square, got {m.shape}")
    lam, vecs = _psd_eigh(m.data, "sqrtm_psd")
    root = np.sqrt(lam)
    denom = root[:, None] + root[None, :]
    coef = np.zeros_like(denom)
    ok = denom > np.sqrt(SQRT_EIG_FLOOR)
    coef[ok] = 1.0 / denom[ok]
    data = _sym((vecs * root) @ vecs.T)

    def backward(g, out):
        inner = mul(matmul(matmul(vecs.T, _sym_t(g)), vecs), coef)
        return (matmul(matmul(vecs, inner), vecs.T),)

    return _record("sqrtm_psd", data, (m,), backward)


# --- checking and optimization ----------------------------------------------


def finite_diff_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5, floor: float = 1e-8) -> float:
    """Max entrywise relative error between autodiff and central differences.

    Relative error of an entry is ``|analytic - numeric| / max(floor, |analytic|)``.
    """
    if eps <= 0:
        raise InputError("eps must be positive")
    x0 = as_tensor(x).data.copy()
    with Tape() as tape:
        xt = Tensor(x0, requires_grad=True)
        y = f(xt)
        (g,) = tape.grad(y, [xt])
    analytic = g.data
    numeric = np.zeros_like(x0)
    for idx in np.ndindex(*x0.shape):
        xp = x0.copy()
        xm = x0.copy()
        xp[idx] += eps
        xm[idx] -= eps
        # fresh tapes: f may take inner gradients of its own
        with Tape():
            fp = f(Tensor(xp)).item()
        with Tape():
            fm = f(Tensor(xm)).item()
        numeric[idx] = (fp - fm) / (2 * eps)
    rel = np.abs(analytic - numeric) / np.maximum(floor, np.abs(analytic))
    return float(rel.max()) if rel.size else 0.0


@dataclass
class AdamState:
    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new parameter arrays and state."""
    if len(params) != len(grads):
        raise InputError("adam_step: params and grads differ in length")
    t = state.step + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise InputError(f"adam_step: param {p.shape} vs grad {g.shape}")
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(t, new_m, new_v)


class Adam:
    """Stateful wrapper around :func:`adam_step` for a list of leaf tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = (beta1, beta2)
        self.eps = eps
        self.state = AdamState.zeros_like([p.data for p in self.params])

    def step(self, grads: Sequence[np.ndarray]) -> None:
        new, self.state = adam_step(
            [p.data for p in self.params], grads, self.state, self.lr, *self.betas, self.eps
        )
        for p, d in zip(self.params, new):
            p.data = d
