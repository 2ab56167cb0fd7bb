"""Minimal reverse-mode autodiff over numpy arrays.

Operations record onto the active :class:`Tape` only when one is open and at
least one input requires a gradient. Outside a tape every op is a plain numpy
computation, which is how samplers and target networks run.

Precision follows the operands: networks train in float32 and are cast to
float64 (see ``Tensor.astype``) for finite-difference verification.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "ContractError",
    "NumericError",
    "Tensor",
    "Tape",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "gelu",
    "softmax",
    "layernorm",
    "straight_through",
    "backward",
    "svd",
    "finite_difference_grad",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class NumericError(ArithmeticError):
    """Non-finite values or a failed iterative routine."""


_state = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class Tape:
    """Records differentiable operations in execution order.

    Execution order is already a topological order, so ``backward`` walks the
    node list in reverse and visits each node exactly once.

    Use as a context manager; tapes do not nest across threads.
    """

    _counter = 0

    def __init__(self) -> None:
        Tape._counter += 1
        self.id = Tape._counter
        self.nodes: list[Tensor] = []
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: "Tensor", params: dict[str, "Tensor"] | None = None):
        return backward(loss, params, tape=self)


class no_grad:
    """Suspends tape recording inside the block (for frozen or EMA networks)."""

    def __enter__(self) -> "no_grad":
        self._prev = _active_tape()
        _state.tape = None
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev


class Tensor:
    """Dense array that can participate in a differentiation tape."""

    __slots__ = ("data", "grad", "requires_grad", "name", "tape_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.tape_id: int | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result, recording it if a tape is open and a parent needs grad."""
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.tape_id = tape.id
        tape.nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    for x, y in zip(reversed(a.shape), reversed(b.shape)):
        if x != y and x != 1 and y != 1:
            raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}")


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return scale(b, float(a))
    a, b = _coerce(a, b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Tanh-approximate GELU (in-place temporaries; this op is memory-bound)."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = x2 * 0.044715
    t += 1.0
    t *= x
    t *= _GELU_C
    np.tanh(t, out=t)
    out = t + 1.0
    out *= x
    out *= 0.5

    def bw(g):
        # d/dx = 0.5(1+t) + 0.5 x (1-t^2) C (1 + 3*0.044715 x^2)
        d = x2 * (3 * 0.044715)
        d += 1.0
        d *= _GELU_C
        d *= x
        d *= 1.0 - t * t
        d += 1.0 + t
        d *= 0.5
        d *= g
        return (d,)

    return _make(out, (a,), bw)


def elementwise(op: str, *operands, c: float | None = None) -> Tensor:
    """Dispatch by name to add/mul/sub/gelu/scale."""
    if op == "add":
        return add(*operands)
    if op == "sub":
        return sub(*operands)
    if op == "mul":
        return mul(*operands)
    if op == "gelu":
        return gelu(*operands)
    if op == "scale":
        return scale(operands[0], c if c is not None else operands[1])
    raise ContractError(f"unknown elementwise op {op!r}")


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(x * x, (a,), lambda g: (2.0 * g * x,))


def straight_through(hard, relaxed: Tensor) -> Tensor:
    """Forward value ``hard`` exactly; gradient routed to ``relaxed`` unchanged."""
    hard = np.asarray(hard.data if isinstance(hard, Tensor) else hard, dtype=relaxed.dtype)
    if hard.shape != relaxed.shape:
        raise DimensionError(f"straight_through: {hard.shape} vs {relaxed.shape}")
    return _make(hard.copy(), (relaxed,), lambda g: (g,))


# -- reductions and shape ---------------------------------------------------
def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis, keepdims), 1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: {old} -> {shape}") from e
    return _make(out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, slice)) or i is None or i is Ellipsis for i in parts)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g  # basic indexing never aliases
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.asarray(a.data[idx]), (a,), bw)


# -- linear algebra ---------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes of ``a`` batch.

    ``b`` may be 2-D (shared weight) or carry the same leading axes as ``a``.
    """
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul: shapes {ad.shape} and {bd.shape} are not aligned")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise DimensionError(f"matmul: batch shapes {ad.shape} and {bd.shape} differ")

    if bd.ndim == 2 and ad.ndim > 2:  # shared weight: one flat GEMM
        k, n = bd.shape
        a2 = ad.reshape(-1, k)

        def bw(g):
            g2 = g.reshape(-1, n)
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _make((a2 @ bd).reshape(*ad.shape[:-1], n), (a, b), bw)

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = ad.T @ g if bd.ndim == 2 else np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if not -a.ndim <= axis < max(a.ndim, 1):
        raise DimensionError(f"softmax: axis {axis} invalid for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), bw)


def layernorm(x, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply optional affine terms."""
    x = as_tensor(x)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    parents: list[Tensor] = [x]
    out = xhat
    gd = bd = None
    if gain is not None:
        gain = as_tensor(gain)
        gd = gain.data
        out = out * gd
        parents.append(gain)
    if bias is not None:
        bias = as_tensor(bias)
        bd = bias.data
        out = out + bd
        parents.append(bias)
    n = xd.shape[-1]

    def bw(g):
        gx_hat = g * gd if gd is not None else g
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gd is not None:
            grads.append((g * xhat).reshape(-1, n).sum(axis=0))
        if bd is not None:
            grads.append(g.reshape(-1, n).sum(axis=0))
        return tuple(grads)

    return _make(out, parents, bw)


# -- backward ---------------------------------------------------------------
def backward(loss: Tensor, params: dict[str, Tensor] | None = None, tape: Tape | None = None):
    """Reverse sweep from a scalar ``loss``.

    Gradients land in ``tensor.grad`` for every leaf that requires one. When
    ``params`` is given, returns ``{name: grad}`` with zeros for parameters the
    loss does not reach.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape or _active_tape()
    if tape is None or loss.tape_id != tape.id:
        raise ContractError("loss is not on the active tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if parent._backward is None:  # leaf
                parent.grad = pg if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    if params is None:
        return None
    return {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in params.items()
    }


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- SVD --------------------------------------------------------------------
def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament pairings: n-1 rounds of n/2 disjoint column pairs (n even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        left = np.array(players[:half])
        right = np.array(players[half:][::-1])
        rounds.append((left, right))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def svd(w, tol: float = 1e-10, max_sweeps: int = 100, name: str = "W"):
    """Thin SVD by one-sided Jacobi rotations.

    Returns ``(U, S, V)`` as numpy arrays with ``W ≈ U @ diag(S) @ V.T`` and
    ``S`` descending. Disjoint column pairs are rotated together each round.
    """
    a = np.array(w.data if isinstance(w, Tensor) else w, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"svd: expected a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericError(f"svd: non-finite entries in {name}")
    transposed = a.shape[0] < a.shape[1]
    if transposed:
        a = a.T
    m, n = a.shape
    pad = n % 2
    u = np.concatenate([a, np.zeros((m, pad))], axis=1) if pad else a.copy()
    nn_ = n + pad
    v = np.eye(nn_)
    rounds = _round_robin(nn_) if nn_ > 1 else []
    converged = nn_ <= 1
    for _ in range(max_sweeps):
        off = 0.0
        for p, q in rounds:
            up, uq = u[:, p], u[:, q]
            alpha = np.einsum("ij,ij->j", up, up)
            beta = np.einsum("ij,ij->j", uq, uq)
            gamma = np.einsum("ij,ij->j", up, uq)
            denom = np.sqrt(alpha * beta)
            with np.errstate(invalid="ignore", divide="ignore"):
                rel = np.where(denom > 0, np.abs(gamma) / denom, 0.0)
            off = max(off, float(rel.max(initial=0.0)))
            active = rel > tol
            if not active.any():
                continue
            zeta = np.where(active, (beta - alpha) / np.where(active, 2.0 * gamma, 1.0), 0.0)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t = np.where(zeta == 0, 1.0, t)
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            vp, vq = v[:, p], v[:, q]
            u[:, p] = c * up - s * uq
            u[:, q] = s * up + c * uq
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if off <= tol:
            converged = True
            break
    if not converged:
        raise NumericError(f"svd: Jacobi did not converge on {name} after {max_sweeps} sweeps")
    u, v = u[:, :n], v[:n, :n]
    sv = np.linalg.norm(u, axis=0)
    order = np.argsort(-sv, kind="stable")
    sv = sv[order]
    u = u[:, order]
    v = v[:, order]
    safe = np.where(sv > 0, sv, 1.0)
    u = u / safe
    if transposed:
        u, v = v, u
    return u, sv, v


# -- finite differences -----------------------------------------------------
def finite_difference_grad(f: Callable[[], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * step)
    return g
