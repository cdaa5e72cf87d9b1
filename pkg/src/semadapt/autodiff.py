"""Dense tensors with define-by-run reverse-mode differentiation.

Every operation on a :class:`Tensor` that requires a gradient records its
parents and a backward rule.  Calling :meth:`Tensor.backward` on a scalar walks
that record in reverse topological order and accumulates gradients into the
leaves.  The graph is rebuilt on every forward pass, so freezing a network is
just a matter of switching ``requires_grad`` off on its parameters.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

LOG_EPS = 1e-8

_grad_enabled = True
_dtype = np.float32


@contextlib.contextmanager
def no_grad():
    """Run the enclosed block without recording any graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the float type new tensors are stored in.

    Training always runs in float32; float64 is useful for gradient checks of
    deep compositions where float32 round-off swamps the finite difference.
    """
    global _dtype
    prev = _dtype
    _dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = prev


def get_default_dtype():
    return _dtype


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """An n-dimensional float array that can take part in a graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100  # make ndarray + Tensor dispatch to Tensor.__radd__

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != _dtype:
            arr = arr.astype(_dtype)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- convenience wrappers ---------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return reduce(self, axis, "sum", keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, axis, "mean", keepdims)

    def var(self, axis=None, keepdims=False):
        return reduce(self, axis, "var", keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        backward(self, grad)


def _raise_item(t):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of an operation.

    ``backward_fn(g)`` receives the upstream gradient and must return one
    gradient (or ``None``) per parent, in order.  Nothing is recorded when
    grad mode is off or no parent needs a gradient.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _check_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or b.ndim == 0 or b.size == 1:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(
            f"{op}: incompatible shapes {a.shape} and {b.shape}"
        ) from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_shapes(a, b, "add")
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b),
                  lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape
    return record(a.data - b.data, (a, b),
                  lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_shapes(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return record(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_shapes(a, b, "div")
    if np.any(b.data == 0):
        raise ZeroDivisionError(f"div: zero divisor in tensor of shape {b.shape}")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return record(out, (a, b), bw)


def power(a, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise TypeError("power: only scalar exponents are supported")
    a = _as_tensor(a)
    p = float(exponent)
    ad = a.data
    return record(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def elementwise(a, b, op: str) -> Tensor:
    """Dispatch ``op`` in {add, sub, mul, div, pow} on ``a`` and ``b``."""
    table = {"add": add, "sub": sub, "mul": mul, "div": div, "pow": power}
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](a, b)


def abs_(x: Tensor) -> Tensor:
    xd = x.data
    return record(np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise ValueError("log: input must be strictly positive (clamp it first)")
    return record(np.log(xd), (x,), lambda g: (g / xd,))


def safe_log(x: Tensor, eps: float = LOG_EPS) -> Tensor:
    """log(max(x, eps)); the gradient is zero where the clamp is active."""
    xd = x.data
    clipped = np.maximum(xd, eps)
    live = xd >= eps
    return record(np.log(clipped), (x,), lambda g: (np.where(live, g / clipped, 0),))


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    slope = np.where(x.data > 0, 1.0, alpha).astype(x.data.dtype)
    return record(x.data * slope, (x,), lambda g: (g * slope,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return record(out, (x,), lambda g: (g * (1 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1 / (1 + e), e / (1 + e)).astype(xd.dtype)
    return record(out, (x,), lambda g: (g * out * (1 - out),))


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def bw(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return record(out, (x,), bw)


def activation(x: Tensor, kind: str, alpha: float = 0.2, axis: int = 1) -> Tensor:
    """Apply one of relu, lrelu, tanh, sigmoid, log, softmax by name."""
    if kind == "relu":
        return relu(x)
    if kind == "lrelu":
        return leaky_relu(x, alpha)
    if kind == "tanh":
        return tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "log":
        return log(x)
    if kind == "softmax":
        return softmax(x, axis)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(x: Tensor, axis=None, kind: str = "sum", keepdims: bool = False) -> Tensor:
    """Sum, mean or biased variance over ``axis``."""
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise ValueError(f"{kind}: reducing over zero elements (shape {x.shape})")
    xd = x.data
    in_shape = x.shape
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(in_shape))

    if kind == "sum":
        out = xd.sum(axis=axes, keepdims=keepdims)
        bw = lambda g: (np.broadcast_to(g.reshape(kept_shape), in_shape),)
    elif kind == "mean":
        out = xd.mean(axis=axes, keepdims=keepdims)
        bw = lambda g: (np.broadcast_to(g.reshape(kept_shape) / count, in_shape),)
    elif kind == "var":
        centered = xd - xd.mean(axis=axes, keepdims=True)
        out = (centered * centered).mean(axis=axes, keepdims=keepdims)
        bw = lambda g: (g.reshape(kept_shape) * (2.0 / count) * centered,)
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    return record(np.asarray(out, dtype=xd.dtype), (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    in_shape = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(in_shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, index) -> Tensor:
    in_shape, dt = x.shape, x.data.dtype

    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis)))
                for i in (index if isinstance(index, tuple) else (index,)))

    def bw(g):
        full = np.zeros(in_shape, dtype=dt)
        if basic:
            full[index] = g  # basic indexing never repeats an element
        else:
            np.add.at(full, index, g)
        return (full,)

    return record(x.data[index], (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return record(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                  lambda g: tuple(np.split(g, splits, axis=axis)))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if grad is None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    grads = {id(loss): np.asarray(grad, dtype=loss.data.dtype)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Per-parameter comparison of analytic and central-difference gradients.

    The error for a parameter is the largest absolute discrepancy over the
    checked entries divided by the largest gradient magnitude seen in them
    (floored at ``atol``).
    """

    errors: dict = field(default_factory=dict)
    analytic: dict = field(default_factory=dict)
    numeric: dict = field(default_factory=dict)
    tol: float = 1e-3

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def failures(self) -> list:
        return [k for k, v in self.errors.items() if not v < self.tol]

    @property
    def ok(self) -> bool:
        return not self.failures


def finite_diff_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-3,
                      tol: float = 1e-3, max_entries: Optional[int] = None,
                      rng: Optional[np.random.Generator] = None,
                      atol: float = 1e-6) -> GradCheckReport:
    """Compare backward() against (f(θ+ε) − f(θ−ε)) / 2ε for each parameter.

    ``f`` takes no arguments and must read the parameters it is checked
    against.  With ``max_entries`` only that many randomly chosen entries of
    each parameter are perturbed.  ``atol`` floors the normalizing scale so
    gradients that are identically zero (a bias feeding a normalization) do not
    divide noise by noise.
    """
    if not 1e-4 <= eps <= 1e-2:
        raise ValueError(f"eps must lie in [1e-4, 1e-2], got {eps}")
    params = list(params)
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError("finite_diff_check: loss is not finite")
    loss.backward()

    report = GradCheckReport(tol=tol)
    for i, p in enumerate(params):
        name = p.name or f"param{i}"
        flat = p.data.reshape(-1)
        grad = np.zeros(p.size) if p.grad is None else p.grad.reshape(-1).astype(np.float64)
        idx = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            idx = np.sort(rng.choice(p.size, size=max_entries, replace=False))
        numeric = np.empty(len(idx))
        with no_grad():
            for j, k in enumerate(idx):
                orig = flat[k].copy()
                flat[k] = orig + eps
                hi = float(f().data.sum())
                flat[k] = orig - eps
                lo = float(f().data.sum())
                flat[k] = orig
                if not (np.isfinite(hi) and np.isfinite(lo)):
                    raise FloatingPointError(f"finite_diff_check: non-finite loss perturbing {name}")
                numeric[j] = (hi - lo) / (2 * eps)
        analytic = grad[idx]
        scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        err = float(np.abs(analytic - numeric).max(initial=0.0) / max(scale, atol))
        report.errors[name] = err
        report.analytic[name] = analytic
        report.numeric[name] = numeric
    return report
