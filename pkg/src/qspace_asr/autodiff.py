"""Reverse-mode automatic differentiation over dense numpy arrays.

A small tape-free engine: each operation records its parents and a
closure producing parent gradients from the output gradient. Broadcasting
is restricted to leading batch axes (use `expand` for anything else) so
every backward rule stays auditable. Forward evaluation is deterministic;
there is no global state.
"""

from __future__ import annotations

import numpy as np


class ShapeMismatch(ValueError):
    pass


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "name", "_parents", "_grads_fn")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None,
                 _parents=(), _grads_fn=None):
        self.values = np.asarray(values)
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in _parents
        )
        self.grad = None
        self.name = name
        self._parents = _parents
        self._grads_fn = _grads_fn

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values, requires_grad=False)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, grad={self.requires_grad}{tag})"


def tensor(values, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(values, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to `shape` by summing the leading batch axes."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


def _check_leading_broadcast(a: Tensor, b: Tensor, op: str):
    sa, sb = a.shape, b.shape
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(small) > 0 and big[len(big) - len(small):] != small:
        raise ShapeMismatch(f"{op}: shapes {sa} and {sb} are not suffix-compatible")


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_leading_broadcast(a, b, "add")
    out = a.values + b.values
    return Tensor(out, _parents=(a, b),
                  _grads_fn=lambda g: (_unbroadcast(g, a.shape),
                                       _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_leading_broadcast(a, b, "mul")
    out = a.values * b.values
    return Tensor(out, _parents=(a, b),
                  _grads_fn=lambda g: (_unbroadcast(g * b.values, a.shape),
                                       _unbroadcast(g * a.values, b.shape)))


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    return Tensor(a.values * s, _parents=(a,), _grads_fn=lambda g: (g * s,))


def sub(a, b) -> Tensor:
    return add(a, scale(b, -1.0))


def matmul(a, b) -> Tensor:
    """(..., m, k) @ (k, n) with batch-summed weight gradient, or fully
    batched (..., m, k) @ (..., k, n) with identical leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.values.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul: inner dims of {a.shape} and {b.shape} differ")
    if b.values.ndim == 2:
        out = a.values @ b.values

        def grads(g):
            ga = g @ b.values.T
            a2 = a.values.reshape(-1, a.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            return ga, a2.T @ g2

        return Tensor(out, _parents=(a, b), _grads_fn=grads)
    if a.values.ndim == b.values.ndim and a.shape[:-2] == b.shape[:-2]:
        out = a.values @ b.values

        def grads(g):
            return (g @ np.swapaxes(b.values, -1, -2),
                    np.swapaxes(a.values, -1, -2) @ g)

        return Tensor(out, _parents=(a, b), _grads_fn=grads)
    raise ShapeMismatch(f"matmul: unsupported shapes {a.shape} @ {b.shape}")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    return Tensor(a.values.reshape(shape), _parents=(a,),
                  _grads_fn=lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor(np.transpose(a.values, axes), _parents=(a,),
                  _grads_fn=lambda g: (np.transpose(g, inv),))


def expand(a, shape) -> Tensor:
    """Explicit broadcast to `shape` (numpy broadcasting rules)."""
    a = _as_tensor(a)
    shape = tuple(shape)
    out = np.broadcast_to(a.values, shape)
    aligned = (1,) * (len(shape) - a.values.ndim) + a.shape
    axes = tuple(i for i, (da, ds) in enumerate(zip(aligned, shape)) if da != ds)

    def grads(g):
        red = g.sum(axis=axes, keepdims=True) if axes else g
        return (red.reshape(a.shape),)

    return Tensor(out.copy(), _parents=(a,), _grads_fn=grads)


def concat(parts, axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = np.concatenate([p.values for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def grads(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return Tensor(out, _parents=tuple(parts), _grads_fn=grads)


def split(a, sections: int, axis: int) -> list[Tensor]:
    """Split into equal sections; each piece back-propagates into its slice."""
    a = _as_tensor(a)
    pieces = np.split(a.values, sections, axis=axis)
    outs = []
    for i, piece in enumerate(pieces):
        size = piece.shape[axis]

        def grads(g, i=i, size=size):
            full = np.zeros(a.shape, dtype=g.dtype)
            sl = [slice(None)] * a.values.ndim
            sl[axis] = slice(i * size, (i + 1) * size)
            full[tuple(sl)] = g
            return (full,)

        outs.append(Tensor(piece, _parents=(a,), _grads_fn=grads))
    return outs


def _axis_count(shape, axis):
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    axes = axis if isinstance(axis, tuple) else (axis,)
    return int(np.prod([shape[ax] for ax in axes]))


def sum_(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = a.values.sum(axis=axis)

    def grads(g):
        if axis is None:
            return (np.broadcast_to(np.asarray(g), a.shape).copy(),)
        g_exp = np.expand_dims(g, axis=axis)
        return (np.broadcast_to(g_exp, a.shape).copy(),)

    return Tensor(out, _parents=(a,), _grads_fn=grads)


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    n = _axis_count(a.shape, axis)
    return scale(sum_(a, axis=axis), 1.0 / n)


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    a = _as_tensor(a)
    mu = a.values.mean(axis=-1, keepdims=True)
    centered = a.values - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = centered * inv

    def grads(g):
        gy_mean = g.mean(axis=-1, keepdims=True)
        gyy_mean = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gy_mean - y * gyy_mean),)

    return Tensor(y, _parents=(a,), _grads_fn=grads)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    y = a.values - a.values.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def grads(g):
        ga = g * y
        dot = ga.sum(axis=axis, keepdims=True)
        ga -= y * dot
        return (ga,)

    return Tensor(y, _parents=(a,), _grads_fn=grads)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Tanh approximation of GELU (finite-difference tolerances assume it)."""
    a = _as_tensor(a)
    x = a.values
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def grads(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner
        return (g * dy,)

    return Tensor(y, _parents=(a,), _grads_fn=grads)


def mse(a, b) -> Tensor:
    """Mean squared error over all elements; scalar output."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.values - b.values
    n = diff.size
    out = np.asarray((diff**2).mean())

    def grads(g):
        ga = (2.0 / n) * diff * g
        return ga, -ga

    return Tensor(out, _parents=(a, b), _grads_fn=grads)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Exact reverse-mode gradients of a scalar loss.

    Populates `.grad` on every tensor in the graph and returns a map for
    the requires_grad leaves. Re-invocation on the same graph recomputes
    from scratch (grads are overwritten, not accumulated across calls).
    """
    if loss.values.ndim != 0:
        raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones((), dtype=loss.values.dtype)
    for node in reversed(order):
        if node._grads_fn is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._grads_fn(node.grad)):
            if not parent.requires_grad or g is None:
                continue
            if parent.grad is None:
                parent.grad = g  # may alias the child's grad; never mutated
            else:
                parent.grad = parent.grad + g
    return {n: n.grad for n in order if n.requires_grad and n._grads_fn is None
            and n.grad is not None}


def finite_diff_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Worst-coordinate relative error between backward and central differences.

    f: callable mapping a Tensor to a scalar Tensor. x is perturbed in place
    coordinate by coordinate (restored afterwards). Each coordinate's error
    is normalized by max(|fd|, |analytic|) floored at 0.1% of the largest
    gradient magnitude, so coordinates far below the gradient's scale are
    not dominated by difference-quotient round-off.
    """
    x.requires_grad = True
    loss = f(x)
    backward(loss)
    analytic = x.grad.copy() if x.grad is not None else np.zeros(x.shape)
    flat = x.values.reshape(-1)
    fd = np.zeros(flat.shape)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x).values)
        flat[i] = orig - eps
        lo = float(f(x).values)
        flat[i] = orig
        fd[i] = (hi - lo) / (2 * eps)
    fd = fd.reshape(x.shape)
    gmax = max(np.abs(fd).max(), np.abs(analytic).max(), 1e-10)
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(analytic)), 1e-3 * gmax)
    return float((np.abs(analytic - fd) / denom).max())
