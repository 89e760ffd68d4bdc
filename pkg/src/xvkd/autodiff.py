"""Minimal reverse-mode automatic differentiation over numpy arrays.

The engine records a computation graph of :class:`Tensor` nodes and supports
exactly the operations the speaker models need: broadcasting elementwise
arithmetic, (batched) matrix products, reductions, a handful of
nonlinearities, temporal context splicing for TDNN layers, and batch
normalization.  All internal compute is 64-bit; callers may store values in
32-bit form (checkpoints, target caches) and upcast at the boundary.

Gradients accumulate into leaf tensors until explicitly cleared, so calling
``backward()`` twice doubles every gradient exactly.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "DegenerateBatchError",
    "no_grad",
    "affine",
    "tdnn_conv",
    "context_splice",
    "batch_norm",
    "relu",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "clip",
    "maximum",
    "softmax",
    "logsumexp",
    "concat",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes do not conform to the operation's contract."""


class DegenerateBatchError(ValueError):
    """Batch statistics requested over fewer than two frames."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager that skips graph recording (inference-only passes)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A numpy array plus optional gradient buffer and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a one-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def clear_grad(self) -> None:
        self.grad = None

    # -- graph construction --------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: tuple["Tensor", ...], grad_fn) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._grad_fn = grad_fn
        return out

    # -- backward pass ---------------------------------------------------
    def backward(self) -> None:
        """Backpropagate from a scalar; accumulates into leaf ``grad`` buffers."""
        if self.data.size != 1:
            raise ShapeError(
                f"backward() requires a scalar, got shape {self.shape}"
            )
        if not self.requires_grad:
            return
        # Iterative topological sort; student/teacher graphs are deep.
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._grad_fn is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        a, b = self, _coerce(other)
        out_data = a.data + b.data

        def grad_fn(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._make(out_data, (a, b), grad_fn)

    __radd__ = __add__

    def __sub__(self, other):
        a, b = self, _coerce(other)
        out_data = a.data - b.data

        def grad_fn(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._make(out_data, (a, b), grad_fn)

    def __rsub__(self, other):
        return _coerce(other).__sub__(self)

    def __mul__(self, other):
        a, b = self, _coerce(other)
        out_data = a.data * b.data

        def grad_fn(g):
            return (
                _unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape),
            )

        return Tensor._make(out_data, (a, b), grad_fn)

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, _coerce(other)
        out_data = a.data / b.data

        def grad_fn(g):
            return (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            )

        return Tensor._make(out_data, (a, b), grad_fn)

    def __rtruediv__(self, other):
        return _coerce(other).__truediv__(self)

    def __neg__(self):
        a = self

        def grad_fn(g):
            return (-g,)

        return Tensor._make(-a.data, (a,), grad_fn)

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only constant exponents are supported")
        a, c = self, float(exponent)
        out_data = a.data**c

        def grad_fn(g):
            return (g * c * a.data ** (c - 1.0),)

        return Tensor._make(out_data, (a,), grad_fn)

    def __matmul__(self, other):
        a, b = self, _coerce(other)
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError("matmul operands must have ndim >= 2")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not conform")
        out_data = np.matmul(a.data, b.data)

        def grad_fn(g):
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
            return ga, gb

        return Tensor._make(out_data, (a, b), grad_fn)

    # -- reductions and shape ops -----------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        a = self
        out_data = a.data.sum(axis=axis, keepdims=keepdims)

        def grad_fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape),)

        return Tensor._make(out_data, (a,), grad_fn)

    def mean(self, axis=None, keepdims: bool = False):
        a = self
        count = a.size if axis is None else np.prod(
            [a.shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))]
        )
        return a.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        out_data = a.data.reshape(shape)

        def grad_fn(g):
            return (g.reshape(a.shape),)

        return Tensor._make(out_data, (a,), grad_fn)

    def swap_last_axes(self):
        """Transpose the trailing two axes (matrix transpose, batch-aware)."""
        a = self
        out_data = np.swapaxes(a.data, -1, -2)

        def grad_fn(g):
            return (np.swapaxes(g, -1, -2),)

        return Tensor._make(out_data, (a,), grad_fn)


class Parameter(Tensor):
    """A named trainable tensor; names are unique within a model."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise functions --------------------------------------------------

def relu(x: Tensor) -> Tensor:
    x = _coerce(x)
    out_data = np.maximum(x.data, 0.0)

    def grad_fn(g):
        return (g * (x.data > 0.0),)

    return Tensor._make(out_data, (x,), grad_fn)


def tanh(x: Tensor) -> Tensor:
    x = _coerce(x)
    out_data = np.tanh(x.data)

    def grad_fn(g):
        return (g * (1.0 - out_data * out_data),)

    return Tensor._make(out_data, (x,), grad_fn)


def exp(x: Tensor) -> Tensor:
    x = _coerce(x)
    out_data = np.exp(x.data)

    def grad_fn(g):
        return (g * out_data,)

    return Tensor._make(out_data, (x,), grad_fn)


def log(x: Tensor) -> Tensor:
    x = _coerce(x)
    out_data = np.log(x.data)

    def grad_fn(g):
        return (g / x.data,)

    return Tensor._make(out_data, (x,), grad_fn)


def sqrt(x: Tensor) -> Tensor:
    x = _coerce(x)
    out_data = np.sqrt(x.data)

    def grad_fn(g):
        return (g * (0.5 / out_data),)

    return Tensor._make(out_data, (x,), grad_fn)


def maximum(x: Tensor, floor: float) -> Tensor:
    """Elementwise max with a constant; gradient is zero below the floor."""
    x = _coerce(x)
    f = float(floor)
    out_data = np.maximum(x.data, f)

    def grad_fn(g):
        return (g * (x.data > f),)

    return Tensor._make(out_data, (x,), grad_fn)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    x = _coerce(x)
    out_data = np.clip(x.data, lo, hi)

    def grad_fn(g):
        return (g * ((x.data >= lo) & (x.data <= hi)),)

    return Tensor._make(out_data, (x,), grad_fn)


# -- softmax family ----------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis`."""
    x = _coerce(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - inner),)

    return Tensor._make(out_data, (x,), grad_fn)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = _coerce(x)
    m = x.data.max(axis=axis, keepdims=True)
    s = np.exp(x.data - m).sum(axis=axis, keepdims=True)
    out_keep = m + np.log(s)
    out_data = out_keep if keepdims else np.squeeze(out_keep, axis=axis)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        soft = np.exp(x.data - out_keep)
        return (g * soft,)

    return Tensor._make(out_data, (x,), grad_fn)


def concat(tensors, axis: int = -1) -> Tensor:
    """Concatenate tensors along `axis`."""
    parts = tuple(_coerce(t) for t in tensors)
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, offsets, axis=axis))

    return Tensor._make(out_data, parts, grad_fn)


# -- layer operations ---------------------------------------------------------

def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Row-wise fully-connected map: ``out[t] = x[t] @ weight + bias``."""
    x, weight, bias = _coerce(x), _coerce(weight), _coerce(bias)
    if x.shape[-1] != weight.shape[-2]:
        raise ShapeError(
            f"affine input width {x.shape[-1]} does not match weight rows {weight.shape[-2]}"
        )
    if weight.shape[-1] != bias.shape[-1]:
        raise ShapeError(
            f"affine bias width {bias.shape[-1]} does not match weight cols {weight.shape[-1]}"
        )
    return (x @ weight) + bias


def context_splice(x: Tensor, offsets) -> Tensor:
    """Concatenate temporally shifted copies of `x` along the feature axis.

    Frames beyond the sequence boundary contribute zeros (symmetric zero
    padding), so the output keeps the input frame count.  The frame axis is
    ``-2``; leading batch axes are preserved.
    """
    x = _coerce(x)
    offsets = tuple(int(o) for o in offsets)
    if not offsets:
        raise ShapeError("context offsets must be non-empty")
    if list(offsets) != sorted(offsets):
        raise ShapeError("context offsets must be sorted")
    if x.ndim < 2:
        raise ShapeError("context_splice expects at least 2 dimensions (T, d)")
    T, d = x.shape[-2], x.shape[-1]
    if T == 0:
        raise ShapeError("context_splice on an empty sequence")
    k = len(offsets)
    out_shape = x.shape[:-1] + (k * d,)
    out_data = np.zeros(out_shape, dtype=np.float64)
    spans = []
    for i, off in enumerate(offsets):
        lo, hi = max(0, -off), min(T, T - off)
        spans.append((i, off, lo, hi))
        if lo < hi:
            out_data[..., lo:hi, i * d : (i + 1) * d] = x.data[..., lo + off : hi + off, :]

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        for i, off, lo, hi in spans:
            if lo < hi:
                gx[..., lo + off : hi + off, :] += g[..., lo:hi, i * d : (i + 1) * d]
        return (gx,)

    return Tensor._make(out_data, (x,), grad_fn)


def tdnn_conv(x: Tensor, weight: Tensor, bias: Tensor, context_offsets) -> Tensor:
    """Time-delay layer: splice frames at `context_offsets`, then affine map.

    With offsets ``(0,)`` this reduces exactly to :func:`affine`.
    """
    spliced = context_splice(x, context_offsets)
    return affine(spliced, weight, bias)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-3,
) -> Tensor:
    """Normalize over all frame axes per feature (the trailing axis).

    Training mode uses batch statistics (biased variance) and updates the
    running buffers in place; inference mode uses the running buffers.
    The variance floor is kept at 1e-3 so near-dead features do not produce
    curvature beyond what central finite differences can resolve.
    """
    x = _coerce(x)
    n_frames = int(np.prod(x.shape[:-1]))
    if training:
        if n_frames < 2:
            raise DegenerateBatchError(
                f"batch_norm in training mode needs >= 2 frames, got {n_frames}"
            )
        axes = tuple(range(x.ndim - 1))
        m = x.mean(axis=axes, keepdims=True)
        centered = x - m
        v = (centered * centered).mean(axis=axes, keepdims=True)
        out = centered / sqrt(v + eps) * gamma + beta
        running_mean *= 1.0 - momentum
        running_mean += momentum * m.data.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * v.data.reshape(-1)
        return out
    xhat = (x - running_mean) / np.sqrt(running_var + eps)
    return xhat * gamma + beta


# -- finite-difference gradient check ----------------------------------------

def grad_check(
    f,
    params,
    epsilon: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must be a deterministic nullary callable returning a scalar
    :class:`Tensor` built from `params`.  Returns the maximum over checked
    entries of ``|analytic - numeric| / max(1, |analytic|, |numeric|)``;
    a non-finite loss anywhere is reported as ``inf``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    params = list(params)
    for p in params:
        p.clear_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        return float("inf")
    loss.backward()
    analytic = [
        (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for p in params
    ]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            idx = rng.choice(n, size=max_entries, replace=False)
        else:
            idx = np.arange(n)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = float(f().data)
            flat[i] = orig - epsilon
            lo = float(f().data)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                return float("inf")
            numeric = (hi - lo) / (2.0 * epsilon)
            ana = float(a.reshape(-1)[i])
            err = abs(ana - numeric) / max(1.0, abs(ana), abs(numeric))
            worst = max(worst, err)
    for p in params:
        p.clear_grad()
    return worst
