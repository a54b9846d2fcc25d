"""Dense float64 tensors with a reverse-mode tape.

Operations are recorded on the innermost active :class:`Tape` whenever at
least one input requires a gradient. Outside a tape every op is a plain
forward computation, which is what evaluation code uses.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = dot(x, x)
    >>> tape.backward(y)[x].tolist()
    [2.0, 4.0]
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

NORM_EPS = 1e-12

_local = threading.local()


class ShapeError(ValueError):
    """Raised when an op receives inputs whose shapes do not conform."""


class NonFiniteError(ArithmeticError):
    """Raised when a finite-difference probe hits a NaN or Inf."""

    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate


class Tensor:
    """Immutable n-d array of float64 values, optionally tracked for gradients."""

    __slots__ = ("values", "requires_grad", "grad", "__weakref__")

    def __init__(self, values, requires_grad=False):
        arr = np.array(values, dtype=np.float64)
        arr.setflags(write=False)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    def item(self):
        return float(self.values)

    __float__ = item

    def numpy(self):
        return np.array(self.values)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # light operator sugar over the op functions
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __mul__(self, k):
        return scale(self, k)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable


@dataclass
class Tape:
    """Ordered record of ops; inputs of every record precede it."""

    records: list = field(default_factory=list)

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, output=None, seed=None):
        """Propagate ``seed`` from ``output`` back to every leaf.

        Returns a dict keyed by leaf tensor. Leaf ``.grad`` attributes are
        accumulated as well. An empty tape yields an empty dict.
        """
        if not self.records:
            return {}
        if output is None:
            output = self.records[-1].output
        seed = np.ones(output.shape) if seed is None else np.asarray(seed, dtype=np.float64)
        if seed.shape != output.shape:
            raise ShapeError(f"backward: seed shape {seed.shape} != output shape {output.shape}")

        grads = {id(output): seed}
        produced = set()
        for rec in reversed(self.records):
            produced.add(id(rec.output))
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi

        leaves = {}
        for rec in self.records:
            for inp in rec.inputs:
                if inp.requires_grad and id(inp) not in produced and id(inp) in grads:
                    leaves[id(inp)] = inp
        if output.requires_grad and id(output) not in produced:
            leaves[id(output)] = output
        out = _LeafGrads()
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g if leaf.grad is None else leaf.grad + g
            out[leaf] = g
        return out


class _LeafGrads(dict):
    """dict keyed by tensor identity (tensors are unhashable by value)."""

    def __setitem__(self, k, v):
        super().__setitem__(id(k), (k, v))

    def __getitem__(self, k):
        return super().__getitem__(id(k))[1]

    def __contains__(self, k):
        return super().__contains__(id(k))

    def get(self, k, default=None):
        return self[k] if k in self else default

    def items(self):
        return list(super().values())


def backward(tape, seed, output=None):
    return tape.backward(output, seed)


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _emit(op, inputs, values, backward_fn):
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=requires)
    tape = _active_tape()
    if requires and tape is not None:
        tape.records.append(_Record(op, tuple(inputs), out, backward_fn))
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, *shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {' and '.join(map(str, shapes))}") from None


# ---------------------------------------------------------------- ops


def matmul(a, b):
    """np.matmul semantics, including broadcast batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    _check_broadcast("matmul", a.shape[:-2], b.shape[:-2])
    av, bv = a.values, b.values

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, b.shape)
        return ga, gb

    return _emit("matmul", (a, b), av @ bv, back)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.shape, b.shape)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), a.values + b.values, back)


def scale(a, k):
    a = as_tensor(a)
    k = float(k)
    return _emit("scale", (a,), a.values * k, lambda g: (g * k,))


def relu(a):
    a = as_tensor(a)
    mask = a.values > 0
    return _emit("relu", (a,), np.where(mask, a.values, 0.0), lambda g: (g * mask,))


def mean_over_region(a, region=None, axes=None):
    """Mean over a hyper-rectangle of ``axes``; those axes are dropped.

    ``region`` is a tuple of slices, one per reduced axis (default: whole
    axis). ``axes`` defaults to all axes, giving a scalar.
    """
    a = as_tensor(a)
    axes = tuple(range(a.ndim)) if axes is None else tuple(ax % a.ndim for ax in axes)
    region = (slice(None),) * len(axes) if region is None else tuple(region)
    if len(region) != len(axes):
        raise ShapeError(f"mean_over_region: {len(region)} slices for {len(axes)} axes")
    index = [slice(None)] * a.ndim
    for ax, sl in zip(axes, region):
        index[ax] = sl
    index = tuple(index)
    block = a.values[index]
    count = int(np.prod([block.shape[ax] for ax in axes]))
    if count == 0:
        raise ShapeError(f"mean_over_region: empty region {region} on shape {a.shape}")
    out = block.mean(axis=axes)

    def back(g):
        full = np.zeros(a.shape)
        full[index] = np.expand_dims(g, axes) / count
        return (full,)

    return _emit("mean_over_region", (a,), out, back)


def l2_normalize(a, axis=-1):
    """Unit-normalize along ``axis``; vectors with norm < 1e-12 map to zero."""
    a = as_tensor(a)
    v = a.values
    norm = np.sqrt((v * v).sum(axis=axis, keepdims=True))
    ok = norm >= NORM_EPS
    safe = np.where(ok, norm, 1.0)
    y = np.where(ok, v / safe, 0.0)

    def back(g):
        proj = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(ok, (g - y * proj) / safe, 0.0),)

    return _emit("l2_normalize", (a,), y, back)


def dot(a, b):
    """Inner product over the last axis, broadcasting the leading ones."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"dot: last axes differ, {a.shape} vs {b.shape}")
    _check_broadcast("dot", a.shape, b.shape)
    av, bv = a.values, b.values

    def back(g):
        g = g[..., None]
        ga = _unbroadcast(g * bv, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * av, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("dot", (a, b), (av * bv).sum(axis=-1), back)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: cannot join {shapes} on axis {axis}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _emit("concat", tuple(tensors), out, back)


def take(a, index):
    """numpy-style indexing (basic or advanced); gradients scatter-add back."""
    a = as_tensor(a)
    try:
        out = a.values[index]
    except IndexError as err:
        raise ShapeError(f"slice: {err} for shape {a.shape}") from None

    def back(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return (full,)

    return _emit("slice", (a,), out, back)


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.values.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _emit("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", (a,), a.values.transpose(axes), lambda g: (g.transpose(inverse),))


def logsumexp(a, mask=None):
    """log Σ exp over the last axis, restricted to ``mask`` entries if given.

    Max-shifted for stability. Rows with an empty mask produce -inf and
    must not be used downstream.
    """
    a = as_tensor(a)
    v = a.values
    if mask is None:
        mask = np.ones(v.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), v.shape)
    masked = np.where(mask, v, -np.inf)
    m = masked.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(masked - m), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        out = (np.log(s) + m)[..., 0]
    probs = np.divide(e, s, out=np.zeros_like(e), where=s > 0)
    return _emit("logsumexp", (a,), out, lambda g: (g[..., None] * probs,))


def sum_all(a):
    """Scalar sum, built from mean_over_region."""
    a = as_tensor(a)
    return scale(mean_over_region(a), a.values.size)


# --------------------------------------------------------- gradient check


def finite_diff_check(fn, x, step=1e-6):
    """Largest |analytic - central difference| / max(1, |analytic|).

    ``fn`` maps a :class:`Tensor` to a scalar :class:`Tensor` using the ops
    in this module.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(as_tensor(x).values, dtype=np.float64)
    leaf = Tensor(x0, requires_grad=True)
    with Tape() as tape:
        out = fn(leaf)
    if out.values.size != 1:
        raise ShapeError(f"finite_diff_check: fn must return a scalar, got {out.shape}")
    out = out if out.ndim == 0 else reshape(out, ())
    analytic = tape.backward(out).get(leaf, np.zeros_like(x0))
    if not np.all(np.isfinite(analytic)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(analytic))[0])
        raise NonFiniteError(f"non-finite analytic gradient at {bad}", bad)

    worst = 0.0
    flat = x0.reshape(-1)
    for k in range(flat.size):
        coord = np.unravel_index(k, x0.shape)
        plus, minus = flat.copy(), flat.copy()
        plus[k] += step
        minus[k] -= step
        fp = fn(Tensor(plus.reshape(x0.shape))).values
        fm = fn(Tensor(minus.reshape(x0.shape))).values
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NonFiniteError(f"non-finite function value near coordinate {coord}", coord)
        numeric = (float(fp.sum()) - float(fm.sum())) / (2 * step)
        a = float(analytic[coord])
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "as_tensor",
    "backward",
    "matmul",
    "add",
    "scale",
    "relu",
    "mean_over_region",
    "l2_normalize",
    "dot",
    "concat",
    "take",
    "reshape",
    "transpose",
    "logsumexp",
    "sum_all",
    "finite_diff_check",
]

ForwardOp = Callable[..., Tensor]
OPS: dict[str, ForwardOp] = {
    "matmul": matmul,
    "add": add,
    "scale": scale,
    "relu": relu,
    "mean_over_region": mean_over_region,
    "l2_normalize": l2_normalize,
    "dot": dot,
    "concat": concat,
    "slice": take,
    "reshape": reshape,
    "transpose": transpose,
    "logsumexp": logsumexp,
}


def forward_op(kind: str, *inputs: Sequence, **kwargs) -> Tensor:
    """Dispatch by op name; unknown kinds are rejected."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ShapeError(f"unsupported op kind {kind!r}") from None
    return fn(*inputs, **kwargs)
