"""Dense tensors with reverse-mode differentiation.

Every value the model computes is a :class:`Tensor`: a numpy array plus an
optional backward record (operation tag, parents, and a closure mapping the
output cotangent to parent cotangents).  Gradients are accumulated by
addition; graph inputs are never mutated.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the dtype used for newly created tensors (float64 or float32)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class ShapeError(ValueError):
    pass


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """n-dimensional real array participating in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "is_spike")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (),
                 backward_fn: BackwardFn | None = None, op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.is_spike = False

    # -- construction helpers -------------------------------------------------
    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn: BackwardFn,
                op: str) -> "Tensor":
        """Create a result node; the record is dropped when no parent needs grad."""
        parents = tuple(parents)
        if any(p.requires_grad for p in parents):
            return cls(data, parents=parents, backward_fn=backward_fn, op=op)
        out = cls(data, op=op)
        return out

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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ------------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis, keepdims)

    def backward(self, seed=None):
        return backward(self, seed)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=_DEFAULT_DTYPE), requires_grad=True)


# -- broadcasting ------------------------------------------------------------

def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    # Right-aligned: each dim pair must match or one side must be 1 / absent.
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a} and {b} do not conform") from None


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast cotangent back down to ``shape``."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data + b.data, (a, b),
                          lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data - b.data, (a, b),
                          lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    """Hadamard product."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("hadamard", a.shape, b.shape)
    ad, bd = a.data, b.data
    return Tensor.from_op(ad * bd, (a, b),
                          lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)),
                          "hadamard")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor.from_op(out, (a, b),
                          lambda g: (unbroadcast(g / bd, ad.shape),
                                     unbroadcast(-g * out / bd, bd.shape)), "div")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor.from_op(np.log(ad), (a,), lambda g: (g / ad,), "log")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad)
    return Tensor.from_op(out, (a,), lambda g: (g * _sigmoid(ad),), "softplus")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor.from_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor.from_op(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy semantics (1-D operands and leading batch dims)."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {ad.shape} and {bd.shape}")
    if ad.shape[-1] != (bd.shape[0] if bd.ndim == 1 else bd.shape[-2]):
        raise ShapeError(f"matmul: shapes {ad.shape} and {bd.shape} do not conform")
    out = np.matmul(ad, bd)

    def backward(g):
        a2 = ad[None, :] if ad.ndim == 1 else ad
        b2 = bd[:, None] if bd.ndim == 1 else bd
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
        gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
        if ad.ndim == 1:
            ga = ga[..., 0, :]
        if bd.ndim == 1:
            gb = gb[..., 0]
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return Tensor.from_op(out, (a, b), backward, "matmul")


def affine(x, weight, bias=None) -> Tensor:
    """Pointwise affine map over the last axis: ``x @ weight + bias``.

    This is how 1x1 convolutions over tokens are expressed.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"affine: input {x.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (wd.shape[1],):
            raise ShapeError(f"affine: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        gx = g @ wd.T
        g2 = g.reshape(-1, g.shape[-1])
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return Tensor.from_op(out, parents, backward, "affine")


# -- reductions ------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand(g: np.ndarray, axes: tuple, keepdims: bool) -> np.ndarray:
    if keepdims:
        return g
    for ax in sorted(axes):
        g = np.expand_dims(g, ax)
    return g


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return Tensor.from_op(np.asarray(out), (a,),
                          lambda g: (np.broadcast_to(_expand(g, axes, keepdims), shape),), "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    count = int(np.prod([shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)
    return Tensor.from_op(np.asarray(out), (a,),
                          lambda g: (np.broadcast_to(_expand(g, axes, keepdims), shape) / count,),
                          "mean")


def max_(a, axis=None, keepdims=False) -> Tensor:
    """Max-reduce; the cotangent goes to the first maximal entry along the axis."""
    a = as_tensor(a)
    ad = a.data
    if axis is None:
        flat = ad.reshape(-1)
        idx = int(np.argmax(flat))

        def backward_all(g):
            out = np.zeros(flat.shape, dtype=g.dtype if np.ndim(g) else ad.dtype)
            out[idx] = g
            return (out.reshape(ad.shape),)

        val = flat[idx]
        if keepdims:
            val = val.reshape((1,) * ad.ndim)
        return Tensor.from_op(np.asarray(val), (a,), backward_all, "max")
    if not isinstance(axis, int):
        raise ShapeError("max: reduce over a single axis only")
    ax = axis % ad.ndim
    idx = np.expand_dims(np.argmax(ad, axis=ax), ax)
    out = np.take_along_axis(ad, idx, axis=ax)
    if not keepdims:
        out = np.squeeze(out, ax)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, ax)
        res = np.zeros(ad.shape, dtype=gk.dtype)
        np.put_along_axis(res, idx, gk, axis=ax)
        return (res,)

    return Tensor.from_op(out, (a,), backward, "max")


def min_(a, axis=None, keepdims=False) -> Tensor:
    return -max_(-as_tensor(a), axis, keepdims)


# -- index permutations ------------------------------------------------------------

def reverse(a, axis: int) -> Tensor:
    a = as_tensor(a)
    ax = axis % a.ndim
    return Tensor.from_op(np.flip(a.data, ax), (a,), lambda g: (np.flip(g, ax),), "reverse")


def getitem(a, index) -> Tensor:
    """Basic or advanced indexing; repeated advanced indices accumulate."""
    a = as_tensor(a)
    shape = a.shape
    out = a.data[index]
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(p is None or p is Ellipsis or isinstance(p, (int, slice, np.integer)) for p in parts)

    def backward(g):
        res = np.zeros(shape, dtype=g.dtype)
        if basic:
            res[index] = g
        else:
            np.add.at(res, index, g)
        return (res,)

    return Tensor.from_op(np.array(out), (a,), backward, "slice")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return Tensor.from_op(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor.from_op(np.transpose(a.data, axes), (a,),
                          lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    out = np.broadcast_to(a.data, shape)
    return Tensor.from_op(out, (a,), lambda g: (unbroadcast(g, old),), "broadcast")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} do not conform")
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return Tensor.from_op(out, ts, lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    shape = ts[0].shape
    for t in ts[1:]:
        if t.shape != shape:
            raise ShapeError(f"stack: shapes {shape} and {t.shape} do not conform")
    ax = axis % (len(shape) + 1)
    out = np.stack([t.data for t in ts], axis=ax)
    n = len(ts)
    return Tensor.from_op(out, ts,
                          lambda g: tuple(np.take(g, i, axis=ax) for i in range(n)), "stack")


def unstack(a, axis: int = 0) -> list[Tensor]:
    a = as_tensor(a)
    ax = axis % a.ndim
    index = [slice(None)] * a.ndim
    out = []
    for i in range(a.shape[ax]):
        index[ax] = i
        out.append(getitem(a, tuple(index)))
    return out


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(np.where(cond, a.data, b.data), (a, b),
                          lambda g: (unbroadcast(np.where(cond, g, 0.0), sa),
                                     unbroadcast(np.where(cond, 0.0, g), sb)), "where")


# -- differentiation ------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(output: Tensor, seed=None, inputs: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Propagate cotangents from ``output`` to every reachable leaf.

    Leaves that require grad have their ``.grad`` accumulated.  The return
    value maps ``id(tensor)`` to its cotangent for every node visited; when
    ``inputs`` is given, unreachable inputs are reported as zeros.
    """
    if seed is None:
        if output.size != 1:
            raise ValueError(f"backward: output of shape {output.shape} is not scalar; "
                             "supply a seed cotangent")
        seed = np.ones(output.shape, dtype=output.data.dtype)
    else:
        seed = np.asarray(seed, dtype=output.data.dtype)
        if seed.shape != output.shape:
            raise ShapeError(f"backward: seed {seed.shape} does not match output {output.shape}")
    grads: dict[int, np.ndarray] = {id(output): seed}
    if output.requires_grad:
        for node in reversed(_topo_order(output)):
            g = grads.get(id(node))
            if g is None:
                continue
            if node.backward_fn is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            pgs = node.backward_fn(g)
            for p, pg in zip(node.parents, pgs):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    if inputs is not None:
        for t in inputs:
            grads.setdefault(id(t), np.zeros(t.shape, dtype=t.data.dtype))
    return grads


def grad(f: Callable[..., Tensor], *xs: Tensor) -> list[np.ndarray]:
    """Gradients of scalar ``f(*xs)`` with respect to each input."""
    leaves = [Tensor(np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64),
                     requires_grad=True) for x in xs]
    out = f(*leaves)
    g = backward(out, inputs=leaves)
    return [g[id(t)] for t in leaves]


def finite_difference_grad(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    out = np.zeros_like(base)
    flat = base.reshape(-1)
    res = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(np.sum(f(Tensor(base.copy())).data))
        flat[i] = orig - eps
        fm = float(np.sum(f(Tensor(base.copy())).data))
        flat[i] = orig
        res[i] = (fp - fm) / (2.0 * eps)
    return out
