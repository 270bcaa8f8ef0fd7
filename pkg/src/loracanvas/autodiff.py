"""Dense float64 tensors with reverse-mode differentiation.

Every kernel needed to differentiate the attention constraint losses with
respect to a latent is implemented here: matrix products, row softmax
(plain and key-masked), top-k means, axis max-projections, row layer
normalization, 2x2 average pooling, nearest-neighbour upsampling, gathers
and concatenation. Each traced tensor doubles as its own tape node: it
remembers the kernel that produced it (``op``), its ``parents`` and a
vector-Jacobian closure. ``grad`` replays the tape once in reverse
topological order. ``finite_difference_gradient`` is the independent
oracle used to cross-check every backward rule.

Tensors are immutable values (the underlying arrays are write-protected),
so they are safe to share across threads; a tape only ever lives inside a
single guidance iteration.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ArgumentError, LineageError, NumericError, ShapeError

_VJP = Callable[[np.ndarray], tuple]


class Tensor:
    """Immutable n-dimensional float64 array, optionally recorded on tape."""

    __slots__ = ("data", "requires_grad", "op", "parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True)
        _check_finite(arr, "tensor literal")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self._vjp: _VJP | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        tag = f" op={self.op}" if self.op else ""
        return f"Tensor(shape={self.data.shape}{tag}, traced={self.requires_grad})"

    def __float__(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"cannot convert shape {self.data.shape} to a scalar")
        return float(self.data.reshape(()))

    # -- arithmetic sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div_scalar(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} produced non-finite values")


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor], vjp: _VJP) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    data = np.asarray(data, dtype=np.float64)
    if data.ndim and not data.flags.c_contiguous:
        data = np.ascontiguousarray(data)
    if data.flags.writeable:
        data.flags.writeable = False
    out.data = data
    traced = any(p.requires_grad for p in parents)
    out.requires_grad = traced
    if traced:
        out.op = op
        out.parents = tuple(parents)
        out._vjp = vjp
    else:
        # constants drop their lineage so dead subgraphs can be collected
        out.op = None
        out.parents = ()
        out._vjp = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise kernels --------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc
    return _result(data, "add", (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from exc
    return _result(data, "sub", (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b) -> Tensor:
    """Hadamard product with the limited broadcasting the pipeline needs."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc
    return _result(data, "mul", (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


def div_scalar(a: Tensor, scalar) -> Tensor:
    a = _as_tensor(a)
    s = float(scalar)
    if s == 0.0:
        raise ArgumentError("division by zero")
    return _result(a.data / s, "div_scalar", (a,), lambda g: (g / s,))


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _result(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


# -- linear algebra --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ ({a.shape} x {b.shape})")
    data = a.data @ b.data
    return _result(data, "matmul", (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g))


def transpose2d(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose2d expects a 2-D tensor")
    return _result(a.data.T, "transpose2d", (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(n) for n in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    old = a.shape
    return _result(a.data.reshape(shape), "reshape", (a,),
                   lambda g: (g.reshape(old),))


# -- softmax family ---------------------------------------------------------


def softmax_rows(x: Tensor) -> Tensor:
    """Row-stochastic softmax, computed with max subtraction."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("softmax_rows expects a 2-D tensor")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return _result(y, "softmax_rows", (x,), vjp)


def masked_softmax_rows(x: Tensor, allowed: np.ndarray) -> Tensor:
    """Softmax restricted to permitted keys; forbidden entries are exactly 0.

    Equivalent to adding -inf to forbidden logits before a plain softmax,
    fused into one kernel so no public tensor ever holds an infinity.
    """
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("masked_softmax_rows expects a 2-D tensor")
    allowed = np.asarray(allowed, dtype=bool)
    if allowed.shape != x.shape:
        raise ShapeError(f"mask shape {allowed.shape} does not match {x.shape}")
    if not allowed.any(axis=1).all():
        raise ArgumentError("a row has no permitted keys")
    neg_inf = np.where(allowed, x.data, -np.inf)
    shifted = neg_inf - neg_inf.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return _result(y, "masked_softmax_rows", (x,), vjp)


def layernorm_rows(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization (no learned affine)."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("layernorm_rows expects a 2-D tensor")
    mu = x.data.mean(axis=1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv

    def vjp(g):
        gm = g.mean(axis=1, keepdims=True)
        gym = (g * y).mean(axis=1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _result(y, "layernorm_rows", (x,), vjp)


# -- selection kernels -------------------------------------------------------


def topk_mean(x: Tensor, k: int) -> Tensor:
    """Mean of the k largest elements; ties resolved by ascending index.

    The subgradient flows only to the selected elements.
    """
    x = _as_tensor(x)
    k = int(k)
    if k < 1 or k > x.size:
        raise ArgumentError(f"k={k} outside [1, {x.size}]")
    flat = x.data.reshape(-1)
    # stable sort on negated values keeps equal entries in index order
    idx = np.argsort(-flat, kind="stable")[:k]
    data = np.asarray(flat[idx].mean())
    shape = x.shape

    def vjp(g):
        out = np.zeros(flat.size)
        out[idx] = float(g) / k
        return (out.reshape(shape),)

    return _result(data, "topk_mean", (x,), vjp)


def axis_max_project(x: Tensor, axis: str) -> Tensor:
    """Squeeze a 2-D map to a vector by max over one axis.

    ``axis="rows"`` maxes over rows (output indexed by column), ``"cols"``
    over columns. The gradient routes to the first argmax on ties.
    """
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("axis_max_project expects a 2-D tensor")
    if axis not in ("rows", "cols"):
        raise ArgumentError(f"axis must be 'rows' or 'cols', got {axis!r}")
    ax = 0 if axis == "rows" else 1
    data = x.data.max(axis=ax)
    arg = x.data.argmax(axis=ax)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        if ax == 0:
            out[arg, np.arange(shape[1])] = g
        else:
            out[np.arange(shape[0]), arg] = g
        return (out,)

    return _result(data, "axis_max_project", (x,), vjp)


def take(x: Tensor, indices) -> Tensor:
    """Gather entries of a 1-D tensor."""
    x = _as_tensor(x)
    if x.data.ndim != 1:
        raise ShapeError("take expects a 1-D tensor")
    idx = np.asarray(indices, dtype=np.intp)
    data = x.data[idx]
    n = x.size

    def vjp(g):
        out = np.zeros(n)
        np.add.at(out, idx, g)
        return (out,)

    return _result(data, "take", (x,), vjp)


def take2d(x: Tensor, rows, cols) -> Tensor:
    """Gather the submatrix at the given row and column index lists."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("take2d expects a 2-D tensor")
    ri = np.asarray(rows, dtype=np.intp)
    ci = np.asarray(cols, dtype=np.intp)
    if ri.size == 0 or ci.size == 0:
        raise ArgumentError("take2d needs non-empty index lists")
    grid = np.ix_(ri, ci)
    data = x.data[grid]
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, grid, g)
        return (out,)

    return _result(data, "take2d", (x,), vjp)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("slice_cols expects a 2-D tensor")
    if not (0 <= start < stop <= x.shape[1]):
        raise ArgumentError(f"column range [{start}, {stop}) invalid for {x.shape}")
    data = x.data[:, start:stop]
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return _result(data, "slice_cols", (x,), vjp)


def column(x: Tensor, j: int) -> Tensor:
    """Extract column j of a 2-D tensor as a 1-D vector."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("column expects a 2-D tensor")
    if not (0 <= j < x.shape[1]):
        raise ArgumentError(f"column {j} out of range for {x.shape}")
    data = x.data[:, j]
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        out[:, j] = g
        return (out,)

    return _result(data, "column", (x,), vjp)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ArgumentError("concat needs at least one tensor")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(data, "concat", parts, vjp)


# -- reductions ---------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _result(np.asarray(x.data.sum()), "sum_all", (x,),
                   lambda g: (np.full(shape, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    n = x.size
    return _result(np.asarray(x.data.mean()), "mean_all", (x,),
                   lambda g: (np.full(shape, float(g) / n),))


# -- spatial kernels ----------------------------------------------------------


def avg_pool_2x2(x: Tensor, height: int, width: int) -> Tensor:
    """2x2 mean pooling of a (h*w, d) pixel-major feature matrix."""
    x = _as_tensor(x)
    if x.data.ndim != 2 or x.shape[0] != height * width:
        raise ShapeError(f"expected ({height * width}, d), got {x.shape}")
    if height % 2 or width % 2:
        raise ShapeError(f"pooling needs even extents, got {height}x{width}")
    d = x.shape[1]
    data = x.data.reshape(height // 2, 2, width // 2, 2, d).mean(axis=(1, 3))
    data = data.reshape((height // 2) * (width // 2), d)

    def vjp(g):
        g4 = g.reshape(height // 2, 1, width // 2, 1, d) / 4.0
        out = np.broadcast_to(g4, (height // 2, 2, width // 2, 2, d))
        return (out.reshape(height * width, d),)

    return _result(data, "avg_pool_2x2", (x,), vjp)


def upsample_nearest_2x(x: Tensor, height: int, width: int) -> Tensor:
    """Nearest-neighbour 2x upsampling of a (h*w, d) feature matrix."""
    x = _as_tensor(x)
    if x.data.ndim != 2 or x.shape[0] != height * width:
        raise ShapeError(f"expected ({height * width}, d), got {x.shape}")
    d = x.shape[1]
    grid = x.data.reshape(height, 1, width, 1, d)
    data = np.broadcast_to(grid, (height, 2, width, 2, d)).reshape(4 * height * width, d)

    def vjp(g):
        return (g.reshape(height, 2, width, 2, d).sum(axis=(1, 3)).reshape(height * width, d),)

    return _result(data, "upsample_nearest_2x", (x,), vjp)


# -- reverse-mode driver --------------------------------------------------------


def grad(root: Tensor, wrt: Tensor) -> Tensor:
    """Exact reverse-mode gradient of a scalar root with respect to wrt.

    wrt must be a traced tensor; if the root does not depend on it the
    gradient is a zero tensor.
    """
    if not isinstance(root, Tensor) or root.size != 1:
        raise ArgumentError("grad expects a scalar root tensor")
    if not isinstance(wrt, Tensor) or not wrt.requires_grad:
        raise LineageError("wrt is not a traced tensor")

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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    if id(wrt) not in seen:
        return Tensor(np.zeros(wrt.shape))

    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node.parents, node._vjp(g)):
            if not parent.requires_grad or pg is None:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg

    result = grads.get(id(wrt), np.zeros(wrt.shape))
    _check_finite(result, "grad")
    return Tensor(result)


def finite_difference_gradient(f: Callable[[Tensor], object], x: Tensor,
                               eps: float = 1e-6) -> Tensor:
    """Central-difference gradient estimate, one coordinate at a time."""
    if eps <= 0:
        raise ArgumentError("eps must be positive")
    x = _as_tensor(x)
    base = x.data.copy()
    flat = base.reshape(-1)
    out = np.zeros(flat.size)
    for i in range(flat.size):
        probe = flat.copy()
        probe[i] += eps
        f_plus = float(f(Tensor(probe.reshape(base.shape))))
        probe[i] = flat[i] - eps
        f_minus = float(f(Tensor(probe.reshape(base.shape))))
        out[i] = (f_plus - f_minus) / (2.0 * eps)
    return Tensor(out.reshape(base.shape))


def max_relative_error(a, b) -> float:
    """Largest absolute difference, scaled by the larger infinity norm.

    This is the usual gradient-check metric: it stays meaningful when
    individual entries are near zero and the difference signal would
    otherwise be dominated by finite-difference noise.
    """
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare {a.shape} with {b.shape}")
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - b).max() / scale)
