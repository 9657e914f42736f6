"""Dense float64 tensors with a define-by-run reverse-mode tape.

Operations record themselves on the active :class:`Tape` whenever at least one
input is attached to it.  Outside a ``with Tape():`` block every operation is a
plain numpy computation, which is what the finite-difference oracle relies on.

Broadcasting is deliberately absent apart from tensor-scalar arithmetic; the
few row-broadcast patterns the model needs have explicit ops (``add_bias``,
``mul_row``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


_ACTIVE: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _ACTIVE[-1] if _ACTIVE else None


class Tensor:
    __slots__ = ("data", "node_id", "tape")

    def __init__(self, data, node_id: int | None = None, tape: "Tape | None" = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node_id = node_id
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def attached(self, tape: "Tape | None") -> bool:
        return tape is not None and self.node_id is not None and self.tape is tape

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other) if not _is_scalar(other) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if not _is_scalar(other) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if not _is_scalar(other) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not _is_scalar(other):
            raise DimensionError("only division by a scalar is supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _raise_item(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


@dataclass(eq=False)
class Parameter:
    """Named learnable (or frozen) array.

    Frozen parameters never reach the tape, so their gradient stays zero and the
    optimizer skips them.
    """

    name: str
    data: np.ndarray
    trainable: bool = True
    grad: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def value(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


@dataclass(eq=False)
class Buffer:
    """Non-learnable state that is updated outside the optimizer (BN running stats)."""

    name: str
    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)


class _Node:
    __slots__ = ("op", "parents", "needs", "vjp", "shape", "param")

    def __init__(self, op, parents, needs, vjp, shape, param=None):
        self.op = op
        self.parents = parents
        self.needs = needs
        self.vjp = vjp
        self.shape = shape
        self.param = param


class Tape:
    """Append-only record of operations; node ids are topologically ordered."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.grads: dict[int, np.ndarray] = {}
        self._param_leaf: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def watch(self, x) -> Tensor:
        """Return a new leaf on this tape holding ``x``'s values."""
        data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        self.nodes.append(_Node("leaf", (), (), None, data.shape))
        return Tensor(data, len(self.nodes) - 1, self)

    def param(self, p: Parameter) -> Tensor:
        leaf = self._param_leaf.get(id(p))
        if leaf is None:
            self.nodes.append(_Node("param", (), (), None, p.data.shape, p))
            leaf = Tensor(p.data, len(self.nodes) - 1, self)
            self._param_leaf[id(p)] = leaf
        return leaf

    def record(self, op: str, value: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
        parents = tuple(t.node_id if t.attached(self) else None for t in inputs)
        needs = tuple(p is not None for p in parents)
        self.nodes.append(_Node(op, parents, needs, vjp, value.shape))
        return Tensor(value, len(self.nodes) - 1, self)

    def grad(self, t: Tensor) -> np.ndarray:
        if not t.attached(self):
            return np.zeros(t.shape)
        g = self.grads.get(t.node_id)
        return np.zeros(t.shape) if g is None else g

    def backward(self, root: Tensor) -> dict[int, np.ndarray]:
        if root.data.size != 1:
            raise ContractError(f"backward() needs a scalar root, got shape {root.shape}")
        if not root.attached(self):
            return {}
        nodes = self.nodes
        grads: dict[int, np.ndarray] = {root.node_id: np.ones(root.shape)}
        for nid in range(root.node_id, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = nodes[nid]
            if node.vjp is None:
                if node.param is not None and node.param.trainable:
                    node.param.grad = node.param.grad + g
                continue
            parent_grads = node.vjp(g, node.needs)
            for pid, pg in zip(node.parents, parent_grads):
                if pid is None:
                    continue
                prev = grads.get(pid)
                grads[pid] = pg if prev is None else prev + pg
        self.grads = grads
        return grads


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar; accumulates into trainable ``Parameter.grad``."""
    if root.data.size != 1:
        raise ContractError(f"backward() needs a scalar root, got shape {root.shape}")
    if root.tape is None or root.node_id is None:
        return {}
    return root.tape.backward(root)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Parameter):
        tape = active_tape()
        if tape is not None and x.trainable:
            return tape.param(x)
        return Tensor(x.data)
    return Tensor(x)


def _result(op: str, value: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = active_tape()
    if tape is None or not any(t.attached(tape) for t in inputs):
        return Tensor(value)
    return tape.record(op, value, inputs, vjp)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g, n: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g, n: (g, -g if n[1] else None))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data

    def vjp(g, n):
        return (g * bd if n[0] else None, g * ad if n[1] else None)

    return _result("mul", ad * bd, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result("neg", -a.data, (a,), lambda g, n: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _result("scale", a.data * c, (a,), lambda g, n: (g * c,))


def add_scalar(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _result("add_scalar", a.data + float(c), (a,), lambda g, n: (g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result("relu", np.where(mask, a.data, 0.0), (a,), lambda g, n: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = stable_sigmoid(a.data)
    return _result("sigmoid", y, (a,), lambda g, n: (g * y * (1.0 - y),))


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    from scipy.special import erf

    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    y = x * cdf

    def vjp(g, n):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return (g * (cdf + x * pdf),)

    return _result("gelu", y, (a,), vjp)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or a batched product with identical leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: need matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions differ for {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g, n):
        ga = g @ np.swapaxes(bd, -1, -2) if n[0] else None
        gb = None
        if n[1]:
            if shared:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result("matmul", ad @ bd, (a, b), vjp)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise DimensionError(f"transpose: need at least 2 dims, got {a.shape}")
    return _result(
        "transpose", np.swapaxes(a.data, -1, -2).copy(), (a,), lambda g, n: (np.swapaxes(g, -1, -2),)
    )


def add_bias(x, b) -> Tensor:
    """Add a length-n vector to every row of ``x[..., n]``."""
    x, b = as_tensor(x), as_tensor(b)
    if b.shape != (x.shape[-1],):
        raise DimensionError(f"add_bias: bias {b.shape} does not fit {x.shape}")

    def vjp(g, n):
        return (g, g.reshape(-1, g.shape[-1]).sum(axis=0) if n[1] else None)

    return _result("add_bias", x.data + b.data, (x, b), vjp)


def mul_row(x, v) -> Tensor:
    """Multiply every row of ``x[..., m, n]`` elementwise by the single row ``v[..., 1, n]``."""
    x, v = as_tensor(x), as_tensor(v)
    if x.ndim < 2 or v.shape != x.shape[:-2] + (1, x.shape[-1]):
        raise DimensionError(f"mul_row: row {v.shape} does not fit {x.shape}")
    xd, vd = x.data, v.data

    def vjp(g, n):
        return (g * vd if n[0] else None, (g * xd).sum(axis=-2, keepdims=True) if n[1] else None)

    return _result("mul_row", xd * vd, (x, v), vjp)


def softmax_rows(x) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row max."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g, n):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result("softmax", y, (x,), vjp)


LN_EPS = 1e-5


def layer_norm(x, gamma, beta, eps: float = LN_EPS) -> Tensor:
    """Normalise each row of ``x[..., n]`` to zero mean / unit variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n = x.shape[-1]
    if n < 2:
        raise ContractError("layer_norm needs rows of width >= 2")
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(f"layer_norm: affine params {gamma.shape}/{beta.shape} vs width {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def vjp(g, needs):
        gx = gg = gb = None
        if needs[0]:
            dxhat = g * gd
            gx = inv / n * (
                n * dxhat
                - dxhat.sum(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
        if needs[1]:
            gg = (g * xhat).reshape(-1, n).sum(axis=0)
        if needs[2]:
            gb = g.reshape(-1, n).sum(axis=0)
        return gx, gg, gb

    return _result("layer_norm", xhat * gd + beta.data, (x, gamma, beta), vjp)


# ---------------------------------------------------------------- shape ops


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _result("reshape", y, (x,), lambda g, n: (g.reshape(old),))


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(
            d1 != d2 for i, (d1, d2) in enumerate(zip(x.shape, ref)) if i != ax
        ):
            raise DimensionError(f"concat: shapes {ref} and {x.shape} disagree off axis {axis}")
    sizes = [x.shape[ax] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def vjp(g, n):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) if n[i] else None
            for i in range(len(xs))
        )

    return _result("concat", np.concatenate([x.data for x in xs], axis=ax), xs, vjp)


def stack(xs: Sequence) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    xs = [as_tensor(x) for x in xs]
    for x in xs[1:]:
        _same_shape("stack", xs[0], x)

    def vjp(g, n):
        return tuple(g[i] if n[i] else None for i in range(len(xs)))

    return _result("stack", np.stack([x.data for x in xs]), xs, vjp)


def index(x, i: int) -> Tensor:
    """Select entry ``i`` along the leading axis."""
    x = as_tensor(x)
    shape = x.shape

    def vjp(g, n):
        out = np.zeros(shape)
        out[i] = g
        return (out,)

    return _result("index", x.data[i].copy(), (x,), vjp)


def take(x, indices) -> Tensor:
    """Gather entries along the leading axis (indices may repeat)."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    shape = x.shape

    def vjp(g, n):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _result("take", x.data[idx], (x,), vjp)


def slice_rows(x, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of a matrix (second-to-last axis)."""
    x = as_tensor(x)
    shape = x.shape

    def vjp(g, n):
        out = np.zeros(shape)
        out[..., start:stop, :] = g
        return (out,)

    return _result("slice_rows", x.data[..., start:stop, :].copy(), (x,), vjp)


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _result("sum", np.asarray(x.data.sum()), (x,), lambda g, n: (np.full(shape, float(g)),))


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    size = x.data.size
    return _result(
        "mean", np.asarray(x.data.mean()), (x,), lambda g, n: (np.full(shape, float(g) / size),)
    )


def custom_op(op: str, value: np.ndarray, inputs: Sequence, vjp: Callable) -> Tensor:
    """Record a fused operation whose vector-Jacobian product is supplied by the caller.

    ``vjp(g, needs)`` must return one gradient (or None) per input.
    """
    return _result(op, np.asarray(value, dtype=np.float64), [as_tensor(t) for t in inputs], vjp)


# ---------------------------------------------------------------- gradient oracle


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Parameter],
    h: float = 1e-5,
    per_param: bool = False,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    directions: int = 0,
):
    """Compare tape gradients of a scalar ``f()`` against central differences.

    Error per probe is ``|analytic - numeric| / max(1, |numeric|)``; the
    maximum over every probe of every trainable parameter is returned.
    Frozen parameters are skipped.  ``max_coords`` subsamples coordinates per
    parameter when a full sweep is too expensive; ``directions`` adds that many
    random unit-direction probes per parameter, each touching every coordinate.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ContractError(f"finite-difference step {h} outside [1e-6, 1e-4]")
    rng = rng or np.random.default_rng(0)
    params = [p for p in params if p.trainable]
    for p in params:
        p.zero_grad()
    with Tape():
        loss = f()
        backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}

    def central(p, step):
        orig = p.data.copy()
        p.data += h * step
        fp = float(f().data)
        p.data[...] = orig - h * step
        fm = float(f().data)
        p.data[...] = orig
        return (fp - fm) / (2.0 * h)

    worst = 0.0
    report: dict[str, float] = {}
    for p in params:
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
        ana = analytic[p.name]
        err = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            err = max(err, abs(ana.reshape(-1)[i] - num) / max(1.0, abs(num)))
        for _ in range(directions):
            d = rng.normal(size=p.data.shape)
            d /= np.linalg.norm(d)
            num = central(p, d)
            err = max(err, abs(float(np.sum(ana * d)) - num) / max(1.0, abs(num)))
        report[p.name] = err
        worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return (worst, report) if per_param else worst
