"""Minimal reverse-mode differentiation over dense float64 numpy arrays."""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d
from scipy.special import erf

from .scene import InvalidParameterError


class Tensor:
    __slots__ = ("value", "grad", "parents", "op", "_backward", "name", "aux")
    __array_priority__ = 100

    def __init__(self, value, parents=(), backward=None, op="leaf", name=None):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.parents = tuple(parents)
        self.op = op
        self._backward = backward
        self.name = name
        self.aux = None

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}{', name=' + self.name if self.name else ''})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return swapaxes(self, -1, -2)

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, op="const")


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcastable(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise InvalidParameterError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _binary(op, a, b, value, ga, gb):
    a, b = as_tensor(a), as_tensor(b)
    _broadcastable(op, a, b)

    def bw(g):
        return _unbroadcast(ga(g, a.value, b.value), a.shape), _unbroadcast(gb(g, a.value, b.value), b.shape)

    return Tensor(value(a.value, b.value), (a, b), bw, op)


def add(a, b):
    return _binary("add", a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary("sub", a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary("mul", a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    return _binary("div", a, b, np.divide, lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise InvalidParameterError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(a.value @ b.value, (a, b), bw, "matmul")


def _unary(op, x, value, deriv):
    x = as_tensor(x)
    out = value(x.value)
    return Tensor(out, (x,), lambda g: (g * deriv(x.value, out),), op)


def exp(x):
    return _unary("exp", x, np.exp, lambda v, out: out)


def log(x):
    return _unary("log", x, np.log, lambda v, out: 1.0 / v)


def sin(x):
    return _unary("sin", x, np.sin, lambda v, out: np.cos(v))


def cos(x):
    return _unary("cos", x, np.cos, lambda v, out: -np.sin(v))


def tanh(x):
    return _unary("tanh", x, np.tanh, lambda v, out: 1.0 - out * out)


def sigmoid(x):
    return _unary("sigmoid", x, lambda v: 0.5 * (1.0 + np.tanh(0.5 * v)), lambda v, out: out * (1.0 - out))


def relu(x):
    return _unary("relu", x, lambda v: np.maximum(v, 0.0), lambda v, out: (v > 0).astype(float))


def abs(x):
    return _unary("abs", x, np.abs, lambda v, out: np.sign(v))


def square(x):
    return _unary("square", x, np.square, lambda v, out: 2.0 * v)


def sqrt(x):
    return _unary("sqrt", x, np.sqrt, lambda v, out: 0.5 / out)


_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    """Exact (erf) GELU."""
    return _unary("gelu", x, lambda v: 0.5 * v * (1.0 + erf(v / _SQRT_2)),
                  lambda v, out: 0.5 * (1.0 + erf(v / _SQRT_2)) + v * _INV_SQRT_2PI * np.exp(-0.5 * v * v))


def clip(x, lo, hi):
    return _unary("clip", x, lambda v: np.clip(v, lo, hi), lambda v, out: ((v >= lo) & (v <= hi)).astype(float))


def sum(x, axis=None, keepdims=False):
    x = as_tensor(x)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor(np.sum(x.value, axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis, keepdims), 1.0 / count)


def reshape(x, shape):
    x = as_tensor(x)
    return Tensor(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def swapaxes(x, a, b):
    x = as_tensor(x)
    return Tensor(np.swapaxes(x.value, a, b), (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def getitem(x, idx):
    x = as_tensor(x)

    def bw(g):
        out = np.zeros_like(x.value)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor(x.value[idx], (x,), bw, "getitem")


def concat(xs, axis=-1):
    xs = [as_tensor(x) for x in xs]
    try:
        value = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError as err:
        raise InvalidParameterError(f"concat: {[x.shape for x in xs]}: {err}") from None
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(value, xs, bw, "concat")


def gather_rows(x, idx):
    """x[idx] along the first axis; ``idx`` may have any integer shape."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(x.value)
        np.add.at(out, idx.reshape(-1), g.reshape((-1,) + x.shape[1:]))
        return (out,)

    return Tensor(x.value[idx], (x,), bw, "gather_rows")


def segment_sum(x, segments, n_segments):
    x = as_tensor(x)
    segments = np.asarray(segments, dtype=np.int64)
    out = np.zeros((n_segments,) + x.shape[1:])
    np.add.at(out, segments, x.value)
    return Tensor(out, (x,), lambda g: (g[segments],), "segment_sum")


def segment_mean(x, segments, n_segments):
    segments = np.asarray(segments, dtype=np.int64)
    counts = np.bincount(segments, minlength=n_segments).astype(float)
    scale = 1.0 / np.maximum(counts, 1.0)
    return mul(segment_sum(x, segments, n_segments), scale.reshape((-1,) + (1,) * (as_tensor(x).ndim - 1)))


def segment_max(x, segments, n_segments):
    """Per-segment, per-column maximum; ties resolve to the lowest row index."""
    x = as_tensor(x)
    segments = np.asarray(segments, dtype=np.int64)
    v = x.value.reshape(len(x.value), -1)
    # stable sort by segment, then descending value, so the first row per segment wins
    argmax = np.zeros((n_segments, v.shape[1]), dtype=np.int64)
    rows = np.arange(len(v))
    for col in range(v.shape[1]):
        order = np.lexsort((rows, -v[:, col], segments))
        first = np.ones(len(order), dtype=bool)
        first[1:] = segments[order[1:]] != segments[order[:-1]]
        argmax[segments[order[first]], col] = order[first]
    out = v[argmax, np.arange(v.shape[1])]

    def bw(g):
        grad = np.zeros_like(v)
        np.add.at(grad, (argmax, np.broadcast_to(np.arange(v.shape[1]), argmax.shape)), g.reshape(argmax.shape))
        return (grad.reshape(x.shape),)

    t = Tensor(out.reshape((n_segments,) + x.shape[1:]), (x,), bw, "segment_max")
    t.aux = argmax.reshape((n_segments,) + x.shape[1:])
    return t


def softmax_rows(x, axis=-1, mask=None):
    """Softmax along ``axis``; entries with ``mask == False`` get zero weight.

    A slice with no unmasked entry comes out all zero.
    """
    x = as_tensor(x)
    v = x.value if mask is None else np.where(mask, x.value, -np.inf)
    top = np.max(v, axis=axis, keepdims=True)
    e = np.exp(v - np.where(np.isfinite(top), top, 0.0))
    total = np.sum(e, axis=axis, keepdims=True)
    out = e / np.where(total > 0, total, 1.0)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return Tensor(out, (x,), bw, "softmax")


def layer_norm(x, eps=1e-5):
    """Normalize the last axis to zero mean, unit variance (no affine parameters)."""
    x = as_tensor(x)
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    inv = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = np.mean(g * y, axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return Tensor(y, (x,), bw, "layer_norm")


def l2_norm(x, axis=-1, keepdims=False):
    """Euclidean norm; the (sub)gradient at the origin is taken as zero."""
    x = as_tensor(x)
    n = np.sqrt(np.sum(x.value ** 2, axis=axis, keepdims=True))
    safe = np.where(n > 0, n, 1.0)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.where(n > 0, g * x.value / safe, 0.0),)

    return Tensor(n if keepdims else np.squeeze(n, axis=axis), (x,), bw, "l2_norm")


def gaussian_kernel(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return k / k.sum()


def gaussian_filter(x, kernel):
    """Separable 'same' filtering of an (H, W, ...) array with zero padding (self-adjoint)."""
    x = as_tensor(x)

    def apply(v):
        v = correlate1d(v, kernel, axis=0, mode="constant", cval=0.0)
        return correlate1d(v, kernel, axis=1, mode="constant", cval=0.0)

    return Tensor(apply(x.value), (x,), lambda g: (apply(g),), "gaussian_filter")


def custom(op, inputs, value, vjp):
    """Wrap an externally computed value; ``vjp(g)`` returns one gradient per input."""
    inputs = [as_tensor(t) for t in inputs]
    return Tensor(value, inputs, vjp, op)


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    if loss.value.size != 1:
        raise InvalidParameterError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological(loss)
    for node in order:
        node.grad = np.zeros_like(node.value)
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is None:
            continue
        for parent, g in zip(node.parents, node._backward(node.grad)):
            if g is not None:
                parent.grad = parent.grad + g


# -- parameters ------------------------------------------------------------

FORMAT_MAGIC = b"SGPS"
FORMAT_VERSION = 1


class CheckpointVersionError(RuntimeError):
    pass


class ParamStore:
    """Ordered, uniquely named parameter blocks."""

    def __init__(self):
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.meta: dict[str, str] = {}

    def add(self, name: str, value, init: str = "given") -> Tensor:
        if name in self.params:
            raise InvalidParameterError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=float), name=name)
        self.params[name] = t
        self.meta[name] = init
        return t

    def set(self, name: str, value) -> Tensor:
        """Replace a block's value (shape may change, e.g. after densification)."""
        t = Tensor(np.array(value, dtype=float), name=name)
        self.params[name] = t
        self.meta.setdefault(name, "given")
        return t

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def __contains__(self, name) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def items(self):
        return self.params.items()

    def remove(self, prefix: str) -> None:
        for name in [n for n in self.params if n.startswith(prefix)]:
            del self.params[name]
            self.meta.pop(name, None)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = np.zeros_like(t.value)

    def grads(self) -> dict[str, np.ndarray]:
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.value)) for n, t in self.params.items()}

    def values(self) -> dict[str, np.ndarray]:
        return {n: t.value for n, t in self.params.items()}

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(FORMAT_MAGIC + struct.pack("<II", FORMAT_VERSION, len(self.params)))
            for name, t in self.params.items():
                raw = name.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)) + raw)
                fh.write(struct.pack("<I", t.value.ndim) + struct.pack(f"<{t.value.ndim}q", *t.value.shape))
                fh.write(np.ascontiguousarray(t.value, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        store = cls()
        with open(path, "rb") as fh:
            if fh.read(4) != FORMAT_MAGIC:
                raise CheckpointVersionError(f"{path}: not a parameter file")
            version, count = struct.unpack("<II", fh.read(8))
            if version != FORMAT_VERSION:
                raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
            for _ in range(count):
                (n,) = struct.unpack("<I", fh.read(4))
                name = fh.read(n).decode("utf-8")
                (ndim,) = struct.unpack("<I", fh.read(4))
                shape = struct.unpack(f"<{ndim}q", fh.read(8 * ndim))
                size = int(np.prod(shape)) if ndim else 1
                store.add(name, np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(shape))
        return store


# -- gradient checking -----------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)   # (block, flat index, analytic, numeric)
    kinks: list = field(default_factory=list)      # (block, flat index) flagged non-differentiable
    checked: int = 0

    @property
    def passed(self) -> bool:
        return not self.failures

    def __str__(self):
        lines = [f"{'PASS' if self.passed else 'FAIL'}: {self.checked} entries, {len(self.kinks)} kinks"]
        lines += [f"  {name}: max rel err {err:.2e}" for name, err in self.max_rel_error.items()]
        return "\n".join(lines)


def grad_check(f, store: ParamStore, rtol=1e-4, atol=1e-7, h=1e-5, max_entries=None, rng=None,
               blocks=None, kink_shift=1e-3) -> GradCheckReport:
    """Compare backward() against central differences for every (or a sample of) entry.

    ``f()`` must build a fresh scalar Tensor from ``store``. An entry is flagged as
    a kink when its one-sided differences disagree; it is then moved by
    ``kink_shift`` and re-checked there.
    """
    rng = rng or np.random.default_rng(0)
    report = GradCheckReport()
    names = list(blocks or store.params)

    def analytic():
        store.zero_grad()
        loss = f()
        backward(loss)
        return {n: store[n].grad.copy() for n in names}

    def value():
        return float(f().value)

    grads = analytic()
    for name in names:
        t = store[name]
        flat = t.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        worst = 0.0
        for i in idx:
            old = flat[i]
            f0 = value()
            flat[i] = old + h
            fp = value()
            flat[i] = old - h
            fm = value()
            flat[i] = old
            fwd, bwd = (fp - f0) / h, (f0 - fm) / h
            ga = grads[name].reshape(-1)[i]
            if np.abs(fwd - bwd) > 1e-2 * max(np.abs(fwd), np.abs(bwd)) + 1e-6:
                report.kinks.append((name, int(i)))
                flat[i] = old + kink_shift
                ga = analytic()[name].reshape(-1)[i]
                flat[i] = old + kink_shift + h
                fp = value()
                flat[i] = old + kink_shift - h
                fm = value()
                flat[i] = old
            num = (fp - fm) / (2 * h)
            err = np.abs(ga - num)
            rel = err / max(np.abs(ga), np.abs(num), 1e-300)
            if not np.isfinite(err) or err > rtol * max(np.abs(ga), np.abs(num)) + atol:
                report.failures.append((name, int(i), float(ga), float(num)))
            if max(np.abs(ga), np.abs(num)) > 10 * atol:
                worst = max(worst, rel)
            report.checked += 1
        report.max_rel_error[name] = worst
    return report
