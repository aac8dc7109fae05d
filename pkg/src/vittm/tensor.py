"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a contiguous numpy array.  Every differentiable
operation in this module records its parents and a backward rule when grad
mode is on and at least one input requires a gradient; :func:`backward`
walks that graph in reverse topological order and accumulates gradients
into the leaves.

Only the operations the model needs are provided.  Binary operations follow
numpy broadcasting, and gradients are summed back to the operand shape.
"""

from __future__ import annotations

import io
import struct
import threading
from contextlib import contextmanager
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf, expit

from .errors import ContractError, DimensionError, FormatError

DTYPES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}
MAGIC = b"VTTM"


class _GradMode(threading.local):
    enabled = True


_grad_mode = _GradMode()


@contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = _grad_mode.enabled
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = prev


def is_grad_enabled() -> bool:
    return _grad_mode.enabled


def resolve_dtype(dtype) -> np.dtype:
    if dtype is None:
        return DTYPES["f64"]
    if isinstance(dtype, str) and dtype in DTYPES:
        return DTYPES[dtype]
    dt = np.dtype(dtype)
    if dt not in _DTYPE_TAGS:
        raise ValueError(f"unsupported dtype {dtype!r}; use f32 or f64")
    return dt


class Tensor:
    """An N-dimensional float array that can take part in differentiation."""

    __array_priority__ = 100

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and isinstance(data, np.ndarray) and data.dtype in _DTYPE_TAGS:
            self.data = data if data.flags.c_contiguous else np.ascontiguousarray(data)
        else:
            self.data = np.ascontiguousarray(data, dtype=resolve_dtype(dtype))
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = ""
        self._replay = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"

    # operator sugar
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
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class Parameter(Tensor):
    """A trainable leaf tensor with a name and a zero-initialised gradient."""

    def __init__(self, value, name: str = "", dtype=None):
        super().__init__(value, dtype=dtype, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype.name})"


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None:
        return _wrap(np.asarray(x, dtype=like.data.dtype))
    return Tensor(np.asarray(x))


def _wrap(data: np.ndarray) -> Tensor:
    out = object.__new__(Tensor)
    out.data = data if data.flags.c_contiguous else np.ascontiguousarray(data)
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    out._op = ""
    out._replay = None
    return out


def _record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = _wrap(data)
    if _grad_mode.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
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
    return grad.reshape(shape)


_BINARY = {"+": np.add, "-": np.subtract, "*": np.multiply, "/": np.divide}


def _binary(symbol: str, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return _BINARY[symbol](a.data, b.data)
    except ValueError:
        raise DimensionError(f"shapes {a.shape} and {b.shape} do not broadcast for {symbol!r}") from None


# ---------------------------------------------------------------- binary ops


def add(a, b) -> Tensor:
    if not (isinstance(a, Tensor) and isinstance(b, Tensor)):
        a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(_binary('+', a, b), (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _record(_binary('-', a, b), (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(_binary('*', a, b), (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _record(_binary('/', a, b), (a, b), backward, "div")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # fold batch axes into rows: one BLAS call instead of a loop
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _record(out, (a, b), backward, "matmul")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    try:
        out = a.data @ b.data
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} differ") from None
    return _record(out, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for a 2-D ``w``, as a single recorded op."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: cannot multiply {x.shape} by {w.shape}")
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out += b.data
    out = out.reshape(x.shape[:-1] + (w.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _record(out, (x, w) if b is None else (x, w, b), backward, "linear")


# ----------------------------------------------------------- shape plumbing


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""

    def backward(g):
        return (np.swapaxes(g, -1, -2),)

    return _record(np.swapaxes(x.data, -1, -2), (x,), backward, "transpose")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _record(np.transpose(x.data, axes), (x,), backward, "permute")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(x.shape),)

    return _record(out, (x,), backward, "reshape")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise DimensionError(f"broadcast_to: {x.shape} does not expand to {shape}") from None

    def backward(g):
        return (_unbroadcast(g, x.shape),)

    return _record(out.copy(), (x,), backward, "broadcast_to")


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    idx = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(i, (np.ndarray, list)) for i in idx)

    def backward(g):
        full = np.zeros_like(x.data)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _record(np.ascontiguousarray(out), (x,), backward, "getitem")


# -------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for a in axes:
            count *= x.shape[a]
    out = np.add.reduce(x.data, axis=axis, keepdims=keepdims) * (1.0 / count)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _record(np.asarray(out), (x,), backward, "mean")


def mean_lastdim(x: Tensor) -> Tensor:
    return mean(x, axis=-1)


# ------------------------------------------------------------- elementwise


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _record(s, (x,), backward, "sigmoid")


def elu(x: Tensor) -> Tensor:
    """ELU with alpha = 1."""
    pos = x.data > 0
    out = np.expm1(np.minimum(x.data, 0.0))
    np.copyto(out, x.data, where=pos)

    def backward(g):
        return (g * np.where(pos, 1.0, out + 1.0),)

    return _record(out.astype(x.dtype, copy=False), (x,), backward, "elu")


def elu_plus_one(x: Tensor) -> Tensor:
    """Positive feature map ``1 + elu(x)`` used by linear attention.

    Equal to ``x + 1`` for ``x > 0`` and ``exp(x)`` otherwise, which is also
    its derivative on the negative side.
    """
    pos = x.data > 0
    out = np.exp(np.minimum(x.data, 0.0))
    np.add(x.data, 1.0, out=out, where=pos)

    def backward(g):
        return (g * np.where(pos, 1.0, out),)

    return _record(out.astype(x.dtype, copy=False), (x,), backward, "elu_plus_one")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _record((x.data * cdf).astype(x.dtype, copy=False), (x,), backward, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _record(s, (x,), backward, "softmax")


def softmax_lastdim(x: Tensor) -> Tensor:
    return softmax(x, axis=-1)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def backward(g):
        s = np.exp(out)
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _record(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean, unit variance, then scale/shift."""
    d = x.shape[-1]
    inv_d = 1.0 / d
    mu = np.add.reduce(x.data, axis=-1, keepdims=True) * inv_d
    xc = x.data - mu
    var = np.add.reduce(xc * xc, axis=-1, keepdims=True) * inv_d
    var += eps
    rstd = var ** -0.5
    xhat = xc * rstd
    out = xhat
    if weight is not None:
        if weight.shape != (d,):
            raise DimensionError(f"layer_norm: weight {weight.shape} vs features {d}")
        out = out * weight.data
    if bias is not None:
        if out is xhat:
            out = out + bias.data
        else:
            out += bias.data
    parents = [x] + [p for p in (weight, bias) if p is not None]

    def backward(g):
        gx_hat = g * weight.data if weight is not None else g
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if weight is not None:
            grads.append(_unbroadcast(g * xhat, weight.shape))
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape))
        return tuple(grads)

    return _record(out.astype(x.dtype, copy=False), parents, backward, "layer_norm")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    logits2 = logits if logits.ndim == 2 else reshape(logits, (1, -1))
    if logits2.shape[0] != labels.shape[0]:
        raise DimensionError(f"cross_entropy: {logits2.shape[0]} rows vs {labels.shape[0]} labels")
    logp = log_softmax(logits2)
    picked = getitem(logp, (np.arange(labels.shape[0]), labels))
    return mul(mean(picked), -1.0)


def _replayable(fn: Callable) -> Callable:
    """Remember how each recorded node was computed so it can be re-run."""

    def op(*args, **kwargs):
        out = fn(*args, **kwargs)
        if out._parents:
            out._replay = (fn, args, kwargs)
        return out

    op.__name__, op.__qualname__, op.__doc__ = fn.__name__, fn.__qualname__, fn.__doc__
    op.__wrapped__ = fn
    return op


for _name in ("add", "sub", "mul", "div", "matmul", "linear", "transpose", "permute", "reshape",
              "broadcast_to", "getitem", "sum", "mean", "sigmoid", "elu", "elu_plus_one", "gelu",
              "softmax", "log_softmax", "layer_norm", "cross_entropy"):
    globals()[_name] = _replayable(globals()[_name])


# ------------------------------------------------------------------ engine


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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients add to whatever the leaves already hold, so shared parameters
    and repeated calls accumulate.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
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
            grads[key] = grads[key] + pg if key in grads else pg


def _descendants(order: list[Tensor], leaf: Tensor) -> list[Tensor]:
    marked = {id(leaf)}
    out = []
    for node in order:
        if node._parents and any(id(p) in marked for p in node._parents):
            marked.add(id(node))
            out.append(node)
    return out


def grad_check(f: Callable[[], Tensor], params: Iterable[Parameter], epsilon: float = 1e-5) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``f`` takes no arguments and returns a scalar tensor built from ``params``.
    The error per element is ``|a - n| / max(1, |a|, |n|)``.

    Perturbed losses are obtained by re-running only the recorded ops that
    depend on the perturbed parameter; ops that cannot be re-run fall back to
    calling ``f`` again.  Both give the same numbers when ``f`` has no
    value-dependent control flow.
    """
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = f()
    with no_grad():
        again = f()
    if not np.array_equal(loss.data, again.data):
        raise ContractError("f is not deterministic: two evaluations disagree")
    backward(loss)
    order = _topo_order(loss)

    worst = 0.0
    with no_grad():
        for p in params:
            nodes = _descendants(order, p)
            if nodes and all(n._replay is not None for n in nodes):
                saved = [n.data for n in nodes]

                def evaluate() -> float:
                    for n in nodes:
                        fn, args, kwargs = n._replay
                        n.data = fn(*args, **kwargs).data
                    value = loss.item()
                    for n, d in zip(nodes, saved):
                        n.data = d
                    return value
            elif not nodes:
                base = loss.item()

                def evaluate() -> float:
                    return base
            else:
                def evaluate() -> float:
                    return f().item()

            analytic = p.grad.reshape(-1).copy()
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                fp = evaluate()
                flat[i] = orig - epsilon
                fm = evaluate()
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * epsilon)
                a = float(analytic[i])
                err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                worst = max(worst, err)
    return float(worst)


# ----------------------------------------------------------- serialization


def write_tensor(t: Tensor | np.ndarray, fh: BinaryIO) -> None:
    """Write ``VTTM | dtype u8 | rank u8 | dims u64... | little-endian data``."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.dtype not in _DTYPE_TAGS:
        raise ValueError(f"cannot serialize dtype {arr.dtype}")
    fh.write(struct.pack("<4sBB", MAGIC, _DTYPE_TAGS[arr.dtype], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"unexpected end of data: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh: BinaryIO) -> Tensor:
    magic, tag, rank = struct.unpack("<4sBB", _read_exact(fh, 6))
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if tag not in _TAG_DTYPES:
        raise FormatError(f"unknown dtype tag {tag}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    dt = _TAG_DTYPES[tag]
    count = int(np.prod(dims)) if rank else 1
    raw = _read_exact(fh, count * dt.itemsize)
    arr = np.frombuffer(raw, dtype=dt.newbyteorder("<")).astype(dt).reshape(dims)
    return Tensor(arr)


def tensor_to_bytes(t: Tensor) -> bytes:
    buf = io.BytesIO()
    write_tensor(t, buf)
    return buf.getvalue()


def tensor_from_bytes(raw: bytes) -> Tensor:
    return read_tensor(io.BytesIO(raw))
