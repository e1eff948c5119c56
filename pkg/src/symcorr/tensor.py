"""Small reverse-mode autodiff engine over float64 numpy arrays.

Just enough to train a pixel-aligned convolutional descriptor network:
elementwise arithmetic (numpy broadcasting), matmul, same-size conv2d,
relu, reshape/index, reductions, softmax/log-softmax, log and sqrt.

Every op is reachable through :func:`forward_op` by kind name, and also
through the module-level functions and ``Tensor`` operators.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Inputs to an op have incompatible shapes."""


class GraphError(RuntimeError):
    """Backward was called on something that has no live graph."""


class Tensor:
    """A float64 array with an optional gradient and a link to its creator."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_released")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.op: Optional[str] = None
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._released = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], grad_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._released = False
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = grad_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, "sub", (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, "mul", (a, b), grad_fn)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar."""
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def shift(a, c: float) -> Tensor:
    """Add a python scalar."""
    a = as_tensor(a)
    c = float(c)
    return _make(a.data + c, "shift", (a,), lambda g: (g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")
    x = a.data
    return _make(np.log(x), "log", (a,), lambda g: (g / x,))


def sqrt(a) -> Tensor:
    """Square root; the gradient at exactly 0 is taken as 0."""
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise ValueError("sqrt: input must be nonnegative")
    out = np.sqrt(a.data)

    def grad_fn(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _make(out, "sqrt", (a,), grad_fn)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, "matmul", (a, b), grad_fn)


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(N*H*W, kh*kw*C) patch matrix of a zero-padded NHWC array, patch order (i, j, c)."""
    n, h, w, c = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((n, h + 2 * ph, w + 2 * pw, c))
    xp[:, ph:ph + h, pw:pw + w] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (N, H, W, C, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w, kh * kw * c)


def conv2d(x, w, b=None) -> Tensor:
    """Stride-1 convolution with zero padding that preserves H and W.

    x: (N, H, W, C_in); w: (kh, kw, C_in, C_out) with odd kh, kw; b: (C_out,).
    """
    x, w = as_tensor(x), as_tensor(w)
    parents: List[Tensor] = [x, w]
    if b is not None:
        b = as_tensor(b)
        parents.append(b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected x (N,H,W,C) and w (kh,kw,Cin,Cout), got {x.shape} and {w.shape}")
    kh, kw, cin, cout = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel must have odd size, got {w.shape}")
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match kernel {w.shape}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match kernel {w.shape}")

    n, h, wd, _ = x.shape
    cols = _im2col(x.data, kh, kw)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = cols @ wmat
    if b is not None:
        out += b.data
    out = out.reshape(n, h, wd, cout)

    def grad_fn(g):
        g2 = g.reshape(n * h * wd, cout)
        gw = (g2.T @ cols).T.reshape(w.shape)
        gx = None
        if x.requires_grad:
            # full correlation with the spatially flipped, channel-transposed kernel
            wflip = w.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * cout, cin)
            gx = (_im2col(g, kh, kw) @ wflip).reshape(x.shape)
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, "conv2d", parents, grad_fn)


# ---------------------------------------------------------------- shape


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    src = a.shape
    return _make(out, "reshape", (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.data.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inv),))


def index(a, key) -> Tensor:
    """numpy-style indexing (basic or integer-array) with scatter-add backward."""
    a = as_tensor(a)
    try:
        out = a.data[key]
    except IndexError as exc:
        raise ShapeError(f"index: {exc} for shape {a.shape}") from None

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.array(out, dtype=DTYPE), "index", (a,), grad_fn)


# ---------------------------------------------------------------- reductions


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = a.data.sum(axis=axis)
    src = a.shape

    def grad_fn(g):
        if axis is None:
            return (np.full(src, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _make(np.asarray(out, dtype=DTYPE), "sum", (a,), grad_fn)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / count)


def sq_norm(a, axis: int = -1) -> Tensor:
    """Squared L2 norm over one axis (the channel axis by default)."""
    a = as_tensor(a)
    if a.data.ndim == 0:
        raise ShapeError("sq_norm: input must have at least one axis")
    x = a.data

    def grad_fn(g):
        return (2.0 * x * np.expand_dims(g, axis),)

    return _make(np.sum(x * x, axis=axis), "sq_norm", (a,), grad_fn)


def softmax(a, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``. Reshape first to flatten spatial axes."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)

    return _make(p, "softmax", (a,), grad_fn)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def grad_fn(g):
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return _make(out, "log_softmax", (a,), grad_fn)


OPS: Dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "scale": scale,
    "shift": shift,
    "relu": relu,
    "log": log,
    "sqrt": sqrt,
    "matmul": matmul,
    "conv2d": conv2d,
    "reshape": reshape,
    "transpose": transpose,
    "index": index,
    "sum": sum,
    "sq_norm": sq_norm,
    "softmax": softmax,
    "log_softmax": log_softmax,
}


def forward_op(kind: str, inputs: Sequence, **kwargs) -> Tensor:
    """Apply the op named ``kind`` to ``inputs``; keyword args are op options."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; known: {sorted(OPS)}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate dloss/dx into ``x.grad`` for every leaf reachable from ``loss``.

    The graph is released afterwards; a second call raises ``GraphError``.
    """
    if loss.data.ndim != 0 and loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss._released:
        raise GraphError("backward: graph already released; re-run the forward pass")
    if not loss.requires_grad:
        raise GraphError("backward: loss is not connected to any tensor that requires grad")

    order = _topo_order(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaf
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = np.asarray(pg, dtype=DTYPE)
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._released = True


# ---------------------------------------------------------------- optimizer


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8 by default)."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        if lr < 0:
            raise ValueError(f"learning rate must be nonnegative, got {lr}")
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise GraphError(f"Adam.step: parameter {i} with shape {p.shape} has no gradient")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"SCKP"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: Dict[str, np.ndarray], metadata: Optional[dict] = None) -> None:
    """Write parameters in the SCKP binary layout (all integers little-endian u32).

    magic | version | param count | metadata length | metadata JSON |
    per param: name length | UTF-8 name | rank | dims... | f64 values
    """
    import json

    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    chunks = [CKPT_MAGIC, struct.pack("<III", CKPT_VERSION, len(params), len(meta)), meta]
    for name, value in params.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    import json

    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    try:
        version, count, meta_len = struct.unpack_from("<III", buf, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 16
        metadata = json.loads(buf[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        params: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            nbytes = 8 * int(np.prod(dims, dtype=np.int64))
            if pos + nbytes > len(buf):
                raise CheckpointError(f"{path}: truncated data for parameter {name!r}")
            params[name] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=pos).reshape(dims).astype(DTYPE)
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from None
    return params, metadata
