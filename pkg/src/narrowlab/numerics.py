"""Dense tensors with a small reverse-mode autodiff tape.

Every differentiable primitive records its parents and a closure mapping the
output adjoint to one adjoint per parent. Arrays are numpy float64 unless a
caller asks otherwise. Nothing is recorded when no input requires a gradient,
so frozen-model inference runs tape-free.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        shown = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: shape mismatch {shown}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=DTYPE):
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


class Parameter(Tensor):
    """A named leaf tensor. Only trainable parameters receive gradients."""

    __slots__ = ("name", "trainable")

    def __init__(self, name: str, value, trainable: bool = True):
        super().__init__(value, requires_grad=trainable)
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def set_trainable(self, flag: bool) -> None:
        self.trainable = flag
        self.requires_grad = flag

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(out_data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _record(out, (x,), lambda g: (g * 0.5 / out,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """Tanh-approximated GELU."""
    x = as_tensor(x)
    u = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    th = np.tanh(u)
    out = 0.5 * x.data * (1.0 + th)

    def back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x.data * (1.0 - th ** 2) * du),)

    return _record(out, (x,), back)


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * s
    return _record(out, (x,), lambda g: (g * (s + x.data * s * (1.0 - s)),))


# ------------------------------------------------------------------ reductions


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), back)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / float(n))


# ------------------------------------------------------------------- algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), back)


def swapaxes(x, i: int, j: int) -> Tensor:
    x = as_tensor(x)
    return _record(np.swapaxes(x.data, i, j), (x,), lambda g: (np.swapaxes(g, i, j),))


def transpose(x) -> Tensor:
    return swapaxes(x, -1, -2)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError("broadcast", x.shape, shape) from None
    return _record(out, (x,), lambda g: (_unbroadcast(g, x.shape),))


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(x.shape for x in xs)) from None
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record(out, xs, back)


def slice_last(x, lo: int, hi: int) -> Tensor:
    x = as_tensor(x)
    out = x.data[..., lo:hi]

    def back(g):
        gx = np.zeros_like(x.data)
        gx[..., lo:hi] = g
        return (gx,)

    return _record(out, (x,), back)


def gather_rows(x, idx: np.ndarray) -> Tensor:
    """Pick rows along axis -2 per batch item: x (B, N, C), idx (B, K) -> (B, K, C)."""
    x = as_tensor(x)
    idx = np.asarray(idx)
    if x.ndim != 3 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ShapeError("gather_rows", x.shape, idx.shape)
    out = np.take_along_axis(x.data, idx[:, :, None], axis=1)

    def back(g):
        gx = np.zeros_like(x.data)
        b = np.arange(x.shape[0])[:, None]
        np.add.at(gx, (b, idx), g)
        return (gx,)

    return _record(out, (x,), back)


# ------------------------------------------------------------- fused layers


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), back)


def softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError("softmax_rows", x.shape)
    return softmax(x, axis=-1)


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Affine-free normalisation over the last axis."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g - gm - xhat * (g * xhat).mean(axis=-1, keepdims=True)) * inv
        return (gx,)

    return _record(xhat, (x,), back)


def conv3x3(x, w) -> Tensor:
    """Same-padded 3x3 convolution, channel-last: x (B,H,W,Ci), w (3,3,Ci,Co)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.shape[:2] != (3, 3) or w.shape[2] != x.shape[3]:
        raise ShapeError("conv3x3", x.shape, w.shape)
    B, H, W, Ci = x.shape
    Co = w.shape[3]
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.concatenate([xp[:, dy:dy + H, dx:dx + W, :]
                           for dy in range(3) for dx in range(3)], axis=-1)
    wm = w.data.reshape(9 * Ci, Co)
    out = cols @ wm

    def back(g):
        gw = (cols.reshape(-1, 9 * Ci).T @ g.reshape(-1, Co)).reshape(w.shape)
        gc = (g @ wm.T).reshape(B, H, W, 9, Ci)
        gp = np.zeros_like(xp)
        k = 0
        for dy in range(3):
            for dx in range(3):
                gp[:, dy:dy + H, dx:dx + W, :] += gc[:, :, :, k, :]
                k += 1
        return gp[:, 1:-1, 1:-1, :], gw

    return _record(out, (x, w), back)


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D bilinear interpolation weights (n_out, n_in), half-pixel centres."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    return m


def resize(x, size: tuple[int, int]) -> Tensor:
    """Bilinear resize of a channel-last grid (..., H, W, C) to size (h, w)."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise ShapeError("resize", x.shape, size)
    H, W = x.shape[-3], x.shape[-2]
    h, w = size
    if (H, W) == (h, w):
        return x
    ry, rx = resize_matrix(H, h), resize_matrix(W, w)
    out = np.einsum("ih,jw,...hwc->...ijc", ry, rx, x.data)

    def back(g):
        return (np.einsum("ih,jw,...ijc->...hwc", ry, rx, g),)

    return _record(out, (x,), back)


def resize_grid(m: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize a plain (..., H, W) array bilinearly; no tape."""
    return resize(Tensor(np.asarray(m)[..., None]), size).data[..., 0]


# ------------------------------------------------------------------ autodiff


def _topo(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Parameter] | None = None) -> None:
    """Propagate d(loss)/d(.) to every trainable leaf reachable from ``loss``.

    Parameters listed in ``params`` that are not reachable get a zero
    gradient. Frozen parameters are left untouched.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if params is not None:
        for p in params:
            if p.trainable:
                p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaves are popped once, after every consumer has contributed
            node.grad = np.array(g, dtype=node.data.dtype).reshape(node.shape)
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + gp if key in grads else gp


def grad_check(f: Callable[[], Tensor], params: Sequence[Parameter], eps: float = 1e-5,
               max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` re-evaluates the scalar loss from the current parameter values. With
    ``max_coords`` set, that many coordinates per parameter are sampled.
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    params = [p for p in params if p.trainable]
    backward(f(), params)
    analytic = {p.name: p.grad.copy() for p in params}
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        a_flat = analytic[p.name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError(f"grad_check: non-finite loss at {p.name}[{i}]")
            num = (fp - fm) / (2 * eps)
            a = a_flat[i]
            err = abs(a - num) / max(1e-8, abs(a) + abs(num))
            worst = max(worst, err)
    return worst


# ----------------------------------------------------------------------- rng


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; pass it explicitly, never use global state."""
    return np.random.Generator(np.random.PCG64(seed))


# --------------------------------------------------------------- dump format


def dump_tensor(arr, fh) -> None:
    """Write ``RCT1 <rank> <d0> ...`` then little-endian float64 payload."""
    a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
    header = " ".join(["RCT1", str(a.ndim), *map(str, a.shape)]) + "\n"
    fh.write(header.encode("ascii"))
    fh.write(a.tobytes(order="C"))


def load_tensor(fh) -> np.ndarray | None:
    """Read one dumped tensor; returns None at a clean end of stream."""
    line = fh.readline()
    if not line:
        return None
    parts = line.decode("ascii").split()
    if not parts or parts[0] != "RCT1":
        raise ValueError(f"bad tensor header: {line[:40]!r}")
    rank = int(parts[1])
    shape = tuple(int(d) for d in parts[2:2 + rank])
    n = int(np.prod(shape)) if shape else 1
    buf = fh.read(8 * n)
    if len(buf) != 8 * n:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(buf, dtype="<f8").reshape(shape).astype(DTYPE)


def load_tensor_stream(path) -> list[np.ndarray]:
    out = []
    with open(path, "rb") as fh:
        while (t := load_tensor(fh)) is not None:
            out.append(t)
    return out
