"""A small dense-tensor reverse-mode autodiff engine on top of numpy.

Only the operations needed by the U-Net and the segmentation losses are
provided. Every op records a closure that pushes its output gradient onto its
inputs; :func:`backward` replays them in reverse topological order.

Training runs in float32. :func:`check_mode` switches newly created tensors to
float64, which is what :func:`grad_check` expects for tight tolerances.
"""

from __future__ import annotations

import contextlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DTYPE = [np.float32]
_GRAD_ENABLED = [True]


class NonFiniteError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf."""


def default_dtype():
    return _DTYPE[-1]


@contextlib.contextmanager
def check_mode():
    """Create tensors in float64 inside the block."""
    _DTYPE.append(np.float64)
    try:
        yield
    finally:
        _DTYPE.pop()


@contextlib.contextmanager
def no_grad():
    """Run forward ops without recording a tape."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    # make numpy defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, _parents=(), op="leaf"):
        if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=default_dtype())
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=default_dtype()))


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=default_dtype()), requires_grad=True)


def _result(data, parents, op, backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    if _GRAD_ENABLED[-1] and any(p.requires_grad for p in parents):
        out = Tensor(data, True, parents, op)
        out._backward = backward_fn
    else:
        out = Tensor(data, False, (), op)
    return out


def _accumulate(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True).reshape(t.data.shape)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if node._parents:
                # interior gradients are not needed after propagation
                node.grad = None


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), "sub", bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), "neg", lambda g: _accumulate(a, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), "mul", bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(a.data / b.data, (a, b), "div", bw)


def square(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data, (a,), "square", lambda g: _accumulate(a, 2 * g * a.data))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, (a,), "log", lambda g: _accumulate(a, g / a.data))


def clip(a, lo, hi) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where lo <= a <= hi."""
    a = as_tensor(a)
    lo_arr = lo.data if isinstance(lo, Tensor) else lo
    hi_arr = hi.data if isinstance(hi, Tensor) else hi
    inside = (a.data >= lo_arr) & (a.data <= hi_arr)
    out = np.clip(a.data, lo_arr, hi_arr).astype(a.data.dtype, copy=False)
    return _result(out, (a,), "clip", lambda g: _accumulate(a, g * inside))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), "sum", bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), "reshape", lambda g: _accumulate(a, g.reshape(a.shape)))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] += g
        _accumulate(a, full)

    return _result(np.asarray(a.data[index]), (a,), "getitem", bw)


def stack_scalars(items) -> Tensor:
    items = [as_tensor(t) for t in items]
    data = np.array([t.data for t in items], dtype=items[0].data.dtype)

    def bw(g):
        for i, t in enumerate(items):
            _accumulate(t, g[i])

    return _result(data, tuple(items), "stack", bw)


# ---------------------------------------------------------------------------
# network ops; batches are laid out (C, N, H, W), the same order as a
# (channel, slice, row, col) volume
# ---------------------------------------------------------------------------


def _same_padding(k: int) -> int:
    if k % 2 == 0:
        raise ValueError(f"'same' padding needs an odd kernel, got {k}")
    return (k - 1) // 2


def conv2d(x, w, b=None, stride: int = 1, padding="same") -> Tensor:
    """2D cross-correlation via im2col.

    ``x`` is (C, N, H, W), ``w`` is (O, C, kh, kw) and ``b`` is (O,).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[0] != w.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape} vs kernel {w.shape}")
    C, N, H, W = x.shape
    O, _, kh, kw = w.shape
    if padding == "same":
        ph, pw = _same_padding(kh), _same_padding(kw)
    elif padding == "valid":
        ph = pw = 0
    else:
        ph = pw = int(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2:4]
    cols = win.transpose(0, 4, 5, 1, 2, 3).reshape(C * kh * kw, N * Ho * Wo)
    w2d = w.data.reshape(O, -1)
    out = w2d @ cols
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (O,):
            raise ValueError(f"conv2d bias shape {b.shape} does not match {O} output channels")
        out += b.data[:, None]
        parents = (x, w, b)
    out = out.reshape(O, N, Ho, Wo)

    def bw(g):
        g2d = g.reshape(O, -1)
        if w.requires_grad:
            _accumulate(w, (g2d @ cols.T).reshape(w.shape))
        if b is not None and b.requires_grad:
            _accumulate(b, g2d.sum(axis=1))
        if x.requires_grad:
            dcols = (w2d.T @ g2d).reshape(C, kh, kw, N, Ho, Wo)
            dxp = np.zeros(xp.shape, dtype=x.data.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[:, i, j]
            _accumulate(x, dxp[:, :, ph : ph + H, pw : pw + W])

    return _result(out, parents, "conv2d", bw)


def maxpool2(x) -> Tensor:
    """2x2 max pooling, stride 2. Ties route the gradient to the first maximum."""
    x = as_tensor(x)
    C, N, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {x.shape}")
    blocks = x.data.reshape(C, N, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(C, N, H // 2, W // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(C, N, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(C, N, H, W)
        _accumulate(x, gx)

    return _result(out, (x,), "maxpool2", bw)


def upsample2_nearest(x) -> Tensor:
    x = as_tensor(x)
    C, N, H, W = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return _result(
        out, (x,), "upsample2", lambda g: _accumulate(x, g.reshape(C, N, H, 2, W, 2).sum(axis=(3, 5)))
    )


def concat_channels(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    if x.ndim != 4 or y.ndim != 4 or x.shape[1:] != y.shape[1:]:
        raise ValueError(f"concat_channels shape mismatch: {x.shape} vs {y.shape}")
    cx = x.shape[0]

    def bw(g):
        _accumulate(x, g[:cx])
        _accumulate(y, g[cx:])

    return _result(np.concatenate([x.data, y.data], axis=0), (x, y), "concat", bw)


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * x.data.dtype.type(slope))
    return _result(out, (x,), "leaky_relu", lambda g: _accumulate(x, np.where(pos, g, g * slope)))


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=None):
        dtype = dtype or default_dtype()
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm(x, gamma, beta, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel batch normalization over (N, H, W) of a (C, N, H, W) input.

    In training mode batch statistics are used and the running statistics are
    updated in place; otherwise the running statistics define a fixed affine map.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    C = x.shape[0]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"batchnorm parameter shapes {gamma.shape}/{beta.shape} vs {C} channels")
    axes = (1, 2, 3)
    bshape = (C, 1, 1, 1)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = x.data.size // C
        state.mean[...] = state.momentum * state.mean + (1 - state.momentum) * mu
        unbiased = var * m / max(m - 1, 1)
        state.var[...] = state.momentum * state.var + (1 - state.momentum) * unbiased
    else:
        mu, var = state.mean, state.var
    inv = (1.0 / np.sqrt(var + state.eps)).astype(x.data.dtype)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def bw(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=axes))
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if training:
                m = x.data.size // C
                s1 = dxhat.sum(axis=axes, keepdims=True)
                s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
                dx = (inv.reshape(bshape) / m) * (m * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * inv.reshape(bshape)
            _accumulate(x, dx)

    return _result(out, (x, gamma, beta), "batchnorm", bw)


def softmax_channels(x) -> Tensor:
    """Softmax across the channel axis (axis 0) at every location."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=0, keepdims=True)

    def bw(g):
        _accumulate(x, s * (g - (g * s).sum(axis=0, keepdims=True)))

    return _result(s, (x,), "softmax", bw)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tol: float
    worst: tuple | None = None
    flagged: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def rel_error(a: float, b: float, floor: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(f, x, eps: float = 1e-6, tol: float = 1e-4, coords=None, floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` with central differences.

    ``x`` is a Tensor or a list of Tensors that ``f`` reads. ``coords`` is an
    optional list of ``(tensor_index, flat_index)`` pairs; by default every
    coordinate is probed. Coordinates where the left and right one-sided
    slopes disagree (a kink such as a max-pool tie) are reported in
    ``flagged`` and left out of ``max_rel_error``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    out = f()
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    f0 = float(out.data)
    backward(out)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in xs]
    if coords is None:
        coords = [(i, j) for i, t in enumerate(xs) for j in range(t.data.size)]

    worst_err, worst, flagged = 0.0, None, []
    for ti, j in coords:
        flat = xs[ti].data.reshape(-1)
        orig = flat[j].copy()
        flat[j] = orig + eps
        fp = float(f().data)
        flat[j] = orig - eps
        fm = float(f().data)
        flat[j] = orig
        numeric = (fp - fm) / (2 * eps)
        a = float(analytic[ti].reshape(-1)[j])
        err = rel_error(a, numeric, floor)
        if err >= tol:
            right, left = (fp - f0) / eps, (f0 - fm) / eps
            if rel_error(right, left, floor) > 10 * tol:
                flagged.append((ti, j))
                continue
        if err > worst_err or worst is None:
            worst_err, worst = err, (ti, j)
    return GradCheckReport(worst_err, len(coords), tol, worst, flagged)


# ---------------------------------------------------------------------------
# checkpoint format: float32 little-endian blob + JSON index
# ---------------------------------------------------------------------------


def save_checkpoint(arrays: dict, path) -> None:
    path = Path(path)
    index, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        blobs.append(buf)
        offset += len(buf)
    path.write_bytes(b"".join(blobs))
    path.with_suffix(".json").write_text(json.dumps({"dtype": "f32", "tensors": index}, indent=1))


def load_checkpoint(path) -> dict:
    path = Path(path)
    index = json.loads(path.with_suffix(".json").read_text())
    raw = path.read_bytes()
    out = {}
    for entry in index["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=entry["offset"])
        out[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    return out
