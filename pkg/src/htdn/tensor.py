"""Reverse-mode automatic differentiation on numpy storage.

A `Tensor` wraps a float32/float64 ndarray together with an optional
gradient buffer and a backward closure.  Operations build a DAG; calling
`backward()` on a scalar walks the graph once in reverse topological
order.  Gradients accumulate into leaf tensors until cleared, which is
what an optimizer step expects.

The structured operations (conv2d, maxpool2d, dropout, fuse_outer,
bce_with_logits) accept both single instances (C,H,W) and batches
(B,C,H,W); the batch form exists purely for throughput.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ContractError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)


def _as_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = _as_array(data)
        if self.data.size == 0:
            raise ShapeError("empty tensors are not allowed")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents  # parents that require grad, for the topo walk
        self._backward = _backward

    # -- introspection -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def is_leaf(self):
        return not self._parents

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def assert_finite(self, what="tensor"):
        if not np.all(np.isfinite(self.data)):
            raise ContractError(f"{what} contains non-finite values")
        return self

    # -- autodiff ----------------------------------------------------------

    def backward(self, free_graph: bool = True):
        """Reverse pass from a scalar.  Leaf gradients accumulate.

        The graph is one-shot.  By default the pass drops every interior
        node's closure, parent links and scratch gradient on the way out,
        so the large buffers those closures capture (im2col columns and
        friends) are released immediately instead of sitting in reference
        cycles until the collector gets around to them.  Pass
        free_graph=False to keep the graph alive for a second pass.
        """
        if self.size != 1:
            raise ContractError(f"backward() requires a scalar, got shape {self.shape}")
        order = _topo_order(self)
        for node in order:
            if node._parents:
                node.grad = None  # intermediate grads are per-backward scratch
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()
        if free_graph:
            for node in order:
                if node._parents:
                    node._backward = None
                    node._parents = ()
                    node.grad = None

    def zero_grad(self):
        self.grad = None

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return multiply(self, -1.0)

    def __sub__(self, other):
        return add(self, -_coerce(other, self.dtype))

    def __rsub__(self, other):
        return add(_coerce(other, self.dtype), -self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return _reduce(self, axis, keepdims, mean=False)

    def mean(self, axis=None, keepdims=False):
        return _reduce(self, axis, keepdims, mean=True)

    def reshape(self, *shape):
        return reshape(self, *shape)


def _topo_order(root: Tensor):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order  # dependencies first


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad = t.grad + g


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_same_dtype(a: Tensor, b: Tensor, op: str):
    if a.dtype != b.dtype:
        raise ContractError(f"{op}: mixed dtypes {a.dtype} and {b.dtype}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_or_raise(a: Tensor, b: Tensor, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise and matmul -------------------------------------------------


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = _coerce(b, a.dtype)
    _check_same_dtype(a, b, "add")
    _broadcast_or_raise(a, b, "add")
    req = a.requires_grad or b.requires_grad
    out = Tensor(a.data + b.data, req, _parents=tuple(t for t in (a, b) if t.requires_grad))

    if req:
        def _bw():
            g = out.grad
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g, b.shape))

        out._backward = _bw
    return out


def multiply(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = _coerce(b, a.dtype)
    _check_same_dtype(a, b, "multiply")
    _broadcast_or_raise(a, b, "multiply")
    req = a.requires_grad or b.requires_grad
    out = Tensor(a.data * b.data, req, _parents=tuple(t for t in (a, b) if t.requires_grad))

    if req:
        def _bw():
            g = out.grad
            if a.requires_grad:
                _accum(a, _unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g * a.data, b.shape))

        out._backward = _bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise ContractError("matmul expects two Tensors")
    _check_same_dtype(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    req = a.requires_grad or b.requires_grad
    out = Tensor(np.matmul(a.data, b.data), req,
                 _parents=tuple(t for t in (a, b) if t.requires_grad))

    if req:
        def _bw():
            g = out.grad
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                _accum(a, _unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                _accum(b, _unbroadcast(gb, b.shape))

        out._backward = _bw
    return out


# -- activations --------------------------------------------------------------


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    out = Tensor(s, x.requires_grad, _parents=(x,) if x.requires_grad else ())
    if x.requires_grad:
        def _bw():
            _accum(x, out.grad * s * (1.0 - s))

        out._backward = _bw
    return out


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out = Tensor(t, x.requires_grad, _parents=(x,) if x.requires_grad else ())
    if x.requires_grad:
        def _bw():
            _accum(x, out.grad * (1.0 - t * t))

        out._backward = _bw
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0), x.requires_grad,
                 _parents=(x,) if x.requires_grad else ())
    if x.requires_grad:
        mask = x.data > 0

        def _bw():
            _accum(x, out.grad * mask)

        out._backward = _bw
    return out


# -- shape ops ----------------------------------------------------------------


def _reduce(x: Tensor, axis, keepdims, mean: bool) -> Tensor:
    if mean:
        data = x.data.mean(axis=axis, keepdims=keepdims)
    else:
        data = x.data.sum(axis=axis, keepdims=keepdims)
    out = Tensor(data, x.requires_grad, _parents=(x,) if x.requires_grad else ())
    if x.requires_grad:
        count = x.size if axis is None else np.prod(
            [x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])

        def _bw():
            g = out.grad
            if not keepdims and axis is not None:
                axes = axis if isinstance(axis, tuple) else (axis,)
                shape = list(out.grad.shape)
                for a in sorted(a % x.ndim for a in axes):
                    shape.insert(a, 1)
                g = g.reshape(shape)
            g = np.broadcast_to(g, x.shape)
            _accum(x, g / count if mean else g)

        out._backward = _bw
    return out


def reshape(x: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    new = np.reshape(x.data, shape)
    out = Tensor(new, x.requires_grad, _parents=(x,) if x.requires_grad else ())
    if x.requires_grad:
        def _bw():
            _accum(x, out.grad.reshape(x.shape))

        out._backward = _bw
    return out


def time_slice(x: Tensor, step: int) -> Tensor:
    """x[:, step, :] for a rank-3 tensor, with gradient scatter on the way back."""
    if x.ndim != 3:
        raise ShapeError(f"time_slice expects rank 3, got {x.shape}")
    if not 0 <= step < x.shape[1]:
        raise ShapeError(f"step {step} out of range for {x.shape}")
    data = np.ascontiguousarray(x.data[:, step, :])
    out = Tensor(data, x.requires_grad, _parents=(x,) if x.requires_grad else ())
    if x.requires_grad:
        def _bw():
            g = np.zeros_like(x.data)
            g[:, step, :] = out.grad
            _accum(x, g)

        out._backward = _bw
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    dtype = tensors[0].dtype
    for t in tensors:
        _check_same_dtype(tensors[0], t, "concat")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from e
    req = any(t.requires_grad for t in tensors)
    out = Tensor(data, req, _parents=tuple(t for t in tensors if t.requires_grad))

    if req:
        sizes = [t.shape[axis] for t in tensors]

        def _bw():
            g = out.grad
            start = 0
            for t, n in zip(tensors, sizes):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(start, start + n)
                    _accum(t, g[tuple(idx)])
                start += n

        out._backward = _bw
    return out


# -- structured ops ------------------------------------------------------------


def _to_batched(x: Tensor, op: str):
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"{op} expects (C,H,W) or (B,C,H,W), got {x.shape}")


def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    b, c, _, _ = xp.shape
    cols = np.empty((b, c, k, k, ho, wo), dtype=xp.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = xp[:, :, ki:ki + s * ho:s, kj:kj + s * wo:s]
    return cols.reshape(b, c * k * k, ho * wo)


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with square kernels.  No implicit bias."""
    _check_same_dtype(x, kernels, "conv2d")
    if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise ShapeError(f"conv2d kernels must be (C_out,C_in,k,k), got {kernels.shape}")
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d: stride must be >=1 and padding >=0, got {stride}, {padding}")
    xd, squeeze = _to_batched(x, "conv2d")
    b, c, h, w = xd.shape
    c_out, c_in, k, _ = kernels.shape
    if c != c_in:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernels expect {c_in}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d kernel {k}x{k} exceeds padded input {h + 2 * padding}x{w + 2 * padding}")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = _im2col(xp, k, stride, ho, wo)          # (B, C*k*k, Ho*Wo)
    w2 = kernels.data.reshape(c_out, c_in * k * k)
    res = np.matmul(w2, cols).reshape(b, c_out, ho, wo)
    if squeeze:
        res = res[0]
    req = x.requires_grad or kernels.requires_grad
    out = Tensor(res, req, _parents=tuple(t for t in (x, kernels) if t.requires_grad))

    if req:
        def _bw():
            g2 = out.grad.reshape(b, c_out, ho * wo)
            if kernels.requires_grad:
                dw = np.einsum("bol,bcl->oc", g2, cols).reshape(kernels.shape)
                _accum(kernels, dw)
            if x.requires_grad:
                dcols = np.matmul(w2.T, g2).reshape(b, c, k, k, ho, wo)
                dxp = np.zeros_like(xp)
                for ki in range(k):
                    for kj in range(k):
                        dxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += dcols[:, :, ki, kj]
                dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
                _accum(x, dx[0] if squeeze else dx)

        out._backward = _bw
    return out


def maxpool2d(x: Tensor, window: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling; gradient routes to the first maximum in row-major order."""
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ContractError(f"maxpool2d: window and stride must be >=1, got {window}, {stride}")
    xd, squeeze = _to_batched(x, "maxpool2d")
    b, c, h, w = xd.shape
    if window > h or window > w:
        raise ShapeError(f"maxpool2d window {window} exceeds spatial dims {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1

    win = np.empty((b, c, ho, wo, window, window), dtype=xd.dtype)
    for wi in range(window):
        for wj in range(window):
            win[:, :, :, :, wi, wj] = xd[:, :, wi:wi + stride * ho:stride, wj:wj + stride * wo:stride]
    flat = win.reshape(b, c, ho, wo, window * window)
    idx = flat.argmax(axis=-1)  # ties: first occurrence, row-major within the window
    res = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out_data = res[0] if squeeze else res
    out = Tensor(out_data, x.requires_grad, _parents=(x,) if x.requires_grad else ())

    if x.requires_grad:
        def _bw():
            g = out.grad.reshape(b, c, ho, wo)
            hi = (np.arange(ho) * stride)[None, None, :, None] + idx // window
            wj = (np.arange(wo) * stride)[None, None, None, :] + idx % window
            bi = np.arange(b)[:, None, None, None]
            ci = np.arange(c)[None, :, None, None]
            lin = ((bi * c + ci) * h + hi) * w + wj
            dx = np.zeros(b * c * h * w, dtype=xd.dtype)
            np.add.at(dx, lin.ravel(), g.ravel())
            dx = dx.reshape(b, c, h, w)
            _accum(x, dx[0] if squeeze else dx)

        out._backward = _bw
    return out


def dropout(x: Tensor, p: float, training: bool, prng) -> Tensor:
    """Inverted dropout: scales kept values by 1/(1-p) at train time."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout rate must be in [0,1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (prng.random(size=x.shape) >= p).astype(x.dtype)
    scale = x.dtype.type(1.0 / (1.0 - p))
    factor = keep * scale
    out = Tensor(x.data * factor, x.requires_grad, _parents=(x,) if x.requires_grad else ())
    if x.requires_grad:
        def _bw():
            _accum(x, out.grad * factor)

        out._backward = _bw
    return out


def fuse_outer(hl: Tensor, hv: Tensor) -> Tensor:
    """Outer product of a language vector with per-slot vision rows.

    (d_l,) x (S,d_v) -> (S,d_v,d_l), or batched (B,d_l) x (B,S,d_v) ->
    (B,S,d_v,d_l).  out[s,j,k] = hv[s,j] * hl[k].
    """
    _check_same_dtype(hl, hv, "fuse_outer")
    if hl.ndim == 1 and hv.ndim == 2:
        data = hv.data[:, :, None] * hl.data[None, None, :]
        spec = ("sjk,sj->k", "sjk,k->sj")
    elif hl.ndim == 2 and hv.ndim == 3:
        if hl.shape[0] != hv.shape[0]:
            raise ShapeError(f"fuse_outer batch mismatch: {hl.shape} vs {hv.shape}")
        data = hv.data[:, :, :, None] * hl.data[:, None, None, :]
        spec = ("bsjk,bsj->bk", "bsjk,bk->bsj")
    else:
        raise ShapeError(f"fuse_outer expects (d_l,)+(S,d_v) or (B,d_l)+(B,S,d_v), got {hl.shape}, {hv.shape}")
    req = hl.requires_grad or hv.requires_grad
    out = Tensor(data, req, _parents=tuple(t for t in (hl, hv) if t.requires_grad))

    if req:
        def _bw():
            g = out.grad
            if hl.requires_grad:
                _accum(hl, np.einsum(spec[0], g, hv.data))
            if hv.requires_grad:
                _accum(hv, np.einsum(spec[1], g, hl.data))

        out._backward = _bw
    return out


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on raw scores; stable for large |logit|."""
    z = logits.data.reshape(-1)
    y = np.asarray(targets, dtype=z.dtype).reshape(-1)
    if z.shape != y.shape:
        raise ShapeError(f"bce_with_logits: {logits.shape} logits vs {y.shape} targets")
    losses = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = Tensor(np.asarray(losses.mean(), dtype=z.dtype), logits.requires_grad,
                 _parents=(logits,) if logits.requires_grad else ())
    if logits.requires_grad:
        def _bw():
            dz = (_stable_sigmoid(z) - y) / z.size
            _accum(logits, out.grad.reshape(()) * dz.reshape(logits.shape))

        out._backward = _bw
    return out


# -- initializers ----------------------------------------------------------------


def xavier_uniform(shape, fan_in: int, fan_out: int, prng, dtype=np.float32) -> Tensor:
    """Glorot uniform draw on [-b, b] with b = sqrt(6 / (fan_in + fan_out))."""
    if fan_in <= 0 or fan_out <= 0:
        raise ContractError(f"xavier_uniform fans must be positive, got {fan_in}, {fan_out}")
    b = float(np.sqrt(6.0 / (fan_in + fan_out)))
    data = prng.uniform(-b, b, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


def zeros_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


# -- serialization ----------------------------------------------------------------

TENSOR_MAGIC = b"HTTN"
TENSOR_VERSION = 1


def tensor_to_bytes(t: Tensor) -> bytes:
    """Magic 'HTTN', u16 version, u8 rank, u64 dims, float32 LE row-major."""
    dims = t.shape
    head = struct.pack("<4sHB", TENSOR_MAGIC, TENSOR_VERSION, len(dims))
    head += struct.pack(f"<{len(dims)}Q", *dims) if dims else b""
    return head + np.ascontiguousarray(t.data, dtype="<f4").tobytes()


def tensor_from_bytes(buf: bytes) -> Tensor:
    if len(buf) < 7:
        raise ContractError("tensor blob too short for header")
    magic, version, rank = struct.unpack_from("<4sHB", buf, 0)
    if magic != TENSOR_MAGIC:
        raise ContractError(f"bad tensor magic {magic!r}")
    if version != TENSOR_VERSION:
        raise ContractError(f"unsupported tensor format version {version}")
    off = 7
    dims = struct.unpack_from(f"<{rank}Q", buf, off) if rank else ()
    off += 8 * rank
    count = int(np.prod(dims)) if dims else 1
    expected = off + 4 * count
    if len(buf) != expected:
        raise ContractError(f"tensor blob length {len(buf)} != expected {expected}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims)
    return Tensor(np.array(data, dtype=np.float32))


def save_tensor(path, t: Tensor) -> None:
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as f:
        return tensor_from_bytes(f.read())
