"""Dense float64 tensors with reverse-mode differentiation.

Just enough machinery for the segmentation network: broadcasting
arithmetic, matmul, 1-D and 2-D (im2col) convolution, bilinear upsampling,
relu, channel softmax, fused cross-entropy, reductions and reshaping.

Gradient rule: ``backward`` accumulates into the ``grad`` of every leaf
created with ``requires_grad=True`` (call ``zero_grad`` between steps). A
graph can be back-propagated once; a second call raises ``RuntimeError``.
"""

from __future__ import annotations

import json
import struct
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

CHECKPOINT_MAGIC = b"OSEGPAR\x00"
CHECKPOINT_VERSION = 1


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, *, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = _parents
        self._backward = _backward
        self._consumed = False

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        backward(self)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: mul(self, -1.0)
    __sub__ = lambda self, other: add(self, mul(other, -1.0))
    __rsub__ = lambda self, other: add(other, mul(self, -1.0))
    __getitem__ = lambda self, idx: getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op result; the graph is only kept when some input needs grads."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=tuple(parents), _backward=backward_fn, op=op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _shape_error(op: str, a: tuple, b: tuple, why: str = "") -> ValueError:
    return ValueError(f"{op}: incompatible shapes {a} and {b}" + (f" ({why})" if why else ""))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise _shape_error("add", a.shape, b.shape) from None

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make(out, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise _shape_error("mul", a.shape, b.shape) from None

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _make(out, (a, b), bw, "mul")


def matmul(a, b) -> Tensor:
    """Batched matmul with numpy broadcasting over leading dims (both >= 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise _shape_error("matmul", a.shape, b.shape, "operands must be at least 2-D")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise _shape_error("matmul", a.shape, b.shape) from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _make(out, (a, b), bw, "matmul")


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0

    def bw(g):
        return (g * pos,)
    return _make(np.where(pos, x.data, 0.0), (x,), bw, "relu")


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _make(np.asarray(out), (x,), bw, "reduce_sum")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.shape),)
    return _make(out, (x,), bw, "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)
    return _make(np.transpose(x.data, axes), (x,), bw, "transpose")


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    out = x.data[idx]

    def bw(g):
        gx = np.zeros_like(x.data)
        if _is_advanced(idx):
            np.add.at(gx, idx, g)
        else:
            gx[idx] = g
        return (gx,)
    return _make(np.array(out), (x,), bw, "getitem")


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ValueError("concat: incompatible shapes " + ", ".join(str(t.shape) for t in ts)) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))
    return _make(out, ts, bw, "concat")


def softmax_over_channel(x, axis: int = 1) -> Tensor:
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)
    return _make(s, (x,), bw, "softmax")


def softmax_cross_entropy(logits, target: np.ndarray, axis: int = 1, floor: float = 1e-12) -> Tensor:
    """Sum over positions of ``-ln max(p_true, floor)``, p = softmax along ``axis``.

    ``target`` holds integer class indices with ``axis`` removed. Positions
    whose probability sits below the floor contribute a constant (zero
    gradient).
    """
    logits = as_tensor(logits)
    target = np.asarray(target)
    ax = axis % logits.ndim
    n_cls = logits.shape[ax]
    expected = logits.shape[:ax] + logits.shape[ax + 1:]
    if target.shape != expected:
        raise _shape_error("softmax_cross_entropy", logits.shape, target.shape,
                           f"target must have shape {expected}")
    if not np.issubdtype(target.dtype, np.integer) or target.min(initial=0) < 0 or target.max(initial=0) >= n_cls:
        raise ValueError(f"target class codes must be integers in [0, {n_cls})")
    z = logits.data - np.max(logits.data, axis=ax, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=ax, keepdims=True)
    t = np.expand_dims(target, ax)
    p_true = np.take_along_axis(s, t, axis=ax)
    clamped = p_true < floor
    loss = -np.sum(np.log(np.maximum(p_true, floor)))

    def bw(g):
        grad = s.copy()
        np.put_along_axis(grad, t, np.take_along_axis(grad, t, axis=ax) - 1.0, axis=ax)
        grad = np.where(clamped, 0.0, grad)
        return (grad * g,)
    return _make(np.asarray(loss), (logits,), bw, "softmax_cross_entropy")


def _conv_out_len(n: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def same_padding(k: int, dilation: int = 1) -> int:
    """Zero padding that keeps the length (divided by stride) for odd ``k``."""
    return dilation * (k - 1) // 2


def _pad_axis(x: np.ndarray, axis: int, p: int) -> np.ndarray:
    if p == 0:
        return x
    widths = [(0, 0)] * x.ndim
    widths[axis] = (p, p)
    return np.pad(x, widths)


def _axis_slice(ndim: int, axis: int, start: int, stop: int, step: int) -> tuple:
    sl = [slice(None)] * ndim
    sl[axis] = slice(start, stop, step)
    return tuple(sl)


def conv1d_along_axis(x, kernel, axis: int, stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate along one axis with per-group 1-D kernels.

    ``kernel`` has shape ``(*G, k)``. The group dims ``G`` line up with the
    axes of ``x`` right after the leading batch axis and broadcast
    numpy-style; any remaining trailing axes of ``x`` are shared. So with
    ``x`` of shape (N, 1, C, H, W) and a (F, C, k) kernel along H the result
    is (N, F, C, H', W): each of the F*C pairs gets its own filter.
    ``padding`` zeros are added to both ends of the axis.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    axis = axis % x.ndim
    k = kernel.shape[-1]
    groups = kernel.shape[:-1]
    if x.ndim < len(groups) + 2 or axis <= len(groups):
        raise _shape_error("conv1d_along_axis", x.shape, kernel.shape,
                           "kernel group dims must precede the convolution axis")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("stride and dilation must be >= 1 and padding >= 0")
    n_out = _conv_out_len(x.shape[axis], k, stride, dilation, padding)
    if n_out < 1:
        raise _shape_error("conv1d_along_axis", x.shape, kernel.shape, "kernel longer than padded input")
    kshape = (1,) + groups + (1,) * (x.ndim - 1 - len(groups))
    xp = _pad_axis(x.data, axis, padding)
    span = stride * (n_out - 1) + 1
    slices = [_axis_slice(x.ndim, axis, j * dilation, j * dilation + span, stride) for j in range(k)]
    kv = [kernel.data[..., j].reshape(kshape) for j in range(k)]
    try:
        out = sum(kv[j] * xp[slices[j]] for j in range(k))
    except ValueError:
        raise _shape_error("conv1d_along_axis", x.shape, kernel.shape, "group dims do not broadcast") from None

    def bw(g):
        gxp = np.zeros_like(xp)
        gk = np.empty(kernel.shape)
        for j in range(k):
            gxp[slices[j]] += _unbroadcast(g * kv[j], xp[slices[j]].shape)
            gk[..., j] = _unbroadcast(g * xp[slices[j]], kshape).reshape(groups)
        gx = gxp[_axis_slice(x.ndim, axis, padding, padding + x.shape[axis], 1)] if padding else gxp
        return gx, gk
    return _make(out, (x, kernel), bw, "conv1d")


def _im2col(xp: np.ndarray, ky: int, kx: int, ho: int, wo: int, stride: int, dilation: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, ky, kx, ho, wo))
    for i in range(ky):
        for j in range(kx):
            y0, x0 = i * dilation, j * dilation
            cols[:, :, i, j] = xp[:, :, y0:y0 + stride * (ho - 1) + 1:stride, x0:x0 + stride * (wo - 1) + 1:stride]
    return cols.reshape(n, c * ky * kx, ho * wo)


def conv2d(x, weight, stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, x (N, C, H, W) with weight (F, C, ky, kx), via im2col + GEMM."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise _shape_error("conv2d", x.shape, weight.shape, "expected (N,C,H,W) and (F,C,ky,kx)")
    n, c, h, w = x.shape
    f, _, ky, kx = weight.shape
    ho = _conv_out_len(h, ky, stride, dilation, padding)
    wo = _conv_out_len(w, kx, stride, dilation, padding)
    if ho < 1 or wo < 1:
        raise _shape_error("conv2d", x.shape, weight.shape, "kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, ky, kx, ho, wo, stride, dilation)
    w2 = weight.data.reshape(f, -1)
    out = np.matmul(w2, cols).reshape(n, f, ho, wo)

    def bw(g):
        g2 = g.reshape(n, f, ho * wo)
        gw = None
        if weight.requires_grad:
            gw = np.zeros_like(w2)
            for b in range(n):
                gw += g2[b] @ cols[b].T
            gw = gw.reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2).reshape(n, c, ky, kx, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(ky):
                for j in range(kx):
                    y0, x0 = i * dilation, j * dilation
                    gxp[:, :, y0:y0 + stride * (ho - 1) + 1:stride, x0:x0 + stride * (wo - 1) + 1:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw
    return _make(out, (x, weight), bw, "conv2d")


def _interp_matrix(n_in: int, factor: int) -> np.ndarray:
    """Half-pixel-centred linear interpolation weights, edges clamped."""
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def bilinear_upsample(x, factor: int = 2) -> Tensor:
    """Upsample the last two axes by an integer ``factor``."""
    x = as_tensor(x)
    if x.ndim < 2 or factor < 1:
        raise ValueError("bilinear_upsample needs >= 2-D input and factor >= 1")
    ah = _interp_matrix(x.shape[-2], factor)
    aw = _interp_matrix(x.shape[-1], factor)
    out = np.matmul(ah, np.matmul(x.data, aw.T))

    def bw(g):
        return (np.matmul(ah.T, np.matmul(g, aw)),)
    return _make(out, (x,), bw, "upsample")


def _topo_order(root: Tensor) -> list[Tensor]:
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
    return order[::-1]


def backward(loss: Tensor) -> None:
    """Back-propagate a scalar; leaf gradients accumulate."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("graph already back-propagated; rebuild it with a new forward pass")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor with requires_grad=True")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in _topo_order(loss):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
        node._consumed = True
        node._backward = _consumed_backward
        node._parents = ()


def _consumed_backward(g):
    raise RuntimeError("graph already back-propagated")


def grad(loss_fn: Callable[..., Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss_fn(*params)`` w.r.t. ``params`` (grads reset first)."""
    for p in params:
        p.grad = None
    backward(loss_fn(*params))
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]


def save_params(path, params: Mapping[str, Tensor | np.ndarray]) -> None:
    """Versioned binary checkpoint: magic, version, JSON layer table, little-endian doubles."""
    layers, blobs = [], []
    for name, value in params.items():
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
        layers.append({"name": name, "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(arr).tobytes())
    header = json.dumps({"format_version": CHECKPOINT_VERSION, "layers": layers},
                        separators=(",", ":"), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    out = {}
    for layer in header["layers"]:
        shape = tuple(layer["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        if offset + 8 * n > len(raw):
            raise ValueError(f"{path}: truncated checkpoint at layer {layer['name']}")
        out[layer["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape).copy()
        offset += 8 * n
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes after last layer")
    return out


def parameters(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad and t.is_leaf]
