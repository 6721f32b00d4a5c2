"""Minimal dense tensors with reverse-mode automatic differentiation.

Every operation that touches a tensor requiring gradients appends a node to
the tape. Nodes carry a monotonically increasing sequence number, so the tape
of a loss is the set of its ancestor nodes ordered by that number, and the
backward pass walks it in strict reverse order.

All data is float64. Shapes are explicit: there is no broadcasting except the
per-channel bias add inside convolutions and linear layers.
"""

from __future__ import annotations

import contextlib
import itertools
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Node",
    "Tape",
    "ShapeError",
    "no_grad",
    "tensor",
    "parameter",
    "conv3d",
    "conv_transpose3d",
    "conv2d",
    "instance_norm",
    "relu",
    "sigmoid",
    "elementwise",
    "linear",
    "concat_channels",
    "add",
    "sub",
    "mul",
    "scale",
    "tsum",
    "tmean",
    "reshape",
    "crop",
    "take",
    "roi_max_pool3d",
    "roi_bins",
    "loss_bce_with_logits",
    "loss_cross_entropy",
    "loss_huber",
    "backward",
    "sgd_step",
    "zero_grad",
    "gradcheck",
    "save_checkpoint",
    "load_checkpoint",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


_seq = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording on the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@dataclass(eq=False)
class Node:
    kind: str
    inputs: tuple
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    seq: int = field(default_factory=lambda: next(_seq))


class Tensor:
    """A float64 array that can sit on the differentiation tape."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        if any(n <= 0 for n in self.data.shape):
            raise ShapeError(f"extents must be positive, got {self.data.shape}")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _wrap(other, self.shape))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self.shape))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(shape, float(x)))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    t = Tensor(data, requires_grad=True)
    t.zero_grad()
    return t


def _record(kind: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    t = Tensor(out)
    if _grad_enabled() and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        t.node = Node(kind, tuple(inputs), backward_fn)
    return t


class Tape:
    """The ordered node sequence that produced a tensor.

    Built on demand from the graph of a loss: nodes are ordered by their
    append sequence number, which places every node after its inputs.
    """

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def of(cls, out: Tensor) -> "Tape":
        seen: dict[int, Node] = {}
        stack = [out.node] if out.node is not None else []
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen[id(node)] = node
            for inp in node.inputs:
                if inp.node is not None and id(inp.node) not in seen:
                    stack.append(inp.node)
        return cls(sorted(seen.values(), key=lambda n: n.seq))

    def __len__(self) -> int:
        return len(self.nodes)

    def kinds(self) -> list[str]:
        return [n.kind for n in self.nodes]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requiring leaf.

    Gradients add onto existing buffers; call :func:`zero_grad` (or
    :func:`sgd_step`, which zeroes) between steps.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss.node is None:
        loss.grad = (loss.grad if loss.grad is not None else 0.0) + np.ones_like(loss.data)
        return
    tape = Tape.of(loss)
    grads: dict[int, np.ndarray] = {id(loss.node): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is not None:
                key = id(inp.node)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
            else:
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=np.float64, copy=True).reshape(inp.shape)
                else:
                    inp.grad += gi.reshape(inp.shape)


def zero_grad(params: Mapping[str, Tensor] | Iterable[Tensor]) -> None:
    for p in _param_list(params):
        p.zero_grad()


def _param_list(params) -> list[Tensor]:
    if isinstance(params, Mapping):
        return list(params.values())
    return list(params)


def sgd_step(params: Mapping[str, Tensor] | Iterable[Tensor], lr: float) -> None:
    """Plain SGD: ``p <- p - lr * grad``, then zero every gradient."""
    items = params.items() if isinstance(params, Mapping) else enumerate(params)
    items = list(items)
    for name, p in items:
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient buffer")
    for _, p in items:
        if lr != 0.0:
            p.data -= lr * p.grad
        p.grad = np.zeros_like(p.data)


# ----------------------------------------------------------------------------
# convolution kernels


def _triple(v, nd: int) -> tuple:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * nd
    v = tuple(int(a) for a in v)
    if len(v) != nd:
        raise ShapeError(f"expected {nd} values, got {v}")
    return v


def _im2col(xp: np.ndarray, k: tuple, stride: tuple):
    """Return columns of shape (C*prod(k), N) and the output extents."""
    nd = len(k)
    axes = tuple(range(1, nd + 1))
    v = sliding_window_view(xp, k, axis=axes)
    v = v[(slice(None),) + tuple(slice(None, None, s) for s in stride)]
    out_sp = v.shape[1 : nd + 1]
    perm = (0,) + tuple(range(nd + 1, 2 * nd + 1)) + tuple(range(1, nd + 1))
    cols = v.transpose(perm).reshape(xp.shape[0] * int(np.prod(k)), -1)
    return cols, out_sp


def _col2im(cols: np.ndarray, C: int, padded: tuple, k: tuple, stride: tuple, out_sp: tuple) -> np.ndarray:
    g = np.zeros((C,) + tuple(padded))
    c = cols.reshape((C,) + tuple(k) + tuple(out_sp))
    for off in itertools.product(*(range(kk) for kk in k)):
        sl = (slice(None),) + tuple(
            slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(off, stride, out_sp)
        )
        g[sl] += c[(slice(None),) + off]
    return g


def _use_fft(k, stride, O, C, padded) -> bool:
    return all(s == 1 for s in stride) and min(k) >= 7 and O * C * int(np.prod(padded)) <= 20_000_000


def _fft_forward(xp: np.ndarray, w: np.ndarray):
    """Valid cross-correlation as a product of spectra; also returns the spectra for the backward pass."""
    nd = w.ndim - 2
    S = xp.shape[1:]
    k = w.shape[2:]
    O, C = w.shape[:2]
    X = np.fft.rfftn(xp, S, axes=tuple(range(1, nd + 1)))
    Wf = np.fft.rfftn(w, S, axes=tuple(range(2, nd + 2)))
    Y = np.einsum("ocm,cm->om", np.conj(Wf.reshape(O, C, -1)), X.reshape(C, -1)).reshape((O,) + X.shape[1:])
    y = np.fft.irfftn(Y, S, axes=tuple(range(1, nd + 1)))
    return y[(slice(None),) + tuple(slice(0, n - kk + 1) for kk, n in zip(k, S))], X, Wf


def _fft_backward(X: np.ndarray, Wf: np.ndarray, g: np.ndarray, S: tuple, k: tuple):
    nd = len(S)
    O, C = Wf.shape[:2]
    ax = tuple(range(1, nd + 1))
    G = np.fft.rfftn(g, S, axes=ax)
    GX = np.einsum("om,ocm->cm", G.reshape(O, -1), Wf.reshape(O, C, -1)).reshape((C,) + G.shape[1:])
    gxp = np.fft.irfftn(GX, S, axes=ax)
    GW = np.einsum("om,cm->ocm", np.conj(G.reshape(O, -1)), X.reshape(C, -1)).reshape((O, C) + G.shape[1:])
    gw = np.fft.irfftn(GW, S, axes=tuple(range(2, nd + 2)))
    return gxp, gw[(slice(None), slice(None)) + tuple(slice(0, kk) for kk in k)]


def _convnd(kind: str, x: Tensor, w: Tensor, b: Tensor | None, stride, padding, nd: int) -> Tensor:
    if x.data.ndim != nd + 1 or w.data.ndim != nd + 2:
        raise ShapeError(f"{kind}: input {x.shape} / weight {w.shape} have wrong rank")
    C = x.shape[0]
    O, Cw = w.shape[:2]
    if C != Cw:
        raise ShapeError(f"{kind}: input has {C} channels but weight expects {Cw}")
    if b is not None and b.shape != (O,):
        raise ShapeError(f"{kind}: bias shape {b.shape} != ({O},)")
    k = w.shape[2:]
    stride = _triple(stride, nd)
    pad = _triple(padding, nd)
    if min(stride) < 1:
        raise ShapeError(f"{kind}: stride must be >= 1, got {stride}")
    padded = tuple(n + 2 * p for n, p in zip(x.shape[1:], pad))
    if any(kk > n for kk, n in zip(k, padded)):
        raise ShapeError(f"{kind}: kernel {k} larger than padded input {padded}")
    xp = np.pad(x.data, ((0, 0),) + tuple((p, p) for p in pad)) if any(pad) else x.data
    inner = tuple(slice(p, p + n) for p, n in zip(pad, x.shape[1:]))

    if all(kk == 1 for kk in k) and all(s == 1 for s in stride):
        xm = xp.reshape(C, -1)
        wm = w.data.reshape(O, C)
        out = wm @ xm
        if b is not None:
            out += b.data[:, None]
        out = out.reshape((O,) + padded)

        def bw(g):
            gm = g.reshape(O, -1)
            gx = (wm.T @ gm).reshape((C,) + padded)[(slice(None),) + inner]
            gw = (gm @ xm.T).reshape(w.shape)
            gb = gm.sum(axis=1) if b is not None else None
            return gx, gw, gb

    elif _use_fft(k, stride, O, C, padded):
        out, X, Wf = _fft_forward(xp, w.data)
        if b is not None:
            out += b.data.reshape((O,) + (1,) * nd)

        def bw(g):
            gxp, gw = _fft_backward(X, Wf, g, padded, k)
            gb = g.reshape(O, -1).sum(axis=1) if b is not None else None
            return gxp[(slice(None),) + inner], gw, gb

    else:
        cols, out_sp = _im2col(xp, k, stride)
        wm = w.data.reshape(O, -1)
        out = wm @ cols
        if b is not None:
            out += b.data[:, None]
        out = out.reshape((O,) + tuple(out_sp))

        def bw(g):
            gm = g.reshape(O, -1)
            gw = (gm @ cols.T).reshape(w.shape)
            gb = gm.sum(axis=1) if b is not None else None
            gx = _col2im(wm.T @ gm, C, padded, k, stride, out_sp)[(slice(None),) + inner]
            return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _record(kind, out, inputs, bw)


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlate ``x[C,D,H,W]`` with ``w[O,C,kd,kh,kw]``."""
    return _convnd("conv3d", x, w, b, stride, padding, 3)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlate ``x[C,H,W]`` with ``w[O,C,kh,kw]``."""
    return _convnd("conv2d", x, w, b, stride, padding, 2)


def conv_transpose3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Adjoint of :func:`conv3d` with weight laid out as ``w[C_in, C_out, k, k, k]``.

    Output extents are ``(D - 1) * stride - 2 * padding + k``.
    """
    nd = 3
    if x.data.ndim != nd + 1 or w.data.ndim != nd + 2:
        raise ShapeError(f"conv_transpose3d: input {x.shape} / weight {w.shape} have wrong rank")
    C = x.shape[0]
    Cw, O = w.shape[:2]
    if C != Cw:
        raise ShapeError(f"conv_transpose3d: input has {C} channels but weight expects {Cw}")
    if b is not None and b.shape != (O,):
        raise ShapeError(f"conv_transpose3d: bias shape {b.shape} != ({O},)")
    k = w.shape[2:]
    stride = _triple(stride, nd)
    pad = _triple(padding, nd)
    if min(stride) < 1:
        raise ShapeError(f"conv_transpose3d: stride must be >= 1, got {stride}")
    in_sp = x.shape[1:]
    full = tuple((n - 1) * s + kk for n, s, kk in zip(in_sp, stride, k))
    out_sp = tuple(f - 2 * p for f, p in zip(full, pad))
    if any(n <= 0 for n in out_sp):
        raise ShapeError(f"conv_transpose3d: padding {pad} leaves no output")
    inner = (slice(None),) + tuple(slice(p, p + n) for p, n in zip(pad, out_sp))
    xm = x.data.reshape(C, -1)
    wm = w.data.reshape(C, -1)
    out = _col2im(wm.T @ xm, O, full, k, stride, in_sp)[inner]
    if b is not None:
        out = out + b.data.reshape((O,) + (1,) * nd)

    def bw(g):
        gfull = np.zeros((O,) + full)
        gfull[inner] = g
        cols, _ = _im2col(gfull, k, stride)
        gx = (wm @ cols).reshape(x.shape)
        gw = (xm @ cols.T).reshape(w.shape)
        gb = g.reshape(O, -1).sum(axis=1) if b is not None else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _record("conv_transpose3d", out, inputs, bw)


# ----------------------------------------------------------------------------
# pointwise and structural ops


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over all spatial elements, no affine."""
    if x.data.ndim < 2:
        raise ShapeError(f"instance_norm needs [C, ...spatial], got {x.shape}")
    C = x.shape[0]
    xm = x.data.reshape(C, -1)
    n = xm.shape[1]
    mean = xm.mean(axis=1, keepdims=True)
    xc = xm - mean
    xc[np.ptp(xm, axis=1) == 0] = 0.0
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.reshape(C, -1)
        gsum = gm.sum(axis=1, keepdims=True)
        gx = inv / n * (n * gm - gsum - xhat * (gm * xhat).sum(axis=1, keepdims=True))
        return (gx.reshape(x.shape),)

    return _record("instance_norm", xhat.reshape(x.shape), (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _record("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def elementwise(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.data.ndim != 1 or w.data.ndim != 2 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
    out = w.data @ x.data
    if b is not None:
        out = out + b.data

    def bw(g):
        return w.data.T @ g, np.outer(g, x.data), (g if b is not None else None)

    inputs = (x, w) if b is None else (x, w, b)
    return _record("linear", out, inputs, bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"concat_channels: spatial extents differ {a.shape[1:]} vs {b.shape[1:]}")
    ca = a.shape[0]
    out = np.concatenate([a.data, b.data], axis=0)
    return _record("concat_channels", out, (a, b), lambda g: (g[:ca], g[ca:]))


def _same(kind, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shapes differ {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same("add", a, b)
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same("sub", a, b)
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same("mul", a, b)
    return _record("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def _scalar(g) -> float:
    return float(np.asarray(g).reshape(-1)[0])


def tsum(a: Tensor) -> Tensor:
    return _record("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.full(a.shape, _scalar(g)),))


def tmean(a: Tensor) -> Tensor:
    n = a.size
    return _record("mean", np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, _scalar(g) / n),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def crop(a: Tensor, lo: Sequence[int], hi: Sequence[int]) -> Tensor:
    """Slice the trailing ``len(lo)`` axes to ``[lo, hi)``; leading axes are kept."""
    lead = a.data.ndim - len(lo)
    for l, h, n in zip(lo, hi, a.shape[lead:]):
        if not (0 <= l < h <= n):
            raise ShapeError(f"crop: range [{l}, {h}) outside extent {n}")
    sl = (slice(None),) * lead + tuple(slice(int(l), int(h)) for l, h in zip(lo, hi))

    def bw(g):
        out = np.zeros(a.shape)
        out[sl] = g
        return (out,)

    return _record("crop", a.data[sl].copy(), (a,), bw)


def pad_edge(a: Tensor, pad: int) -> Tensor:
    """Pad every spatial axis (all but the first) by ``pad`` copies of its border slice."""
    pad = int(pad)
    if pad < 0:
        raise ShapeError("pad_edge: negative padding")
    if pad == 0:
        return a
    idx = [np.clip(np.arange(-pad, n + pad), 0, n - 1) for n in a.shape[1:]]
    out = a.data
    for ax, ix in enumerate(idx, start=1):
        out = np.take(out, ix, axis=ax)

    def bw(g):
        for ax in range(len(idx), 0, -1):
            shape = list(g.shape)
            shape[ax] = a.shape[ax]
            acc = np.zeros(shape)
            np.add.at(acc, (slice(None),) * ax + (idx[ax - 1],), g)
            g = acc
        return (g,)

    return _record("pad_edge", out, (a,), bw)


def take(a: Tensor, flat_index) -> Tensor:
    """Gather elements by flat (row-major) index into a 1-D tensor."""
    idx = np.asarray(flat_index, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        raise ShapeError("take: empty index")

    def bw(g):
        out = np.zeros(a.size)
        np.add.at(out, idx, g)
        return (out.reshape(a.shape),)

    return _record("take", a.data.reshape(-1)[idx], (a,), bw)


def roi_bins(lo: int, hi: int, n: int) -> list[tuple[int, int]]:
    """Split ``[lo, hi)`` into ``n`` nonempty bins with floor/ceil boundaries."""
    length = hi - lo
    return [
        (lo + (i * length) // n, lo + -((-(i + 1) * length) // n))
        for i in range(n)
    ]


def roi_max_pool3d(a: Tensor, lo: Sequence[int], hi: Sequence[int], out: int = 4) -> Tensor:
    """Max-pool the region ``[lo, hi)`` of ``a[C,X,Y,Z]`` to ``[C,out,out,out]``."""
    C = a.shape[0]
    for l, h, n in zip(lo, hi, a.shape[1:]):
        if not (0 <= l < h <= n):
            raise ShapeError(f"roi_max_pool3d: range [{l}, {h}) outside extent {n}")
    bins = [roi_bins(int(l), int(h), out) for l, h in zip(lo, hi)]
    res = np.empty((C, out, out, out))
    src = np.empty((C, out, out, out), dtype=np.int64)
    spatial = a.shape[1:]
    chan_off = np.arange(C) * int(np.prod(spatial))
    for i, (x0, x1) in enumerate(bins[0]):
        for j, (y0, y1) in enumerate(bins[1]):
            for k, (z0, z1) in enumerate(bins[2]):
                region = a.data[:, x0:x1, y0:y1, z0:z1].reshape(C, -1)
                am = region.argmax(axis=1)
                res[:, i, j, k] = region[np.arange(C), am]
                ex, ey, ez = np.unravel_index(am, (x1 - x0, y1 - y0, z1 - z0))
                src[:, i, j, k] = chan_off + np.ravel_multi_index((ex + x0, ey + y0, ez + z0), spatial)

    def bw(g):
        grad = np.zeros(a.size)
        np.add.at(grad, src.reshape(-1), g.reshape(-1))
        return (grad.reshape(a.shape),)

    return _record("roi_max_pool3d", res, (a,), bw)


# ----------------------------------------------------------------------------
# losses (mean reduction)


def loss_bce_with_logits(logits: Tensor, targets) -> Tensor:
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"bce: targets {t.shape} != logits {logits.shape}")
    if t.size and (t.min() < 0.0 or t.max() > 1.0):
        raise ValueError("bce: targets must lie in [0, 1]")
    x = logits.data
    n = x.size
    val = (np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))).sum() / n
    s = _sigmoid(x)
    return _record("bce_with_logits", np.asarray(val), (logits,), lambda g: ((s - t) * (_scalar(g) / n),))


def loss_cross_entropy(logits: Tensor, label: int) -> Tensor:
    if logits.data.ndim != 1:
        raise ShapeError(f"cross entropy expects [K] logits, got {logits.shape}")
    K = logits.shape[0]
    if not 0 <= int(label) < K:
        raise ValueError(f"label {label} out of range for {K} classes")
    x = logits.data
    m = x.max()
    e = np.exp(x - m)
    z = e.sum()
    val = m + np.log(z) - x[label]
    p = e / z

    def bw(g):
        d = p.copy()
        d[label] -= 1.0
        return (d * _scalar(g),)

    return _record("cross_entropy", np.asarray(val), (logits,), bw)


def loss_huber(pred: Tensor, target) -> Tensor:
    """Mean of ``0.5 d^2`` for ``|d| <= 2`` and ``|d|`` beyond, with ``d = pred - target``."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ShapeError(f"huber: target {t.shape} != pred {pred.shape}")
    d = pred.data - t
    quad = np.abs(d) <= 2.0
    n = d.size
    val = np.where(quad, 0.5 * d * d, np.abs(d)).sum() / n
    dd = np.where(quad, d, np.sign(d))
    return _record("huber", np.asarray(val), (pred,), lambda g: (dd * (_scalar(g) / n),))


# ----------------------------------------------------------------------------
# numerical gradient check


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
              max_entries: int | None = None, seed: int = 0, floor: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` may return a non-scalar tensor; it is contracted against a fixed
    random projection. Per element the error is
    ``|a - n| / max(|a|, |n|, floor * scale)`` where ``scale`` is the largest
    gradient magnitude of that input (at least 1), so entries that are
    exactly zero are judged against roundoff at the input's own scale.
    ``max_entries`` limits how many entries per input are probed.
    """
    rng = np.random.default_rng(seed)
    probe = fn(*inputs)
    proj = rng.uniform(-1.0, 1.0, probe.shape) if probe.size > 1 else None

    def scalar():
        out = fn(*inputs)
        if proj is None:
            return out.data.reshape(()), out
        return (out.data * proj).sum(), tsum(mul(out, Tensor(proj)))

    for t in inputs:
        if t.requires_grad:
            t.grad = None
    _, loss = scalar()
    backward(loss)
    worst = 0.0
    with no_grad():
        for t in inputs:
            if not t.requires_grad:
                continue
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            denom_floor = floor * max(1.0, float(np.abs(analytic).max()))
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, max_entries, replace=False)
            for i in idx:
                old = flat[i]
                flat[i] = old + h
                fp = float(scalar()[0])
                flat[i] = old - h
                fm = float(scalar()[0])
                flat[i] = old
                num = (fp - fm) / (2 * h)
                a = analytic.reshape(-1)[i]
                err = abs(a - num) / max(abs(a), abs(num), denom_floor)
                worst = max(worst, err)
    return worst


# ----------------------------------------------------------------------------
# checkpoint files

_CKPT_MAGIC = b"RVNT"
_CKPT_VERSION = 1


def save_checkpoint(path, params: Mapping[str, Tensor | np.ndarray], header: dict | None = None) -> None:
    """Write parameters as ``RVNT`` records.

    Layout (little-endian): magic, u32 version, u32 header length, UTF-8 JSON
    header, u32 record count, then per record: u32 name length, UTF-8 name,
    u32 rank, rank x u64 extents, raw f64 payload.
    """
    import json

    hdr = json.dumps(header or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<II", _CKPT_VERSION, len(hdr)))
        f.write(hdr)
        f.write(struct.pack("<I", len(params)))
        for name, p in params.items():
            arr = np.ascontiguousarray(p.data if isinstance(p, Tensor) else p, dtype="<f8")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    import json

    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not an RVNT checkpoint")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    header = json.loads(buf[pos : pos + hlen].decode("utf-8")) if hlen else {}
    pos += hlen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        n = int(np.prod(shape)) if rank else 1
        params[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    return params, header
