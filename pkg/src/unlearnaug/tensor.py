"""A small reverse-mode differentiation engine over numpy arrays.

Only the operations needed by the tiny residual CNN and the MLP are provided:
``conv2d``, ``dense``, ``relu``, ``maxpool2``, ``global_avg_pool``, ``add``,
``flatten`` and ``cross_entropy``, plus ``scale``/``sum`` for composing losses.

Every tensor gets a creation number from a global counter. Since an op's
inputs always exist before its output, sorting a graph by creation number
gives a topological order, and ``backward`` walks it in exact reverse.
"""

from __future__ import annotations

import itertools
import json
import struct
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .errors import DimensionError, FormatError, InputError, UsageError

_counter = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording a graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """An n-d array with an optional gradient slot.

    Leaves created with ``requires_grad=True`` are parameters; their ``grad``
    is populated (and accumulated) by :func:`backward`. Leaves without it are
    plain inputs and are skipped.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_order")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._order = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other: float) -> Tensor:
        return scale(self, other)

    __rmul__ = __mul__

    def sum(self) -> Tensor:
        return sum_all(self)

    def backward(self) -> None:
        backward(self)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every parameter leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("backward called on a tensor that is not part of a recorded graph")
    if loss._backward is None:
        # a parameter leaf used directly as the loss
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._order in nodes:
            continue
        nodes[t._order] = t
        for p in t._parents:
            if p.requires_grad and p._order not in nodes:
                stack.append(p)

    grads: dict[int, np.ndarray] = {loss._order: np.ones_like(loss.data)}
    for order in sorted(nodes, reverse=True):
        t = nodes[order]
        g = grads.pop(order, None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent._order)
            grads[parent._order] = pg if prev is None else prev + pg


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors (the residual add)."""
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(x.data.reshape(shape[0], -1), (x,), lambda g: (g.reshape(shape),))


# ---------------------------------------------------------------- layers


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for ``x`` of shape (N, in) and ``w`` of shape (in, out)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"dense: cannot multiply {x.shape} by {w.shape}")
    out = x.data @ w.data
    if b is not None:
        if b.shape != (w.shape[1],):
            raise DimensionError(f"dense: bias shape {b.shape} != ({w.shape[1]},)")
        out = out + b.data

    def bw(g):
        gx = g @ w.data.T
        gw = x.data.T @ g
        return (gx, gw) if b is None else (gx, gw, g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct cross-correlation of (N,C,H,W) input with (F,C,kH,kW) kernels."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, kc, kh, kw = w.shape
    if kc != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {kc}")
    if stride < 1 or padding < 0:
        raise InputError("conv2d: stride must be positive and padding non-negative")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}+{padding}")
    if b is not None and b.shape != (f,):
        raise DimensionError(f"conv2d: bias shape {b.shape} != ({f},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    # channel-major column matrix (C*kh*kw, N*Ho*Wo); keeps every copy below contiguous
    xc = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xc[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    wmat = w.data.reshape(f, -1)
    out = wmat @ cols
    if b is not None:
        out = out + b.data[:, None]
    out = np.ascontiguousarray(out.reshape(f, n, ho, wo).transpose(1, 0, 2, 3))

    def bw(g):
        gf = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, n * ho * wo)
        gw = (gf @ cols.T).reshape(w.shape)
        gcols = (wmat.T @ gf).reshape(c, kh, kw, n, ho, wo)
        gxc = np.zeros((c, n) + xp.shape[2:], dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                gxc[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
        gx = gxc.transpose(1, 0, 2, 3)[:, :, padding : padding + h, padding : padding + wd]
        gx = np.ascontiguousarray(gx)
        if b is None:
            return gx, gw
        return gx, gw, gf.sum(axis=1)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first maximum."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2: spatial dims {h}x{w} must be even")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        return (gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _make(out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    inv = 1.0 / (h * w)
    out = x.data.mean(axis=(2, 3))
    return _make(out, (x,), lambda g: (np.broadcast_to((g * inv)[:, :, None, None], x.shape).copy(),))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be (N, K), got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"cross_entropy: labels must lie in [0, {k})")
    labels = labels.astype(np.int64)
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * (g / n),)

    return _make(loss, (logits,), bw)


# ---------------------------------------------------------------- optimizer


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay.

    ``v <- momentum * v + g + weight_decay * w``; ``w <- w - lr * v``.
    Gradients are cleared after each step.
    """

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if lr < 0:
            raise InputError("lr must be non-negative")
        if not 0 <= momentum < 1:
            raise InputError("momentum must lie in [0, 1)")
        if weight_decay < 0:
            raise InputError("weight_decay must be non-negative")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise UsageError(f"parameter {i} has no gradient; run backward first")
        for p, v in zip(self.params, self.velocity):
            d = p.grad
            if self.weight_decay:
                d = d + self.weight_decay * p.data
            if self.momentum:
                v *= self.momentum
                v += d
            else:
                v[...] = d
            p.data -= self.lr * v
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_step(params: Sequence[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0,
             velocity: list[np.ndarray] | None = None) -> list[np.ndarray]:
    """One functional SGD update; returns the updated velocity buffers."""
    opt = SGD(params, lr, momentum, weight_decay)
    if velocity is not None:
        opt.velocity = velocity
    opt.step()
    return opt.velocity


# ---------------------------------------------------------------- serialization

_MAGIC = b"ULAG"


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``tensors`` as a JSON header followed by a flat little-endian float32 stream.

    Layout: 4-byte magic, uint64 header length, UTF-8 JSON header, payload.
    Header entries carry ``name``, ``shape`` and byte ``offset`` into the payload.
    """
    entries = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC or len(raw) < 12:
        raise FormatError(f"{path}: not a tensor checkpoint")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    payload = memoryview(raw)[12 + hlen :]
    out = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + 4 * count
        if end > len(payload):
            raise FormatError(f"{path}: tensor {e['name']!r} runs past end of file")
        out[e["name"]] = np.frombuffer(payload[e["offset"] : end], dtype="<f4").astype(np.float32).reshape(e["shape"])
    return out, header.get("meta", {})
