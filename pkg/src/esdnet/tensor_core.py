"""Dense float64 tensors with a small reverse-mode tape.

Only the operations the network needs are provided. Every op returns a new
:class:`Tensor` holding a closure that maps the output gradient to parent
gradients; :meth:`Tensor.backward` replays them in reverse topological order.

Convolutions accept ``[C, T]`` or batched ``[B, C, T]`` input.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- basics -----------------------------------------------------------
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

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that stops ops from recording onto the tape."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED[0] and any(_needs_grad(p) for p in parents):
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def round_ste(a: Tensor, offset: np.ndarray | None = None) -> Tensor:
    """Round on the value path, identity on the gradient path.

    ``offset`` replaces ``round(a) - a`` with a frozen array; used by the
    gradient-check oracle to linearise the estimator around a fixed point.
    """
    if offset is None:
        y = np.round(a.data)
    else:
        y = a.data + offset
    return _make(y, (a,), lambda g: (g,))


# -- reductions / shape ---------------------------------------------------
def sum_(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axis), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        if _fancy(idx):
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return _make(a.data[idx], (a,), bw)


def _fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), bw)


def pad_replicate(a: Tensor, right: int) -> Tensor:
    """Extend the last axis by repeating its final element ``right`` times."""
    if right == 0:
        return a
    T = a.shape[-1]
    tail = np.repeat(a.data[..., -1:], right, axis=-1)

    def bw(g):
        ga = g[..., :T].copy()
        ga[..., -1] += g[..., T:].sum(axis=-1)
        return (ga,)

    return _make(np.concatenate([a.data, tail], axis=-1), (a,), bw)


def temporal_average_pool(a: Tensor) -> Tensor:
    """Mean over the last (time) axis: ``[.., C, T] -> [.., C]``."""
    if a.shape[-1] < 1:
        raise ShapeError("temporal_average_pool needs T >= 1")
    return mean(a, axis=-1)


# -- losses (fused for stability) -----------------------------------------
def mse(pred: Tensor, target) -> Tensor:
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    n = diff.size
    return _make(np.asarray(np.mean(diff * diff)), (pred,), lambda g: (g * 2.0 * diff / n,))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood over rows of ``[N, K]`` logits."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    if z.ndim == 1:
        z = z[None]
    N, K = z.shape
    if labels.shape != (N,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= K:
        raise ValueError(f"labels must lie in [0, {K})")
    zmax = z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax
    logp = z - logsum
    loss = -logp[np.arange(N), labels].mean()
    shape = logits.shape

    def bw(g):
        p = np.exp(logp)
        p[np.arange(N), labels] -= 1.0
        return ((g * p / N).reshape(shape),)

    return _make(np.asarray(loss), (logits,), bw)


def sigmoid_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy with targets in {0, 1} (or [0, 1])."""
    y = np.asarray(targets, dtype=DTYPE)
    z = logits.data
    if z.shape != y.shape:
        raise ShapeError(f"targets shape {y.shape} does not match logits {z.shape}")
    loss = np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z))))
    n = z.size

    def bw(g):
        p = 1.0 / (1.0 + np.exp(-z))
        return (g * (p - y) / n,)

    return _make(np.asarray(loss), (logits,), bw)


# -- convolutions ---------------------------------------------------------
def conv_out_length(T: int, kernel: int, stride: int, padding: int) -> int:
    return (T + 2 * padding - kernel) // stride + 1


def conv_transpose_out_length(T: int, kernel: int, stride: int, padding: int, output_padding: int = 0) -> int:
    return (T - 1) * stride - 2 * padding + kernel + output_padding


def init_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class Conv1dLayer:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0
    weight: Tensor = field(default=None, repr=False)
    bias: Tensor = field(default=None, repr=False)

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        shape = (self.out_channels, self.in_channels, self.kernel_size)
        if self.weight is None:
            self.weight = Tensor(np.zeros(shape), requires_grad=True)
        if self.bias is None:
            self.bias = Tensor(np.zeros(self.out_channels), requires_grad=True)

    def init(self, rng: np.random.Generator) -> "Conv1dLayer":
        fan = self.in_channels * self.kernel_size
        self.weight.data[...] = init_uniform(rng, self.weight.shape, fan)
        self.bias.data[...] = init_uniform(rng, self.bias.shape, fan)
        return self

    def out_length(self, T: int) -> int:
        return conv_out_length(T, self.kernel_size, self.stride, self.padding)

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d(x, self)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class ConvTranspose1dLayer:
    """Weights are stored ``[in, out, kernel]``, the adjoint layout of :class:`Conv1dLayer`."""

    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0
    output_padding: int = 0
    weight: Tensor = field(default=None, repr=False)
    bias: Tensor = field(default=None, repr=False)

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if not 0 <= self.output_padding < self.stride:
            raise ValueError("output_padding must be smaller than stride")
        shape = (self.in_channels, self.out_channels, self.kernel_size)
        if self.weight is None:
            self.weight = Tensor(np.zeros(shape), requires_grad=True)
        if self.bias is None:
            self.bias = Tensor(np.zeros(self.out_channels), requires_grad=True)

    def init(self, rng: np.random.Generator) -> "ConvTranspose1dLayer":
        fan = self.in_channels * self.kernel_size
        self.weight.data[...] = init_uniform(rng, self.weight.shape, fan)
        self.bias.data[...] = init_uniform(rng, self.bias.shape, fan)
        return self

    def out_length(self, T: int) -> int:
        return conv_transpose_out_length(T, self.kernel_size, self.stride, self.padding, self.output_padding)

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d_transpose(x, self)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


def _batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 2:
        return x.data[None], True
    if x.ndim == 3:
        return x.data, False
    raise ShapeError(f"expected [C, T] or [B, C, T] input, got {x.shape}")


def conv1d(x: Tensor, layer: Conv1dLayer) -> Tensor:
    xd, squeeze = _batched(x)
    B, C, T = xd.shape
    W, b = layer.weight, layer.bias
    O, Cw, K = W.shape
    s, p = layer.stride, layer.padding
    if C != Cw:
        raise ShapeError(f"conv1d channel mismatch: input {x.shape} vs weight {W.shape}")
    if T + 2 * p < K:
        raise ShapeError(f"conv1d input {x.shape} too short for kernel {K} with padding {p}")
    To = conv_out_length(T, K, s, p)
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p))) if p else xd
    # cols[b, t, c, k] = xp[b, c, t*s + k]
    win = np.lib.stride_tricks.sliding_window_view(xp, K, axis=2)[:, :, : (To - 1) * s + 1 : s]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B * To, C * K)
    w2 = W.data.reshape(O, C * K)
    out = (cols @ w2.T).reshape(B, To, O).transpose(0, 2, 1) + b.data[None, :, None]
    Tp = xp.shape[2]

    def bw(g):
        g3 = g[None] if squeeze else g
        gmat = g3.transpose(0, 2, 1).reshape(B * To, O)
        gw = (gmat.T @ cols).reshape(O, C, K)
        gb = g3.sum(axis=(0, 2))
        gcols = (gmat @ w2).reshape(B, To, C, K)
        gxp = np.zeros((B, C, Tp), dtype=DTYPE)
        for k in range(K):
            gxp[:, :, k : k + (To - 1) * s + 1 : s] += gcols[:, :, :, k].transpose(0, 2, 1)
        gx = gxp[:, :, p : p + T] if p else gxp
        if squeeze:
            gx = gx[0]
        return gx, gw, gb

    out = out[0] if squeeze else out
    return _make(np.ascontiguousarray(out), (x, W, b), bw)


def conv1d_transpose(x: Tensor, layer: ConvTranspose1dLayer) -> Tensor:
    xd, squeeze = _batched(x)
    B, C, T = xd.shape
    W, b = layer.weight, layer.bias
    Cw, O, K = W.shape
    s, p, op = layer.stride, layer.padding, layer.output_padding
    if C != Cw:
        raise ShapeError(f"conv1d_transpose channel mismatch: input {x.shape} vs weight {W.shape}")
    To = conv_transpose_out_length(T, K, s, p, op)
    if To < 1:
        raise ShapeError(f"conv1d_transpose output length {To} < 1 for input {x.shape}")
    full = (T - 1) * s + K + op
    full = max(full, p + To)
    xmat = xd.transpose(0, 2, 1).reshape(B * T, C)
    w2 = W.data.reshape(C, O * K)
    cols = (xmat @ w2).reshape(B, T, O, K)
    buf = np.zeros((B, O, full), dtype=DTYPE)
    for k in range(K):
        buf[:, :, k : k + (T - 1) * s + 1 : s] += cols[:, :, :, k].transpose(0, 2, 1)
    out = buf[:, :, p : p + To] + b.data[None, :, None]

    def bw(g):
        g3 = g[None] if squeeze else g
        gbuf = np.zeros((B, O, full), dtype=DTYPE)
        gbuf[:, :, p : p + To] = g3
        gcols = np.empty((B, T, O, K), dtype=DTYPE)
        for k in range(K):
            gcols[:, :, :, k] = gbuf[:, :, k : k + (T - 1) * s + 1 : s].transpose(0, 2, 1)
        gmat = gcols.reshape(B * T, O * K)
        gx = (gmat @ w2.T).reshape(B, T, C).transpose(0, 2, 1)
        gw = (xmat.T @ gmat).reshape(C, O, K)
        gb = g3.sum(axis=(0, 2))
        if squeeze:
            gx = gx[0]
        return gx, gw, gb

    out = out[0] if squeeze else out
    return _make(np.ascontiguousarray(out), (x, W, b), bw)


@dataclass
class ResidualBlock:
    channels: int
    kernel_size: int = 3
    conv_a: Conv1dLayer = field(default=None, repr=False)
    conv_b: Conv1dLayer = field(default=None, repr=False)

    def __post_init__(self):
        if self.kernel_size % 2 == 0:
            raise ValueError("residual kernel size must be odd to preserve length")
        pad = self.kernel_size // 2
        if self.conv_a is None:
            self.conv_a = Conv1dLayer(self.channels, self.channels, self.kernel_size, 1, pad)
        if self.conv_b is None:
            self.conv_b = Conv1dLayer(self.channels, self.channels, self.kernel_size, 1, pad)

    def init(self, rng: np.random.Generator) -> "ResidualBlock":
        self.conv_a.init(rng)
        self.conv_b.init(rng)
        return self

    def __call__(self, x: Tensor) -> Tensor:
        return residual_forward(x, self)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for tag, conv in (("a", self.conv_a), ("b", self.conv_b)):
            for k, v in conv.parameters().items():
                out[f"{tag}.{k}"] = v
        return out


def residual_forward(x: Tensor, block: ResidualBlock) -> Tensor:
    C = x.shape[-2] if x.ndim >= 2 else None
    if C != block.channels:
        raise ShapeError(f"residual block expects {block.channels} channels, got input {x.shape}")
    return x + block.conv_b(relu(block.conv_a(x)))


# -- checkpoint format ----------------------------------------------------
CHECKPOINT_MAGIC = b"ESDC"
CHECKPOINT_VERSION = 1


def save_checkpoint(tensors: dict[str, Tensor | np.ndarray]) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, t in tensors.items():
        arr = np.asarray(t.data if isinstance(t, Tensor) else t)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def load_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError("bad magic: not an ESDC checkpoint")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        pos = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64)) * 4
            if pos + size > len(buf):
                raise ValueError("truncated checkpoint payload")
            out[name] = np.frombuffer(buf, dtype="<f4", count=size // 4, offset=pos).reshape(shape).astype(DTYPE)
            pos += size
    except struct.error as exc:
        raise ValueError("truncated checkpoint") from exc
    return out


def numeric_grad(f: Callable[[], float], t: Tensor, index: tuple, h: float = 1e-6) -> float:
    """Central difference of ``f`` w.r.t. one element of ``t`` (restored afterwards)."""
    old = t.data[index]
    t.data[index] = old + h
    fp = f()
    t.data[index] = old - h
    fm = f()
    t.data[index] = old
    return (fp - fm) / (2.0 * h)


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def parameters_of(named: Iterable[tuple[str, object]]) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for prefix, mod in named:
        for k, v in mod.parameters().items():
            out[f"{prefix}.{k}"] = v
    return out
