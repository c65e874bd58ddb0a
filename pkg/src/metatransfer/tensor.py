"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded as nodes in
execution order. ``Tape.backward`` walks the nodes once in reverse and fills
``grad`` on leaf tensors; ``Tape.gradient`` returns gradients for chosen
sources and, with ``create_graph=True``, records the backward computation on
the same tape so it can be differentiated again.

Storage is a C-contiguous ``numpy.ndarray`` of float64, i.e. a flat row-major
buffer plus a shape.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "current_tape",
    "no_record",
    "DimensionError",
    "DegenerateBatchError",
    "ContractError",
    "tensor",
    "matmul",
    "conv2d",
    "relu",
    "max_pool2d",
    "mean_pool",
    "batch_norm",
    "channel_affine",
    "softmax",
    "softmax_cross_entropy",
    "dropout",
    "reshape",
    "transpose",
    "tsum",
    "exp",
    "log",
    "sqrt",
    "concat_rows",
]


class DimensionError(ValueError):
    pass


class DegenerateBatchError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


_state = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def current_tape() -> Optional["Tape"]:
    """The tape currently recording on this thread, if any."""
    return _active_tape()


class no_record:
    """Context manager that stops tape recording on this thread."""

    def __enter__(self):
        self.saved = getattr(_state, "stack", [])
        _state.stack = []

    def __exit__(self, *exc):
        _state.stack = self.saved


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        if arr.size == 0:
            raise DimensionError("tensor shape entries must be >= 1, got %s" % (arr.shape,))
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.asarray(arr, dtype=np.float64)
        t.requires_grad = False
        t.grad = None
        t._node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __array_priority__ = 1000

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


class _Node:
    __slots__ = ("inputs", "output", "backward", "twice", "index")

    def __init__(self, inputs, output, backward, twice, index):
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.twice = twice
        self.index = index


def _record(out_arr: np.ndarray, inputs: Sequence[Tensor], backward: Callable, twice: bool = True) -> Tensor:
    """Wrap ``out_arr`` and, if a tape is recording, register a node.

    ``backward(g)`` maps the output gradient (a Tensor) to a tuple with one
    gradient Tensor (or None) per input. ``twice`` marks rules that are built
    from recorded ops and can therefore be differentiated again.
    """
    out = Tensor._wrap(out_arr)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node(tuple(inputs), out, backward, twice, len(tape.nodes))
        out._node = node
        tape.nodes.append(node)
    return out


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; ops run inside the block are recorded. Tapes are
    thread-confined (the active-tape stack is thread local).
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()

    def _check_loss(self, loss: Tensor):
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        node = loss._node
        if node is None or node.index >= len(self.nodes) or self.nodes[node.index] is not node:
            raise ContractError("loss was not produced on this tape")

    def _propagate(self, loss: Tensor, relevant_leaf, create_graph: bool) -> dict:
        """Reverse sweep; returns {id(tensor): grad Tensor} for reachable tensors."""
        self._check_loss(loss)
        end = loss._node.index + 1
        nodes = self.nodes[:end]
        # forward relevance pass: keep only nodes on a path from a wanted leaf
        live: set[int] = set()
        for node in nodes:
            for t in node.inputs:
                if (t._node is None and relevant_leaf(t)) or id(t) in live:
                    live.add(id(node.output))
                    break
        grads: dict[int, Tensor] = {id(loss): Tensor._wrap(np.ones_like(loss.data))}
        keep: dict[int, Tensor] = {}
        for node in reversed(nodes):
            oid = id(node.output)
            if oid not in live or oid not in grads:
                continue
            g = grads.pop(oid)
            if create_graph:
                if not node.twice:
                    raise ContractError("op has no differentiable backward rule; create_graph unsupported here")
                in_grads = node.backward(g)
            else:
                with no_record():
                    in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                tid = id(t)
                if t._node is None:
                    if not relevant_leaf(t):
                        continue
                    prev = keep.get(tid)
                    keep[tid] = gi if prev is None else _accumulate(prev, gi, create_graph)
                    continue
                if tid not in live:
                    continue
                prev = grads.get(tid)
                grads[tid] = gi if prev is None else _accumulate(prev, gi, create_graph)
        return keep

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``grad`` of every requires_grad leaf."""
        keep = self._propagate(loss, lambda t: t.requires_grad, create_graph=False)
        seen: set[int] = set()
        for node in self.nodes[: loss._node.index + 1]:
            for t in node.inputs:
                tid = id(t)
                if t._node is None and tid in keep and tid not in seen:
                    seen.add(tid)
                    g = keep[tid].data
                    t.grad = g.copy() if t.grad is None else t.grad + g

    def gradient(self, loss: Tensor, sources: Sequence[Tensor], create_graph: bool = False) -> list:
        """Return d(loss)/d(source) for each source (None when unreachable).

        Sources must be leaves or recorded tensors. Non-leaf sources are
        handled by treating them as cut points.
        """
        if create_graph and _active_tape() is not self:
            with self:
                return self.gradient(loss, sources, create_graph=True)
        sources = list(sources)
        wanted = {id(s) for s in sources}
        cut_nodes = {}
        for s in sources:
            if s._node is not None:
                cut_nodes[id(s)] = s._node
                s._node = None
        try:
            keep = self._propagate(loss, lambda t: id(t) in wanted, create_graph)
        finally:
            for s in sources:
                if id(s) in cut_nodes:
                    s._node = cut_nodes[id(s)]
        return [keep.get(id(s)) for s in sources]


def _accumulate(a: Tensor, b: Tensor, create_graph: bool) -> Tensor:
    if create_graph:
        return add(a, b)
    return Tensor._wrap(a.data + b.data)


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    if g.shape == shape:
        return g
    extra = g.data.ndim - len(shape)
    axes = tuple(range(extra)) + tuple(
        i + extra for i, n in enumerate(shape) if n == 1 and g.shape[i + extra] != 1
    )
    out = tsum(g, axis=axes, keepdims=True) if axes else g
    return reshape(out, shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(mul(g, -1.0), sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)

    return _record(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        ga = div(g, b)
        gb = mul(mul(ga, -1.0), div(a, b))
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(a.data / b.data, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    out_holder = []

    def backward(g):
        return (mul(g, out_holder[0]),)

    out = _record(np.exp(x.data), (x,), backward)
    out_holder.append(out)
    return out


def log(x: Tensor) -> Tensor:
    return _record(np.log(x.data), (x,), lambda g: (div(g, x),))


def sqrt(x: Tensor) -> Tensor:
    out_holder = []

    def backward(g):
        return (div(mul(g, 0.5), out_holder[0]),)

    out = _record(np.sqrt(x.data), (x,), backward)
    out_holder.append(out)
    return out


def relu(x: Tensor) -> Tensor:
    return _record(np.maximum(x.data, 0.0), (x,), lambda g: (mul(g, x.data > 0),))


# ---------------------------------------------------------------- structural


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (reshape(g, old),))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")
    return _record(x.data.T, (x,), lambda g: (transpose(g),))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    if axis is None:
        axes = tuple(range(len(shape)))
    elif isinstance(axis, int):
        axes = (axis % len(shape),)
    else:
        axes = tuple(a % len(shape) for a in axis)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
        return (mul(reshape(g, kept), np.ones(shape)),)

    return _record(np.asarray(out), (x,), backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(_slice_rows(g, int(offsets[i]), int(offsets[i + 1])) for i in range(len(parts)))

    return _record(np.concatenate([p.data for p in parts], axis=0), tuple(parts), backward)


def _slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[start:stop] = g.data
        return (Tensor._wrap(full),)

    return _record(x.data[start:stop], (x,), backward, twice=False)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return _record(a.data @ b.data, (a, b), lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)))


# ---------------------------------------------------------------- convolution


def _im2col(xh: np.ndarray, kh: int, kw: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    """Patch matrix (B*Ho*Wo, kh*kw*C) of a padded channels-last array, columns ordered (kh, kw, C)."""
    B, C = xh.shape[0], xh.shape[3]
    win = np.lib.stride_tricks.sliding_window_view(xh, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
    # keeping C innermost makes the gather copy contiguous runs
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, kh * kw * C)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (B,C,H,W) with ``weight`` (K,C,kh,kw).

    Computed as im2col + matmul in channels-last memory; the result is an
    NCHW view of channels-last storage.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    K, Cw, kh, kw = weight.shape
    if C != Cw:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {H}x{W} (pad {padding})")
    if bias is not None and bias.shape != (K,):
        raise DimensionError(f"conv2d bias shape {bias.shape} does not match {K} filters")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    xh = x.data.transpose(0, 2, 3, 1)
    if padding:
        xh = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    cols = _im2col(xh, kh, kw, stride, Ho, Wo)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(K, kh * kw * C)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(B, Ho, Wo, K).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.data.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, K)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = Tensor._wrap((g2.T @ cols).reshape(K, kh, kw, C).transpose(0, 3, 1, 2))
        if bias is not None and bias.requires_grad:
            gb = Tensor._wrap(g2.sum(axis=0))
        if x.requires_grad:
            Hp, Wp = H + 2 * padding, W + 2 * padding
            # col2im: scatter-add each kernel tap's patch gradient
            dcols = (g2 @ wmat).reshape(B, Ho, Wo, kh, kw, C)
            gxh = np.zeros((B, Hp, Wp, C))
            for i in range(kh):
                for j in range(kw):
                    gxh[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :] += dcols[:, :, :, i, j, :]
            if padding:
                gxh = gxh[:, padding : padding + H, padding : padding + W, :]
            gx = Tensor._wrap(gxh.transpose(0, 3, 1, 2))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _record(out, inputs, backward, twice=False)


# ---------------------------------------------------------------- pooling / normalization


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size``x``size`` max pooling (stride == size); odd edges are cropped."""
    B, C, H, W = x.shape
    Ho, Wo = H // size, W // size
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"max_pool2d window {size} larger than input {H}x{W}")
    xc = x.data[:, :, : Ho * size, : Wo * size]
    # candidates in row-major window order; the first maximal one receives the gradient
    cands = [xc[:, :, i::size, j::size] for i in range(size) for j in range(size)]
    if size == 2:
        rows = np.maximum(xc[:, :, 0::2], xc[:, :, 1::2])
        out = np.maximum(rows[:, :, :, 0::2], rows[:, :, :, 1::2])
    else:
        out = cands[0]
        for c in cands[1:]:
            out = np.maximum(out, c)

    def backward(g):
        gx = np.zeros_like(x.data)
        taken = np.zeros(out.shape, dtype=bool)
        k = 0
        for i in range(size):
            for j in range(size):
                hit = (cands[k] == out) & ~taken
                taken |= hit
                gx[:, :, i : Ho * size : size, j : Wo * size : size] = g.data * hit
                k += 1
        return (Tensor._wrap(gx),)

    return _record(out, (x,), backward, twice=False)


def mean_pool(x: Tensor) -> Tensor:
    """Spatial mean: (B,C,H,W) -> (B,C)."""
    B, C, H, W = x.shape
    return _record(
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: (Tensor._wrap(np.broadcast_to(g.data[:, :, None, None] / (H * W), x.shape).copy()),),
        twice=False,
    )


def _channel_sum(a: np.ndarray) -> np.ndarray:
    """Sum of a (B,C,H,W) array over all axes but C."""
    h = a.transpose(0, 2, 3, 1)
    if h.flags.c_contiguous:
        return h.reshape(-1, a.shape[1]).sum(axis=0)
    return a.sum(axis=(0, 2, 3))


def channel_affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """``x * scale[c] + shift[c]`` over the channel axis of a (B,C,H,W) tensor."""
    C = x.shape[1]
    if scale.shape != (C,) or shift.shape != (C,):
        raise DimensionError(f"channel_affine expects ({C},) scale/shift, got {scale.shape} and {shift.shape}")
    s4 = scale.data.reshape(1, C, 1, 1)
    out = x.data * s4
    out += shift.data.reshape(1, C, 1, 1)

    def backward(g):
        gd = g.data
        gx = Tensor._wrap(gd * s4) if x.requires_grad else None
        gs = Tensor._wrap(_channel_sum(gd * x.data)) if scale.requires_grad else None
        gb = Tensor._wrap(_channel_sum(gd)) if shift.requires_grad else None
        return gx, gs, gb

    return _record(out, (x, scale, shift), backward, twice=False)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Optional[np.ndarray] = None,
    running_var: Optional[np.ndarray] = None,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization of a (B,C,H,W) tensor.

    In training mode the current batch statistics are used and, when given,
    the running buffers are updated in place. Otherwise the running buffers
    act as fixed statistics and the op is a per-channel affine map.
    """
    B, C = x.shape[:2]
    shape = (1, C, 1, 1)
    if not training:
        if running_mean is None or running_var is None:
            raise ValueError("inference-mode batch_norm needs running statistics")
        inv = 1.0 / np.sqrt(running_var + eps)
        scale = gamma * inv
        return channel_affine(x, scale, beta - scale * running_mean)
    if B < 2:
        raise DegenerateBatchError("batch_norm in training mode needs batch size >= 2")
    n = x.data.size // C
    mu = _channel_sum(x.data) / n
    xc = x.data - mu.reshape(shape)
    var = _channel_sum(xc * xc) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)
    if running_mean is not None:
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
    if running_var is not None:
        running_var *= 1.0 - momentum
        running_var += momentum * var * n / max(n - 1, 1)

    def backward(g):
        gd = g.data
        ggamma = _channel_sum(gd * xhat)
        gbeta = _channel_sum(gd)
        gx = None
        if x.requires_grad:
            # closed form: gamma*inv/n * (n*g - sum(g) - xhat*sum(g*xhat))
            k = (gamma.data * inv / n).reshape(shape)
            gx = Tensor._wrap(k * (n * gd - gbeta.reshape(shape) - xhat * ggamma.reshape(shape)))
        return gx, Tensor._wrap(ggamma), Tensor._wrap(gbeta)

    return _record(out, (x, gamma, beta), backward, twice=False)


def dropout(x: Tensor, keep_prob: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when ``keep_prob >= 1``."""
    if keep_prob >= 1.0:
        return x
    mask = (rng.random(x.shape) < keep_prob) / keep_prob
    return mul(x, mask)


# ---------------------------------------------------------------- losses


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax of a (B,M) tensor, max-stabilized."""
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    holder = []

    def backward(g):
        out = holder[0]
        gs = mul(g, out)
        return (sub(gs, mul(out, tsum(gs, axis=1, keepdims=True))),)

    out = _record(s, (logits,), backward)
    holder.append(out)
    return out


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} incompatible with labels {labels.shape}")
    B, M = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= M):
        raise IndexError(f"label out of range [0, {M})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = np.mean(lse - z[np.arange(B), labels])
    onehot = np.zeros((B, M))
    onehot[np.arange(B), labels] = 1.0

    def backward(g):
        p = softmax(logits)
        return (mul(sub(p, onehot), mul(g, 1.0 / B)),)

    return _record(np.asarray(loss), (logits,), backward)
