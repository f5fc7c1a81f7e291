"""Dense float64 tensors with reverse-mode differentiation.

Every primitive records a node holding its parents and a backward closure.
``backward`` walks the recorded graph in reverse topological order and
accumulates gradients with a fixed, sequential summation order so repeated
runs over the same graph are bitwise identical.

Only bias-style broadcasting is supported (``add_bias``); every other binary
primitive requires equal shapes.
"""

from __future__ import annotations

import contextlib
import logging
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DTYPE = np.float64

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


class Tensor:
    """An n-dimensional float64 array that may take part in differentiation.

    ``grad`` is populated by :func:`backward` for every tensor in the graph
    that has ``requires_grad`` set, leaves and intermediates alike.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, copy=True) if not isinstance(data, np.ndarray) else data
        if arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar for the few binary ops that need it
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _raise_item(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a finite sum implies finite entries; fall back to the exact test otherwise
    if not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def mask(a: Tensor, m: np.ndarray) -> Tensor:
    """Multiply by a constant (non-differentiable) array of the same shape."""
    m = np.asarray(m, dtype=DTYPE)
    if m.shape != a.shape:
        raise ShapeError(f"mask: shape mismatch {a.shape} vs {m.shape}")
    return _make(a.data * m, (a,), lambda g: (g * m,), "mask")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-feature (axis 1) bias; the only broadcasting primitive."""
    if b.ndim != 1 or x.ndim < 2 or b.shape[0] != x.shape[1]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match features of {x.shape}")
    view = (1, -1) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    return _make(x.data + b.data.reshape(view), (x, b), lambda g: (g, g.sum(axis=axes)), "add_bias")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def sum_all(x: Tensor) -> Tensor:
    src = x.shape
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.full(src, float(g)),), "sum")


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """Sum of ``x[n, index[n]]`` over rows; a scalar handle on chosen logits."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or index.shape != (x.shape[0],):
        raise ShapeError(f"pick: expected [N,C] and [N] indices, got {x.shape}, {index.shape}")
    rows = np.arange(x.shape[0])

    def bw(g):
        out = np.zeros(x.shape)
        out[rows, index] = float(g)
        return (out,)

    return _make(np.array(x.data[rows, index].sum()), (x,), bw, "pick")


def lif_update(u_prev: Tensor, z: Tensor, spikes: Tensor, leak: float, theta: float) -> Tensor:
    """Fused membrane update ``leak * u_prev + z - theta * spikes``."""
    if not (u_prev.shape == z.shape == spikes.shape):
        raise ShapeError(f"lif_update: shapes {u_prev.shape}, {z.shape}, {spikes.shape} differ")
    out = leak * u_prev.data + z.data if leak != 1.0 else u_prev.data + z.data
    if theta:
        out -= theta * spikes.data
    return _make(out, (u_prev, z, spikes),
                 lambda g: (g * leak if leak != 1.0 else g, g, -theta * g if theta else None), "lif_update")


def heaviside_spike(u: Tensor, theta: float, surrogate: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    """Binary spike ``u > theta``; backward substitutes ``surrogate(u)`` for the derivative."""
    fired = (u.data > theta).astype(DTYPE)
    return _make(fired, (u,), lambda g: (g * surrogate(u.data),), "spike")


# ---------------------------------------------------------------------------
# linear algebra / convolution
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear(x: Tensor, weight: Tensor) -> Tensor:
    """``x @ weight.T`` for input [N, D] and weight [M, D]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    return _make(xd @ wd.T, (x, weight), lambda g: (g @ wd, g.T @ xd), "linear")


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of input [N,C,H,W] with kernel [K,C,kh,kw]."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    k, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {kc}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} padding={padding}")
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for {h}x{w} with padding {padding}")

    # channel-major im2col: cols[c, i, j, n, y, x] = xpad[n, c, y*s + i, x*s + j]
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, oh, ow))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    cols = cols.reshape(c * kh * kw, n * oh * ow)
    kmat = kernel.data.reshape(k, c * kh * kw)
    out = (kmat @ cols).reshape(k, n, oh, ow).transpose(1, 0, 2, 3)

    def bw(g):
        gt = g.transpose(1, 0, 2, 3).reshape(k, n * oh * ow)
        gk = (gt @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (kmat.T @ gt).reshape(c, kh, kw, n, oh, ow)
            gxp = np.zeros((c, n) + xp.shape[2:])
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, i, j]
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + w]
            gx = np.ascontiguousarray(gxp.transpose(1, 0, 2, 3))
        return gx, gk

    return _make(np.ascontiguousarray(out), (x, kernel), bw, "conv2d")


def avgpool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k×k average pooling; spatial extents must divide by k."""
    if x.ndim != 4:
        raise ShapeError(f"avgpool2d: expected 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avgpool2d: {h}x{w} not divisible by pool size {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def bw(g):
        up = np.repeat(np.repeat(g, k, axis=2), k, axis=3)
        return (up / (k * k),)

    return _make(out, (x,), bw, "avgpool2d")


# ---------------------------------------------------------------------------
# normalization and loss
# ---------------------------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, eps: float,
               mean: np.ndarray | None = None, var: np.ndarray | None = None):
    """Scale-only batch normalization over every axis except 1.

    With ``mean``/``var`` omitted the mini-batch statistics are used and
    differentiated through; otherwise the supplied statistics are constants.
    Returns ``(out, batch_mean, batch_var)``.
    """
    if gamma.ndim != 1 or x.ndim < 2 or gamma.shape[0] != x.shape[1]:
        raise ShapeError(f"batch_norm: gamma {gamma.shape} does not match channels of {x.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    view = (1, -1) + (1,) * (x.ndim - 2)
    batch_stats = mean is None
    if batch_stats:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(view)) * inv.reshape(view)
    gd = gamma.data.reshape(view)
    m = x.data.size // x.shape[1]

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * gd
        if batch_stats:
            gx = (inv.reshape(view) / m) * (
                m * gxhat - gxhat.sum(axis=axes).reshape(view)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(view))
        else:
            gx = gxhat * inv.reshape(view)
        return gx, ggamma

    return _make(gd * xhat, (x, gamma), bw, "batch_norm"), mean, var


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape}, labels {labels.shape}")
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise IndexError(f"label out of range [0, {c}): {labels.tolist()}")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (float(g) / n),)

    return _make(np.array(loss), (logits,), bw, "softmax_cross_entropy")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, inputs: Iterable[Tensor] | None = None,
             grad: np.ndarray | None = None, report_disconnected: bool = True) -> list[np.ndarray]:
    """Reverse-mode sweep from ``loss``.

    ``loss`` must be a scalar unless an explicit seed ``grad`` is given. Sets
    ``.grad`` on every reached tensor and returns gradients for ``inputs``
    (zeros, logged as a warning unless ``report_disconnected`` is off, for any
    input the loss does not depend on).
    """
    if grad is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones(loss.shape)
    elif np.shape(grad) != loss.shape:
        raise ShapeError(f"seed gradient {np.shape(grad)} does not match {loss.shape}")
    inputs = list(inputs) if inputs is not None else []
    if not loss.requires_grad:
        order = []
    else:
        order = _topo_order(loss)

    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=DTYPE)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise ShapeError(f"internal: gradient shape {pg.shape} != value shape {p.shape}")
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg

    out = []
    for t in inputs:
        if t.grad is None:
            if report_disconnected:
                logger.warning("tensor %r is disconnected from the loss; gradient is zero", t)
            out.append(np.zeros(t.shape))
        else:
            out.append(t.grad)
    return out
