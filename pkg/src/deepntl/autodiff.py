"""A small reverse-mode differentiation engine on numpy arrays.

Only the operators the super-resolution networks need are provided:
2-D convolution, batch normalisation, ReLU, sigmoid, elementwise add/sub,
broadcast multiply, channel concatenation, global average pooling, pixel
shuffle, summation and the per-example L1 loss.

Each operator builds a :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  :func:`backward`
walks the graph once in reverse topological order and sums gradients over
fan-out.  Inside :func:`no_grad` no graph is recorded, which is what
inference uses.

Values are float32 by default; float64 tensors flow through unchanged and
are used for finite-difference checks (:func:`grad_check`).
"""
from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

_state = threading.local()
_creation = itertools.count()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self._seq = next(_creation)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, " \
               f"requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn, op) -> Tensor:
    out = Tensor(data)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def topological_order(loss: Tensor) -> list[Tensor]:
    """Nodes reachable from ``loss`` that require grad, parents first."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
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


def _total(contribs) -> np.ndarray:
    # Fixed summation order (by creating node) makes the result independent
    # of the traversal order.
    contribs.sort(key=lambda c: c[0])
    g = contribs[0][1]
    for _, x in contribs[1:]:
        g = g + x
    return g


def backward(loss: Tensor, order: list[Tensor] | None = None) -> None:
    """Populate ``.grad`` of every leaf that requires it with d(loss)/d(leaf).

    Gradients accumulate into existing ``.grad`` arrays, so call
    ``zero_grad`` between independent backward passes.  ``order`` may supply
    any topological order of the graph (parents before children); the
    result is bit-identical for every valid order.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if order is None:
        order = topological_order(loss)

    pending: dict[int, list] = {id(loss): [(-1, np.ones_like(loss.data))]}
    for node in reversed(order):
        contribs = pending.pop(id(node), None)
        if contribs is None:
            continue
        g = _total(contribs)
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pending.setdefault(id(parent), []).append((node._seq, pg))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting (used for channel gating)."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), back, "mul")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0).astype(x.dtype, copy=False), (x,),
                   lambda g: (g * pos,), "relu")


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = (0.5 * (1.0 + np.tanh(0.5 * x.data))).astype(x.dtype, copy=False)
    return _result(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _as_tensor(x)
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return _result(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def concat_channels(a, b) -> Tensor:
    """Stack along the channel axis (third from last: ``(..., C, H, W)``)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != b.ndim or a.ndim < 3 or a.shape[:-3] != b.shape[:-3] \
            or a.shape[-2:] != b.shape[-2:]:
        raise ShapeError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[-3]

    def back(g):
        return g[..., :ca, :, :], g[..., ca:, :, :]

    return _result(np.concatenate([a.data, b.data], axis=-3), (a, b), back, "concat")


def global_avg_pool(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects (N,C,H,W), got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def back(g):
        return (np.broadcast_to(g / (h * w), x.shape).astype(x.dtype),)

    return _result(out, (x,), back, "pool")


def pixel_shuffle(x, r: int) -> Tensor:
    """``out[n, c, r*i+di, r*j+dj] = x[n, c*r*r + di*r + dj, i, j]``."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"pixel_shuffle expects (N,C,H,W), got {x.shape}")
    n, crr, h, w = x.shape
    if crr % (r * r):
        raise ShapeError(f"pixel_shuffle: {crr} channels not divisible by {r * r}")
    c = crr // (r * r)
    out = x.data.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)

    def back(g):
        return (g.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(x.shape),)

    return _result(out, (x,), back, "pixel_shuffle")


# --------------------------------------------------------------------------
# convolution

def conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x (N,Cin,H,W)`` with ``weight (Cout,Cin,k,k)``,
    zero padding ``pad`` on every side."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape}, expected {(cout,)}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} / pad {pad}")
    hp, wp = h + 2 * pad, w + 2 * pad
    if hp < k or wp < k or (hp - k) % stride or (wp - k) % stride:
        raise ShapeError(f"conv2d: non-integral output size for input {h}x{w}, kernel {k}, "
                         f"stride {stride}, pad {pad}")
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * k * k)
    wmat = weight.data.reshape(cout, cin * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, cin, k, k).transpose(0, 3, 1, 2, 4, 5)
            dxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[..., i, j]
            gx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, back, "conv2d")


# --------------------------------------------------------------------------
# normalisation

def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Per-channel batch normalisation of ``x (N,C,H,W)``.

    In training mode the batch mean and (biased) variance normalise the input
    and the running statistics are updated in place as
    ``(1 - momentum) * old + momentum * batch``.  Otherwise the running
    statistics are used and the map is affine.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects (N,C,H,W), got {x.shape}")
    n, c, h, w = x.shape
    if n * h * w == 0:
        raise ShapeError("batch_norm: zero-size channel")
    for name, t in (("gamma", gamma.data), ("beta", beta.data),
                    ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (c,):
            raise ShapeError(f"batch_norm: {name} shape {t.shape}, expected {(c,)}")
    g4 = gamma.data.reshape(1, c, 1, 1)
    b4 = beta.data.reshape(1, c, 1, 1)

    if training:
        m = n * h * w
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var
    else:
        mean, var = running_mean, running_var
    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(1, c, 1, 1)
    xhat = (x.data - mean.astype(x.dtype).reshape(1, c, 1, 1)) * invstd
    out = g4 * xhat + b4

    def back(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        if not x.requires_grad:
            return None, ggamma, gbeta
        dxhat = g * g4
        if training:
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = invstd / m * (m * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * invstd
        return gx, ggamma, gbeta

    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), back, "batch_norm")


# --------------------------------------------------------------------------
# loss

def l1_loss(pred, gt) -> Tensor:
    """Mean over the batch of the per-example L1 norm ``sum |pred - gt|``.

    The subgradient at a zero difference is 0.
    """
    pred, gt = _as_tensor(pred), _as_tensor(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"l1_loss: shapes {pred.shape} and {gt.shape} differ")
    if pred.ndim == 0 or pred.shape[0] < 1:
        raise ShapeError("l1_loss needs a leading batch dimension with N >= 1")
    n = pred.shape[0]
    diff = pred.data - gt.data
    out = np.asarray(np.abs(diff).sum() / n, dtype=pred.dtype)
    sign = np.sign(diff)

    def back(g):
        return g * sign / n, -g * sign / n

    return _result(out, (pred, gt), back, "l1_loss")


# --------------------------------------------------------------------------
# verification

def grad_check(f, leaves, eps: float = 1e-3) -> float:
    """Largest relative disagreement between reverse-mode and central
    finite-difference gradients.

    ``f`` is a zero-argument callable that rebuilds the graph from ``leaves``
    and returns a scalar tensor.  Leaves should be float64.  For each
    coordinate the error is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    for leaf in leaves:
        leaf.grad = None
    out = f()
    backward(out)
    analytic = [np.zeros_like(l.data) if l.grad is None else l.grad.copy() for l in leaves]
    worst = 0.0
    for leaf, a in zip(leaves, analytic):
        if not leaf.data.flags.c_contiguous:
            leaf.data = np.ascontiguousarray(leaf.data)
        flat = leaf.data.reshape(-1)
        af = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            err = abs(af[i] - num) / max(1e-8, abs(af[i]) + abs(num))
            worst = max(worst, err)
    for leaf in leaves:
        leaf.grad = None
    return worst
