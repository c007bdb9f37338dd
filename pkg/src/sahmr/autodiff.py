"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every op checks its result for NaN/Inf and raises ``NonFiniteError``.
Graph edges are recorded only when some input requires a gradient, so
evaluation under :func:`no_grad` (or on constants) costs plain numpy.
"""
from __future__ import annotations

import contextlib
import struct
import warnings
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionMismatch, NonFiniteError, NonScalarLoss

_GRAD_ENABLED = True


class DisconnectedGraph(UserWarning):
    """A parameter received no gradient from the loss."""


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check(data):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite value produced in the graph")
    return data


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = _check(np.asarray(data, dtype=np.float64))
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    # -- graph construction -------------------------------------------------
    @staticmethod
    def op(value, parents, backward):
        """Result of a custom op. ``backward(g)`` returns one gradient (or
        ``None``) per parent, already shaped like that parent."""
        out = Tensor(value)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        backward(self)

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor.op(a.data + b.data, (a, b),
                         lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor.op(a.data - b.data, (a, b),
                         lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor.op(a.data * b.data, (a, b),
                         lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other
        out = a.data / b.data
        return Tensor.op(out, (a, b),
                         lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return Tensor.op(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p):
        if isinstance(p, Tensor):
            raise ConfigError("tensor exponents are not supported")
        a = self
        return Tensor.op(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, idx):
        a = self

        def bw(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor.op(a.data[idx], (a,), bw)

    # -- reductions / shape ----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        a = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor.op(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis=0):
        a = self
        out = a.data.max(axis=axis)
        arg = a.data.argmax(axis=axis)

        def bw(g):
            full = np.zeros_like(a.data)
            idx = list(np.indices(arg.shape))
            idx.insert(axis, arg)
            full[tuple(idx)] = g
            return (full,)

        return Tensor.op(out, (a,), bw)

    def reshape(self, *shape):
        a = self
        return Tensor.op(a.data.reshape(*shape), (a,), lambda g: (g.reshape(a.shape),))

    @property
    def T(self):
        a = self
        return Tensor.op(a.data.T, (a,), lambda g: (g.T,))


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def matmul(a, b):
    """Matrix product with numpy broadcasting over leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionMismatch(f"matmul {a.shape} @ {b.shape}")

    def bw(g):
        ga = gb = None
        if a.ndim == 1 and b.ndim == 1:
            return g * b.data, g * a.data
        if a.ndim == 1:  # (k) @ (k, m)
            return b.data @ g, np.outer(a.data, g)
        if b.ndim == 1:  # (n, k) @ (k)
            return np.outer(g, b.data), a.data.T @ g
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:  # shared weight: fold the batch axes into one product
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor.op(a.data @ b.data, (a, b), bw)


def swapaxes(x, i=-1, j=-2):
    return Tensor.op(np.swapaxes(x.data, i, j), (x,), lambda g: (np.swapaxes(g, i, j),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor.op(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def broadcast_rows(v, n):
    """Repeat a vector ``(d,)`` into an ``(n, d)`` matrix."""
    v = as_tensor(v)
    return Tensor.op(np.broadcast_to(v.data, (n,) + v.shape).copy(), (v,), lambda g: (g.sum(axis=0),))


def segment_sum(x, seg, n):
    """Sum rows of ``x`` into ``n`` buckets given per-row bucket ids."""
    seg = np.asarray(seg)
    out = np.zeros((n,) + x.shape[1:])
    np.add.at(out, seg, x.data)
    return Tensor.op(out, (x,), lambda g: (g[seg],))


def segment_max(x, seg, n):
    """Row-wise maximum per bucket; ties send the gradient to the first row."""
    seg = np.asarray(seg)
    out = np.full((n,) + x.shape[1:], -np.inf)
    np.maximum.at(out, seg, x.data)
    hit = x.data == out[seg]
    # keep only the first winning row per bucket and column
    order = np.arange(len(seg))
    first = np.full((n,) + x.shape[1:], len(seg))
    rows = np.broadcast_to(order.reshape((-1,) + (1,) * (x.ndim - 1)), x.shape)
    np.minimum.at(first, seg, np.where(hit, rows, len(seg)))
    win = rows == first[seg]
    return Tensor.op(out, (x,), lambda g: (np.where(win, g[seg], 0.0),))


def segment_softmax(x, seg, n):
    """Softmax of a 1-D score vector within each bucket."""
    seg = np.asarray(seg)
    peak = np.full(n, -np.inf)
    np.maximum.at(peak, seg, x.data)
    e = exp(x - peak[seg])
    return e / segment_sum(e, seg, n)[seg]


# -- elementwise ------------------------------------------------------------

def exp(x):
    out = np.exp(x.data)
    return Tensor.op(out, (x,), lambda g: (g * out,))


def log(x):
    return Tensor.op(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x):
    out = np.sqrt(x.data)
    return Tensor.op(out, (x,), lambda g: (g * 0.5 / out,))


def sin(x):
    return Tensor.op(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


def cos(x):
    return Tensor.op(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


def absolute(x):
    return Tensor.op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def relu(x):
    return Tensor.op(np.maximum(x.data, 0.0), (x,), lambda g: (g * (x.data > 0),))


def elu(x):
    neg = np.expm1(np.minimum(x.data, 0.0))
    out = np.where(x.data > 0, x.data, neg)
    return Tensor.op(out, (x,), lambda g: (g * np.where(x.data > 0, 1.0, neg + 1.0),))


def tanh(x):
    out = np.tanh(x.data)
    return Tensor.op(out, (x,), lambda g: (g * (1 - out * out),))


def sigmoid(x):
    out = 0.5 * (1 + np.tanh(0.5 * x.data))
    return Tensor.op(out, (x,), lambda g: (g * out * (1 - out),))


def softplus(x, beta=1.0):
    bx = beta * x.data
    out = (np.maximum(bx, 0) + np.log1p(np.exp(-np.abs(bx)))) / beta
    sig = 0.5 * (1 + np.tanh(0.5 * bx))
    return Tensor.op(out, (x,), lambda g: (g * sig,))


def gelu(x):
    c = np.sqrt(2 / np.pi)
    x2 = x.data * x.data
    t = np.tanh(c * x.data * (1 + 0.044715 * x2))
    out = 0.5 * x.data * (1 + t)
    du = c * (1 + 3 * 0.044715 * x2)
    return Tensor.op(out, (x,), lambda g: (g * (0.5 * (1 + t) + 0.5 * x.data * (1 - t * t) * du),))


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return Tensor.op(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return Tensor.op(out, (x,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    out = xh * gamma.data + beta.data

    def bw(g):
        gxh = g * gamma.data
        gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True) - xh * (gxh * xh).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xh).sum(axis=lead), g.sum(axis=lead)

    return Tensor.op(out, (x, gamma, beta), bw)


def elu_feature_map(x):
    return elu(x) + 1.0


def linear_attention(Q, K, V, eps=1e-6, key_mask=None):
    """Kernelised attention with feature map ``elu(x) + 1``.

    ``out_i = phi(Q_i) . (sum_j phi(K_j) V_j^T) / (phi(Q_i) . sum_j phi(K_j) + eps)``
    """
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    if Q.ndim < 2 or K.ndim != Q.ndim or V.ndim != Q.ndim:
        raise DimensionMismatch("linear_attention expects matching 2-D or batched 3-D inputs")
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2] or Q.shape[:-2] != K.shape[:-2]:
        raise DimensionMismatch(f"linear_attention shapes Q{Q.shape} K{K.shape} V{V.shape}")
    if Q.shape[-2] < 1 or K.shape[-2] < 1:
        raise DimensionMismatch("linear_attention needs at least one query and one key")
    fq, fk = elu_feature_map(Q), elu_feature_map(K)
    if key_mask is not None:  # masked keys drop out of both sums
        fk = fk * np.asarray(key_mask, dtype=np.float64)[..., None]
    kv = swapaxes(fk) @ V
    z = fk.sum(axis=-2, keepdims=True)
    num = fq @ kv
    den = (fq @ swapaxes(z)) + eps
    return num / den


# -- backward -----------------------------------------------------------------

def _topo(root):
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


def backward(loss, params=None):
    """Accumulate d(loss)/d(param) into ``.grad`` of every reachable leaf.

    With ``params`` given, parameters the loss does not reach get a zero
    gradient and a :class:`DisconnectedGraph` warning.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
    if params is not None:
        missing = [p for p in params if p.grad is None]
        for p in missing:
            p.grad = np.zeros_like(p.data)
        if missing:
            names = ", ".join(str(p.name) for p in missing[:5])
            warnings.warn(f"{len(missing)} parameter(s) not connected to the loss: {names}",
                          DisconnectedGraph, stacklevel=2)


# -- checkpoints -----------------------------------------------------------------

CHECKPOINT_MAGIC = b"SAHMRT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors: dict):
    """Write named arrays: header (magic, version, count, names, shapes) then
    the little-endian float64 payloads in header order."""
    header = bytearray(CHECKPOINT_MAGIC)
    header += struct.pack("<II", CHECKPOINT_VERSION, len(tensors))
    payload = bytearray()
    for name, arr in tensors.items():
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")
        raw = name.encode("utf-8")
        header += struct.pack("<I", len(raw)) + raw
        header += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        payload += arr.tobytes()
    Path(path).write_bytes(bytes(header + payload))


def load_checkpoint(path) -> dict:
    from .errors import MissingCheckpoint

    path = Path(path)
    if not path.exists():
        raise MissingCheckpoint(f"no checkpoint at {path}")
    buf = path.read_bytes()
    if buf[:6] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: bad checkpoint magic")
    version, count = struct.unpack_from("<II", buf, 6)
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    pos, specs = 14, []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        specs.append((name, shape))
    out = {}
    for name, shape in specs:
        n = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(buf, "<f8", n, pos).reshape(shape).copy()
        pos += 8 * n
    return out


# -- gradient checking ----------------------------------------------------------

def numeric_gradient(fn, params, eps=1e-4):
    """Central differences of scalar ``fn()`` with respect to each parameter."""
    out = []
    with no_grad():
        for p in params:
            g = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + eps
                hi = fn().item()
                flat[i] = old - eps
                lo = fn().item()
                flat[i] = old
                g.reshape(-1)[i] = (hi - lo) / (2 * eps)
            out.append(g)
    return out


def gradcheck(fn, params, eps=1e-4):
    """Largest relative error between analytic and central-difference gradients.

    Errors are measured per tensor as ``|a - n| / max(|a|, |n|)`` in the
    Euclidean norm, so tiny entries do not dominate.
    """
    for p in params:
        p.grad = None
    loss = fn()
    backward(loss, params)
    analytic = [p.grad.copy() for p in params]
    numeric = numeric_gradient(fn, params, eps)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
        worst = max(worst, float(np.linalg.norm(a - n) / scale))
    return worst
