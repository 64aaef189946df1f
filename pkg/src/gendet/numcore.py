"""Differentiable dense-array computation.

A small reverse-mode autodiff engine over numpy arrays. Every forward op
records its parents and a backward closure; ``DiffArray.backward()`` walks
the graph in reverse topological order and accumulates gradients into the
``grad`` slot of requires_grad leaves. 64-bit arrays are used by tests and
oracles, 32-bit by the training pipeline.

Also home to the transformer building blocks shared by the featurizer and
the region-language decoder (parameter factories, residual sublayers), the
AdamW optimizer, and the binary tensor-checkpoint container.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, fields as _dc_fields, is_dataclass

import numpy as np

LAYER_NORM_EPS = 1e-5


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ConfigError(ValueError):
    """A structural configuration value is illegal (e.g. d % heads != 0)."""


class CheckpointError(ValueError):
    """Checkpoint bytes are not a valid tensor container."""


class DiffArray:
    """Dense n-d float array with an optional gradient slot.

    ``grad`` is populated (and accumulates across repeated ``backward``
    calls) only on requires_grad leaves; intermediate nodes keep transient
    gradients for the duration of one backward pass.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if type(data) is np.ndarray and dtype is None and data.dtype.kind == "f":
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype)
            if arr.dtype.kind != "f":
                arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DiffArray(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _node(data, parents, backward):
        out = DiffArray(data)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        return out

    def backward(self):
        """Reverse-mode pass from a scalar loss.

        Gradients accumulate into ``grad`` of every requires_grad leaf
        reachable from this node; repeated calls without ``zero_grad``
        keep accumulating.
        """
        if self.data.shape != ():
            raise ValueError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        if not self.requires_grad:
            raise ValueError("backward() on a graph with no requires_grad leaves")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        grads = {id(self): np.ones((), dtype=self.data.dtype)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # requires_grad leaf
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_diff(x, like=None):
    """Wrap ``x`` as a constant DiffArray unless it already is one."""
    if isinstance(x, DiffArray):
        return x
    dtype = like.data.dtype if isinstance(like, DiffArray) else None
    return DiffArray(np.asarray(x, dtype=dtype))


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_diff(a, b), as_diff(b, a)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return DiffArray._node(out, (a, b), backward)


def sub(a, b):
    a, b = as_diff(a, b), as_diff(b, a)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return DiffArray._node(out, (a, b), backward)


def mul(a, b):
    a, b = as_diff(a, b), as_diff(b, a)
    out = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return DiffArray._node(out, (a, b), backward)


def div(a, b):
    a, b = as_diff(a, b), as_diff(b, a)
    out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return DiffArray._node(out, (a, b), backward)


def neg(x):
    return DiffArray._node(-x.data, (x,), lambda g: (-g,))


def exp(x):
    out = np.exp(x.data)
    return DiffArray._node(out, (x,), lambda g: (g * out,))


def log(x):
    return DiffArray._node(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x):
    out = np.maximum(x.data, 0.0)
    return DiffArray._node(out, (x,), lambda g: (g * (x.data > 0),))


def sigmoid(x):
    out = 1.0 / (1.0 + np.exp(-np.clip(x.data, -60.0, 60.0)))
    return DiffArray._node(out, (x,), lambda g: (g * out * (1.0 - out),))


def absolute(x):
    return DiffArray._node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def minimum(a, b):
    """Elementwise min; on ties the gradient routes to the first argument."""
    a, b = as_diff(a, b), as_diff(b, a)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)

    def backward(g):
        return (
            _unbroadcast(g * take_a, a.data.shape),
            _unbroadcast(g * ~take_a, b.data.shape),
        )

    return DiffArray._node(out, (a, b), backward)


def maximum(a, b):
    """Elementwise max; on ties the gradient routes to the first argument."""
    a, b = as_diff(a, b), as_diff(b, a)
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)

    def backward(g):
        return (
            _unbroadcast(g * take_a, a.data.shape),
            _unbroadcast(g * ~take_a, b.data.shape),
        )

    return DiffArray._node(out, (a, b), backward)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(x, shape):
    old = x.data.shape
    return DiffArray._node(
        x.data.reshape(shape), (x,), lambda g: (g.reshape(old),)
    )


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return DiffArray._node(
        x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),)
    )


def getitem(x, idx):
    out = x.data[idx]

    def backward(g):
        buf = np.zeros_like(x.data)
        np.add.at(buf, idx, g)
        return (buf,)

    return DiffArray._node(out, (x,), backward)


def concat(parts, axis):
    parts = tuple(parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = np.cumsum([p.data.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return DiffArray._node(out, parts, backward)


def broadcast_to(x, shape):
    shape = tuple(shape)
    old = x.data.shape
    return DiffArray._node(
        np.broadcast_to(x.data, shape).copy(),
        (x,),
        lambda g: (_unbroadcast(g, old),),
    )


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def array_sum(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return DiffArray._node(out, (x,), backward)


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else x.data.shape[axis]
    return array_sum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def logsumexp(x, axis, keepdims=False):
    """log(sum(exp(x))) along ``axis``; -inf entries carry zero weight and
    all-(-inf) slices return -inf without producing NaNs."""
    m = np.max(x.data, axis=axis, keepdims=True)
    safe_m = np.where(np.isneginf(m), 0.0, m)
    e = np.exp(x.data - safe_m)
    s = e.sum(axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        out = np.log(np.where(s > 0, s, 1.0)) + safe_m
    out = np.where(s > 0, out, -np.inf)
    weights = e / np.where(s > 0, s, 1.0)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    return DiffArray._node(out.astype(x.data.dtype, copy=False), (x,), backward)


# ---------------------------------------------------------------------------
# neural-net primitives
# ---------------------------------------------------------------------------


def linear(x, w, b=None):
    """y = x @ w (+ b) over the trailing feature axis.

    x: (..., d_in), w: (d_in, d_out), b: (d_out,).
    """
    if x.data.shape[-1] != w.data.shape[0]:
        raise DimensionError(
            f"linear: inner dims disagree, x {x.data.shape} vs w {w.data.shape}"
        )
    if b is not None and b.data.shape != (w.data.shape[1],):
        raise DimensionError(
            f"linear: bias shape {b.data.shape} does not match out dim {w.data.shape[1]}"
        )
    lead = x.data.shape[:-1]
    d_in, d_out = w.data.shape
    x2 = np.ascontiguousarray(x.data).reshape(-1, d_in)
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(lead + (d_out,))

    def backward(g):
        g2 = np.ascontiguousarray(g).reshape(-1, d_out)
        gx = (g2 @ w.data.T).reshape(lead + (d_in,))
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return DiffArray._node(out, parents, backward)


def matmul(a, b):
    """Batched matrix product with numpy leading-dim broadcasting."""
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return DiffArray._node(out, (a, b), backward)


def _masked_shift(data, axis, mask):
    """Apply an additive mask and return (shifted logits, exp, sum, safe max)."""
    z = data if mask is None else data + mask
    m = np.max(z, axis=axis, keepdims=True)
    safe_m = np.where(np.isneginf(m), 0.0, m)
    e = np.exp(z - safe_m)
    s = e.sum(axis=axis, keepdims=True)
    return z, e, s, safe_m


def softmax(x, axis=-1, mask=None):
    """Softmax along ``axis`` with an optional additive mask (0 keeps an
    entry, -inf removes it). Fully-masked slices return all zeros."""
    _, e, s, _ = _masked_shift(x.data, axis, mask)
    out = e / np.where(s > 0, s, 1.0)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return DiffArray._node(out, (x,), backward)


def log_softmax(x, axis=-1, mask=None):
    """Log-softmax along ``axis``; masked entries (and fully-masked slices)
    come back as -inf with zero gradient."""
    z, e, s, safe_m = _masked_shift(x.data, axis, mask)
    with np.errstate(divide="ignore"):
        logs = np.log(np.where(s > 0, s, 1.0))
    out = np.where(s > 0, z - safe_m - logs, -np.inf)
    out = np.where(np.isneginf(z), -np.inf, out)
    p = e / np.where(s > 0, s, 1.0)
    dead = np.isneginf(z)

    def backward(g):
        g = np.where(dead, 0.0, g)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return DiffArray._node(out.astype(x.data.dtype, copy=False), (x,), backward)


def layer_norm(x, gamma=None, beta=None):
    """Normalize the trailing axis to zero mean / unit variance (epsilon
    1e-5), then apply the optional elementwise affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    y = (x.data - mu) * inv
    d = x.data.shape[-1]

    def backward(g):
        gy = g - g.mean(axis=-1, keepdims=True) - y * (g * y).mean(axis=-1, keepdims=True)
        return (gy * inv,)

    out = DiffArray._node(y, (x,), backward)
    if gamma is not None:
        out = out * gamma
    if beta is not None:
        out = out + beta
    return out


def bce_with_logits(logits, targets):
    """Elementwise binary cross-entropy on raw logits (numerically stable)."""
    t = np.asarray(targets, dtype=logits.data.dtype)
    z = logits.data
    out = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    sig = 1.0 / (1.0 + np.exp(-np.clip(z, -60.0, 60.0)))

    def backward(g):
        return (g * (sig - t),)

    return DiffArray._node(out, (logits,), backward)


def attention(q, k, v, heads, mask=None, w_out=None, b_out=None):
    """Multi-head scaled dot-product attention over pre-projected q/k/v.

    q: (..., Lq, d), k/v: (..., Lk, d) with d divisible by ``heads``; each
    head works at dimension d/heads. ``mask`` is additive (0 keeps, -inf
    drops), shape (Lq, Lk) or broadcastable to the score tensor. When
    ``w_out`` is given the merged heads go through the output projection.
    """
    d = q.data.shape[-1]
    if d % heads != 0:
        raise ConfigError(f"attention: model dim {d} not divisible by {heads} heads")
    if k.data.shape[-1] != d or v.data.shape[-1] != d:
        raise DimensionError("attention: q/k/v feature dims disagree")
    hd = d // heads
    lq, lk = q.data.shape[-2], k.data.shape[-2]
    lead = q.data.shape[:-2]

    def split_heads(x, length):
        x = reshape(x, lead + (length, heads, hd))
        ndim = len(lead) + 3
        perm = tuple(range(len(lead))) + (ndim - 2, ndim - 3, ndim - 1)
        return transpose(x, perm)  # (..., heads, L, hd)

    qh = split_heads(q, lq)
    kh = split_heads(k, lk)
    vh = split_heads(v, lk)
    ndim = len(lead) + 3
    swap = tuple(range(ndim - 2)) + (ndim - 1, ndim - 2)
    scores = matmul(qh, transpose(kh, swap)) * (1.0 / math.sqrt(hd))
    weights = softmax(scores, axis=-1, mask=mask)
    ctx = matmul(weights, vh)  # (..., heads, Lq, hd)
    perm = tuple(range(len(lead))) + (ndim - 2, ndim - 3, ndim - 1)
    ctx = reshape(transpose(ctx, perm), lead + (lq, d))
    if w_out is not None:
        ctx = linear(ctx, w_out, b_out)
    return ctx


# ---------------------------------------------------------------------------
# parameter factories and transformer blocks
# ---------------------------------------------------------------------------


def xavier_uniform(rng, fan_in, fan_out, shape=None, dtype=np.float32):
    """Glorot/Xavier uniform init for weight matrices; biases start at zero."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in, fan_out) if shape is None else shape
    return DiffArray(
        rng.uniform(-limit, limit, size=shape).astype(dtype), requires_grad=True
    )


def zeros_param(shape, dtype=np.float32):
    return DiffArray(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype=np.float32):
    return DiffArray(np.ones(shape, dtype=dtype), requires_grad=True)


@dataclass
class LinearParams:
    w: DiffArray
    b: DiffArray

    @staticmethod
    def create(rng, d_in, d_out, dtype=np.float32):
        return LinearParams(
            w=xavier_uniform(rng, d_in, d_out, dtype=dtype),
            b=zeros_param((d_out,), dtype=dtype),
        )

    def __call__(self, x):
        return linear(x, self.w, self.b)


@dataclass
class AttentionParams:
    """In/out projections of one multi-head attention block."""

    wq: DiffArray
    bq: DiffArray
    wk: DiffArray
    bk: DiffArray
    wv: DiffArray
    bv: DiffArray
    wo: DiffArray
    bo: DiffArray

    @staticmethod
    def create(rng, d, dtype=np.float32, zero_out=False, identity_qk=False):
        """``zero_out`` starts the output projection at zero so a residual
        sublayer is the identity at init (keeps deep post-norm stacks from
        washing out per-token identity before training). ``identity_qk``
        starts the query/key projections at the identity so positional
        terms carried by the inputs give attention an immediate locality
        prior instead of a scrambled one."""

        def w():
            return xavier_uniform(rng, d, d, dtype=dtype)

        def b():
            return zeros_param((d,), dtype=dtype)

        def eye():
            return DiffArray(np.eye(d, dtype=dtype), requires_grad=True)

        wq = eye() if identity_qk else w()
        wk = eye() if identity_qk else w()
        wo = zeros_param((d, d), dtype=dtype) if zero_out else w()
        return AttentionParams(wq, b(), wk, b(), w(), b(), wo, b())

    def __call__(self, xq, xkv, heads, mask=None, xv=None):
        """xq/xkv feed the query/key projections; values come from ``xv``
        when given (so positional terms can condition q/k only)."""
        q = linear(xq, self.wq, self.bq)
        k = linear(xkv, self.wk, self.bk)
        v = linear(xkv if xv is None else xv, self.wv, self.bv)
        return attention(q, k, v, heads, mask=mask, w_out=self.wo, b_out=self.bo)


@dataclass
class FeedForwardParams:
    w1: DiffArray
    b1: DiffArray
    w2: DiffArray
    b2: DiffArray

    @staticmethod
    def create(rng, d, hidden, dtype=np.float32, zero_out=False):
        return FeedForwardParams(
            w1=xavier_uniform(rng, d, hidden, dtype=dtype),
            b1=zeros_param((hidden,), dtype=dtype),
            w2=zeros_param((hidden, d), dtype=dtype)
            if zero_out
            else xavier_uniform(rng, hidden, d, dtype=dtype),
            b2=zeros_param((d,), dtype=dtype),
        )

    def __call__(self, x):
        return linear(relu(linear(x, self.w1, self.b1)), self.w2, self.b2)


@dataclass
class LayerNormParams:
    gamma: DiffArray
    beta: DiffArray

    @staticmethod
    def create(d, dtype=np.float32):
        return LayerNormParams(ones_param((d,), dtype=dtype), zeros_param((d,), dtype=dtype))

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta)


def attn_sublayer(attn, norm, xq, xkv, heads, mask=None):
    """Post-norm residual attention sublayer: LN(x + Attn(x))."""
    return norm(xq + attn(xq, xkv, heads, mask=mask))


def ffn_sublayer(ffn, norm, x):
    """Post-norm residual feed-forward sublayer: LN(x + FFN(x))."""
    return norm(x + ffn(x))


# ---------------------------------------------------------------------------
# parameter traversal
# ---------------------------------------------------------------------------


def named_parameters(obj, prefix=""):
    """Flatten nested dataclasses / lists / dicts of DiffArrays into
    (dotted-name, DiffArray) pairs, in a stable traversal order."""
    out = []

    def walk(node, name):
        if isinstance(node, DiffArray):
            out.append((name, node))
        elif is_dataclass(node):
            for f in _dc_fields(node):
                walk(getattr(node, f.name), f"{name}.{f.name}" if name else f.name)
        elif isinstance(node, (list, tuple)):
            for i, item in enumerate(node):
                walk(item, f"{name}.{i}" if name else str(i))
        elif isinstance(node, dict):
            for key, item in node.items():
                walk(item, f"{name}.{key}" if name else str(key))

    walk(obj, prefix)
    return out


def zero_grads(params):
    for _, p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    """First/second moment buffers per parameter plus the shared step count."""

    m: dict
    v: dict
    t: int = 0


def init_optim_state(params):
    return OptimState(
        m={name: np.zeros_like(p.data) for name, p in params},
        v={name: np.zeros_like(p.data) for name, p in params},
        t=0,
    )


def adamw_step(params, state, lr=1e-4, beta1=0.9, beta2=0.999, weight_decay=1e-4, eps=1e-8):
    """One decoupled-weight-decay Adam update; missing grads count as zero."""
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p.data)).astype(
            p.data.dtype, copy=False
        )


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"RTGK"
CHECKPOINT_VERSION = 1


def save_tensors(path, tensors):
    """Write named float32 tensors to the binary checkpoint container.

    Layout (little-endian): magic "RTGK", u32 version, u32 tensor count,
    then per tensor: u16 name length, UTF-8 name, u8 rank, u64 per dim,
    float32 row-major data.
    """
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name, value in tensors.items():
            arr = value.data if isinstance(value, DiffArray) else np.asarray(value)
            arr = np.asarray(arr, dtype="<f4")  # tobytes() below emits C order
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_tensors(path):
    """Read a checkpoint container back into {name: float32 ndarray}."""
    with open(path, "rb") as fh:
        blob = fh.read()

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    pos = 0
    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("unknown checkpoint magic")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims"))
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * n, f"data of {name}"), dtype="<f4")
        tensors[name] = data.reshape(dims).copy()
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last tensor")
    return tensors
