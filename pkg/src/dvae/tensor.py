"""Dense float32 tensors with reverse-mode autodiff on an explicit tape.

Define-by-run: while a Tape is active, every differentiable op appends one
record; Tape.backward (or the module-level backward) replays the records in
reverse exactly once. Shapes must match exactly except for scalar operands
and trailing-axis bias adds.
"""

import math

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible for the requested op."""


class NumericError(ArithmeticError):
    """An op produced non-finite values from finite inputs."""


# Global toggle for the per-op finiteness check. Costs a linear scan per op;
# kept on so NaNs surface at the op that produced them, not steps later.
FINITE_CHECKS = True

_ACTIVE_TAPE = None


class Tape:
    """Ordered record of differentiable ops for one backward pass."""

    def __init__(self):
        self._records = []  # (output Tensor, backward fn: grad -> None)
        self._consumed = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a Tape is already active; nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self):
        return len(self._records)

    def _append(self, out, fn):
        self._records.append((out, fn))

    def backward(self, loss):
        """Populate .grad for every tensor the scalar loss depends on."""
        if loss.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise RuntimeError("tape already consumed by a previous backward pass")
        if not self._records:
            raise RuntimeError("tape is empty; nothing was recorded")
        self._consumed = True
        loss._accum_grad(np.ones_like(loss.data))
        for out, fn in reversed(self._records):
            if out.grad is not None:
                fn(out.grad)


def backward(loss):
    """Backward through the tape that recorded `loss`."""
    if loss._tape is None:
        raise RuntimeError("loss was not recorded on any tape")
    loss._tape.backward(loss)


class Tensor:
    """Dense row-major float32 array, optionally tracked for autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_grad_shared")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float32)
        self.requires_grad = requires_grad
        self.grad = None
        self._tape = None
        self._grad_shared = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)
        self._grad_shared = False

    def _accum_grad(self, g):
        # first contribution is adopted without copying; a second contribution
        # switches to an owned buffer so shared upstream arrays never mutate
        if self.grad is None:
            self.grad = g
            self._grad_shared = True
        elif self._grad_shared:
            self.grad = self.grad + g
            self._grad_shared = False
        else:
            self.grad += g

    # operator sugar; all shape rules live in the functions below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, *perm):
        return transpose(self, perm)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def _as_f32(x):
    return np.asarray(x, dtype=np.float32)


def _finite_or_raise(name, data):
    # single float64 reduction: NaN/Inf propagate to the sum, and a float64
    # accumulator cannot overflow on finite float32 inputs
    if FINITE_CHECKS and not np.isfinite(np.sum(data, dtype=np.float64)):
        raise NumericError(f"{name} produced non-finite values")


def _out(name, data, inputs, backward_fn):
    """Wrap `data` in a Tensor and record `backward_fn` if a tape is active."""
    _finite_or_raise(name, data)
    track = _ACTIVE_TAPE is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        out._tape = _ACTIVE_TAPE
        _ACTIVE_TAPE._append(out, backward_fn)
    return out


def _coerce(x):
    return x if isinstance(x, Tensor) else Tensor(_as_f32(x))


def _bias_style(a_shape, b_shape):
    """True if b matches the trailing axes of a (bias-add broadcast)."""
    k = len(b_shape)
    return 0 < k < len(a_shape) and a_shape[-k:] == b_shape


def _reduce_to(g, shape):
    """Sum g down to `shape` (undo scalar / trailing-axis broadcast)."""
    if g.shape == shape:
        return g
    if shape == ():
        return g.sum()
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra)))


def _binary(name, a, b, fwd, dfa, dfb):
    a, b = _coerce(a), _coerce(b)
    if not (a.shape == b.shape or a.ndim == 0 or b.ndim == 0
            or _bias_style(a.shape, b.shape) or _bias_style(b.shape, a.shape)):
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}")
    data = fwd(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(_reduce_to(dfa(g, a.data, b.data), a.shape))
        if b.requires_grad:
            b._accum_grad(_reduce_to(dfb(g, a.data, b.data), b.shape))

    return _out(name, data, (a, b), bwd)


def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def neg(a):
    a = _coerce(a)

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(-g)

    return _out("neg", -a.data, (a,), bwd)


def scale(a, s):
    """Multiply by a python scalar without creating a constant tensor."""
    a = _coerce(a)
    s = np.float32(s)

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(g * s)

    return _out("scale", a.data * s, (a,), bwd)


def matmul(a, b):
    """Matrix product. Either equal leading dims (batched), or a stacked
    left operand against a plain 2-D right operand (linear-layer case)."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    stacked_right = b.ndim == 2 and a.ndim > 2
    if not stacked_right and (a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul: leading dims must match exactly, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree, got {a.shape} and {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if stacked_right:
                gf = g.reshape(-1, g.shape[-1])
                af = a.data.reshape(-1, a.shape[-1])
                b._accum_grad(af.T @ gf)
            else:
                b._accum_grad(np.swapaxes(a.data, -1, -2) @ g)

    return _out("matmul", data, (a, b), bwd)


def reshape(a, shape):
    a = _coerce(a)
    shape = tuple(int(s) for s in (shape if isinstance(shape, (tuple, list)) else (shape,)))
    if math.prod(shape) != a.size and -1 not in shape:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    data = a.data.reshape(shape)

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(g.reshape(a.shape))

    return _out("reshape", data, (a,), bwd)


def transpose(a, perm):
    a = _coerce(a)
    perm = tuple(perm) if perm else tuple(reversed(range(a.ndim)))
    if sorted(perm) != list(range(a.ndim)):
        raise ShapeError(f"transpose: perm {perm} invalid for shape {a.shape}")
    inv = tuple(np.argsort(perm))
    data = a.data.transpose(perm)

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(g.transpose(inv))

    return _out("transpose", data, (a,), bwd)


def index(a, key):
    """Basic slicing only (ints, slices, tuples thereof)."""
    a = _coerce(a)
    data = a.data[key]

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[key] += g
            a._accum_grad(full)

    return _out("index", data, (a,), bwd)


def concat(tensors, axis=0):
    tensors = [_coerce(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        parts = np.split(g, splits, axis=axis)
        for t, p in zip(tensors, parts):
            if t.requires_grad:
                t._accum_grad(p)

    return _out("concat", data, tuple(tensors), bwd)


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a, axis=None, keepdims=False):
    a = _coerce(a)
    axis = _norm_axis(axis, a.ndim)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if a.requires_grad:
            gg = g
            if not keepdims and axis is not None:
                gg = np.expand_dims(g, axis)
            a._accum_grad(np.broadcast_to(gg, a.shape))

    return _out("sum", data, (a,), bwd)


def reduce_mean(a, axis=None, keepdims=False):
    a = _coerce(a)
    axis = _norm_axis(axis, a.ndim)
    n = a.size if axis is None else math.prod(a.shape[i] for i in axis)
    data = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float32)

    def bwd(g):
        if a.requires_grad:
            gg = g
            if not keepdims and axis is not None:
                gg = np.expand_dims(g, axis)
            a._accum_grad(np.broadcast_to(gg, a.shape) / np.float32(n))

    return _out("mean", data, (a,), bwd)


def exp(a):
    a = _coerce(a)
    data = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(g * data)

    return _out("exp", data, (a,), bwd)


def clamp(a, lo, hi):
    a = _coerce(a)
    data = np.clip(a.data, lo, hi)
    mask = ((a.data >= lo) & (a.data <= hi)).astype(np.float32)

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(g * mask)

    return _out("clamp", data, (a,), bwd)


def softmax(a, axis=-1):
    a = _coerce(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            dot = (g * data).sum(axis=axis, keepdims=True)
            a._accum_grad(data * (g - dot))

    return _out("softmax", data, (a,), bwd)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale/shift by gamma/beta."""
    x, gamma, beta = _coerce(x), _coerce(gamma), _coerce(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta must be ({d},), got {gamma.shape}/{beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True, dtype=np.float32)
    var = x.data.var(axis=-1, keepdims=True, dtype=np.float32)
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    xhat = (x.data - mu) * inv
    data = xhat * gamma.data + beta.data

    def bwd(g):
        if gamma.requires_grad:
            gamma._accum_grad((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta._accum_grad(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True, dtype=np.float32)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True, dtype=np.float32)
            x._accum_grad(inv * (dxhat - m1 - xhat * m2))

    return _out("layer_norm", data, (x, gamma, beta), bwd)


_GELU_C = np.float32(math.sqrt(2.0 / math.pi))


def gelu(a):
    """tanh-approximation GELU."""
    a = _coerce(a)
    x = a.data
    inner = _GELU_C * (x + np.float32(0.044715) * x * x * x)
    t = np.tanh(inner)
    data = np.float32(0.5) * x * (1.0 + t)

    def bwd(g):
        if a.requires_grad:
            dinner = _GELU_C * (1.0 + np.float32(3 * 0.044715) * x * x)
            da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            a._accum_grad(g * da.astype(np.float32))

    return _out("gelu", data, (a,), bwd)


def silu(a):
    a = _coerce(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * sig

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(g * (sig * (1.0 + a.data * (1.0 - sig))).astype(np.float32))

    return _out("silu", data, (a,), bwd)


def softplus(a):
    a = _coerce(a)
    # stable: log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    data = np.maximum(a.data, 0) + np.log1p(np.exp(-np.abs(a.data)))

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(g * (1.0 / (1.0 + np.exp(-a.data))).astype(np.float32))

    return _out("softplus", data.astype(np.float32), (a,), bwd)


def _patchify_data(x, p):
    b, c, h, w = x.shape
    v = x.reshape(b, c, h // p, p, w // p, p)
    v = v.transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(v.reshape(b, c * p * p, h // p, w // p))


def _unpatchify_data(x, p):
    b, cpp, hp, wp = x.shape
    c = cpp // (p * p)
    v = x.reshape(b, c, p, p, hp, wp)
    v = v.transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(v.reshape(b, c, hp * p, wp * p))


def patchify(a, p):
    """Space-to-depth: [B,C,H,W] -> [B, C*p*p, H/p, W/p]."""
    a = _coerce(a)
    if a.ndim != 4:
        raise ShapeError(f"patchify: expected [B,C,H,W], got {a.shape}")
    b, c, h, w = a.shape
    if h % p or w % p:
        raise ShapeError(f"patchify: spatial dims {h}x{w} not divisible by patch {p}")
    data = _patchify_data(a.data, p)

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(_unpatchify_data(g, p))

    return _out("patchify", data, (a,), bwd)


def unpatchify(a, p):
    """Depth-to-space inverse of patchify."""
    a = _coerce(a)
    if a.ndim != 4:
        raise ShapeError(f"unpatchify: expected [B,C*p*p,h,w], got {a.shape}")
    if a.shape[1] % (p * p):
        raise ShapeError(f"unpatchify: channel dim {a.shape[1]} not divisible by p*p={p * p}")
    data = _unpatchify_data(a.data, p)

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(_patchify_data(g, p))

    return _out("unpatchify", data, (a,), bwd)


def conv2d(x, w, b=None, stride=1, padding=0):
    """2D convolution, zero padding; x [B,Cin,H,W], w [Cout,Cin,kh,kw]."""
    x, w = _coerce(x), _coerce(w)
    if b is not None:
        b = _coerce(b)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D x and w, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: channel mismatch, x {x.shape} vs w {w.shape}")
    s, p = int(stride), int(padding)
    kh, kw = w.shape[2], w.shape[3]
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::s, ::s]  # [B,Cin,Ho,Wo,kh,kw]
    data = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3]))  # [B,Ho,Wo,Cout]
    data = np.ascontiguousarray(data.transpose(0, 3, 1, 2)).astype(np.float32)
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias must be ({w.shape[0]},), got {b.shape}")
        data += b.data[None, :, None, None]
    ho, wo = data.shape[2], data.shape[3]

    def bwd(g):
        if b is not None and b.requires_grad:
            b._accum_grad(g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # [Cout,Cin,kh,kw]
            w._accum_grad(dw.astype(np.float32))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    # g [B,Cout,Ho,Wo] x w[:,:,i,j] [Cout,Cin] -> [B,Cin,Ho,Wo]
                    contrib = np.tensordot(g, w.data[:, :, i, j], axes=([1], [0]))
                    dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += contrib.transpose(0, 3, 1, 2)
            x._accum_grad(dxp[:, :, p:xp.shape[2] - p, p:xp.shape[3] - p] if p else dxp)

    inputs = (x, w) if b is None else (x, w, b)
    return _out("conv2d", data, inputs, bwd)


def embedding(table, idx):
    """Row lookup: table [K,D], idx int array -> [..., D]."""
    table = _coerce(table)
    idx = np.asarray(idx, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= table.shape[0]):
        raise ShapeError(f"embedding: index out of range for table {table.shape}")
    data = table.data[idx]

    def bwd(g):
        if table.requires_grad:
            dt = np.zeros_like(table.data)
            np.add.at(dt, idx, g)
            table._accum_grad(dt)

    return _out("embedding", data, (table,), bwd)


def linear_map(a, fwd_fn, adj_fn, name="linear_map"):
    """Record an arbitrary linear op with explicit adjoint (used by spectral ops)."""
    a = _coerce(a)
    data = _as_f32(fwd_fn(a.data))

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(_as_f32(adj_fn(g)))

    return _out(name, data, (a,), bwd)
