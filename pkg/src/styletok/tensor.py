"""Dense tensors with reverse-mode differentiation on an explicit tape.

All model math runs on numpy arrays wrapped in :class:`Tensor`. While a
:class:`Tape` is active, every differentiable op appends a backward closure;
``Tape.backward`` replays the closures in exact reverse execution order and
accumulates gradients additively, so the gradient of shared subexpressions is
the sum over all uses. Outside a tape, ops are plain numpy with no recording,
which is what inference uses.

Conventions:
  - float32 by default; the gradient checker builds everything in float64.
  - Tensors are immutable once produced (only ``Parameter.data`` is updated,
    by the optimizer, between tapes).
  - Reductions use numpy's serial order, so identical inputs give bit
    identical outputs.
  - Every op output is checked for NaN/Inf unless ``finite_checks(False)``
    is active; a violation raises :class:`NumericError` instead of
    propagating.

The recurrent cell steps and the strided convolution are single fused ops
with hand-written backward passes; everything else composes from the small
primitives. All of them are covered by the central finite-difference suite.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import NumericError, ShapeError

DEFAULT_DTYPE = np.float32

_tape = None
_finite_checks = True


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Temporarily enable/disable per-op NaN/Inf checking (default on)."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = enabled
    try:
        yield
    finally:
        _finite_checks = prev


class Tensor:
    """A dense array plus the gradient accumulated for it during backward."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if _finite_checks and not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in tensor of shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def _accum_own(self, g):
        # for backward closures that hand over a freshly allocated array
        if self.grad is None:
            if g.dtype == self.data.dtype:
                self.grad = g
            else:
                self.grad = g.astype(self.data.dtype)
        else:
            self.grad += g

    def __repr__(self):
        return (f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, "
                f"requires_grad={self.requires_grad})")

    # arithmetic sugar; all defer to the module-level ops
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


class Parameter(Tensor):
    """A named, trainable (or buffer) tensor owned by a model.

    ``trainable=False`` marks state that is checkpointed but not touched by
    the optimizer (e.g. normalization running statistics).
    """

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str = "", trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name
        self.trainable = trainable


class Tape:
    """Ordered record of executed differentiable ops.

    Use as a context manager around the forward pass, then call
    :meth:`backward` on the scalar loss. Nested tapes are not supported.
    """

    __slots__ = ("_records",)

    def __init__(self):
        self._records = []

    def __enter__(self):
        global _tape
        if _tape is not None:
            raise RuntimeError("tapes do not nest")
        _tape = self
        return self

    def __exit__(self, *exc):
        global _tape
        _tape = None
        return False

    def backward(self, loss: Tensor, parameters=None):
        """Fill gradients for everything reachable from ``loss``.

        Parameters passed explicitly get a zero gradient if the loss never
        touched them. Raises on a non-scalar loss.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._records):
            if type(out) is tuple:
                if any(o.grad is not None for o in out):
                    fn(*(o.grad for o in out))
            elif out.grad is not None:
                fn(out.grad)
        if parameters is not None:
            for p in parameters:
                if p.requires_grad and p.grad is None:
                    p.grad = np.zeros_like(p.data)

    def __len__(self):
        return len(self._records)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _record(out, fn) -> None:
    if _tape is not None:
        _tape._records.append((out, fn))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _make(data, requires_grad):
    out = Tensor.__new__(Tensor)
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values in op output of shape {data.shape}")
    out.data = data
    out.grad = None
    out.requires_grad = requires_grad
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic
#
# Each binary op has a fast path for a plain-number second operand so the
# hot loops do not allocate constant tensors.


def add(a, b):
    if not isinstance(b, Tensor):
        out = _make(a.data + b, a.requires_grad)
        if a.requires_grad:
            def fnc(g, a=a):
                a._accum(_unbroadcast(g, a.data.shape))
            _record(out, fnc)
        return out
    if not isinstance(a, Tensor):
        return add(b, a)
    out = _make(a.data + b.data, a.requires_grad or b.requires_grad)
    if out.requires_grad:
        def fn(g, a=a, b=b):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.data.shape))
        _record(out, fn)
    return out


def sub(a, b):
    if not isinstance(b, Tensor):
        return add(a, -b)
    if not isinstance(a, Tensor):
        return add(neg(b), a)
    out = _make(a.data - b.data, a.requires_grad or b.requires_grad)
    if out.requires_grad:
        def fn(g, a=a, b=b):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g, b.data.shape))
        _record(out, fn)
    return out


def mul(a, b):
    if not isinstance(b, Tensor):
        out = _make(a.data * b, a.requires_grad)
        if a.requires_grad:
            def fnc(g, a=a, b=b):
                a._accum(_unbroadcast(g * b, a.data.shape))
            _record(out, fnc)
        return out
    if not isinstance(a, Tensor):
        return mul(b, a)
    out = _make(a.data * b.data, a.requires_grad or b.requires_grad)
    if out.requires_grad:
        def fn(g, a=a, b=b):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.data.shape))
        _record(out, fn)
    return out


def div(a, b):
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / b)
    a = _lift(a, b)
    out = _make(a.data / b.data, a.requires_grad or b.requires_grad)
    if out.requires_grad:
        def fn(g, a=a, b=b):
            if a.requires_grad:
                a._accum(_unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
        _record(out, fn)
    return out


def neg(a: Tensor):
    out = _make(-a.data, a.requires_grad)
    if a.requires_grad:
        def fn(g, a=a):
            a._accum(-g)
        _record(out, fn)
    return out


def power(a: Tensor, exponent: float):
    """Elementwise power with a constant exponent."""
    out = _make(a.data ** exponent, a.requires_grad)
    if a.requires_grad:
        def fn(g, a=a):
            a._accum(g * exponent * a.data ** (exponent - 1.0))
        _record(out, fn)
    return out


# ---------------------------------------------------------------------------
# nonlinearities


def tanh(a: Tensor):
    y = np.tanh(a.data)
    out = _make(y, a.requires_grad)
    if a.requires_grad:
        def fn(g, a=a, y=y):
            a._accum(g * (1.0 - y * y))
        _record(out, fn)
    return out


def sigmoid(a: Tensor):
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = _make(y, a.requires_grad)
    if a.requires_grad:
        def fn(g, a=a, y=y):
            a._accum(g * y * (1.0 - y))
        _record(out, fn)
    return out


def relu(a: Tensor):
    out = _make(np.maximum(a.data, 0.0), a.requires_grad)
    if a.requires_grad:
        def fn(g, a=a):
            a._accum(g * (a.data > 0))
        _record(out, fn)
    return out


def softplus(a: Tensor):
    # log(1+e^x), stable on both tails
    x = a.data
    y = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    out = _make(y, a.requires_grad)
    if a.requires_grad:
        def fn(g, a=a):
            a._accum(g / (1.0 + np.exp(-a.data)))
        _record(out, fn)
    return out


def exp(a: Tensor):
    y = np.exp(a.data)
    out = _make(y, a.requires_grad)
    if a.requires_grad:
        def fn(g, a=a, y=y):
            a._accum(g * y)
        _record(out, fn)
    return out


def log(a: Tensor):
    if np.any(a.data <= 0):
        raise NumericError("log of non-positive value")
    out = _make(np.log(a.data), a.requires_grad)
    if a.requires_grad:
        def fn(g, a=a):
            a._accum(g / a.data)
        _record(out, fn)
    return out


def sqrt(a: Tensor):
    y = np.sqrt(a.data)
    out = _make(y, a.requires_grad)
    if a.requires_grad:
        def fn(g, a=a, y=y):
            a._accum(g * 0.5 / y)
        _record(out, fn)
    return out


def absolute(a: Tensor):
    out = _make(np.abs(a.data), a.requires_grad)
    if a.requires_grad:
        def fn(g, a=a):
            a._accum(g * np.sign(a.data))
        _record(out, fn)
    return out


def softmax(a: Tensor, temperature: float = 1.0, axis: int = -1):
    """Stable softmax of ``a / temperature`` along ``axis``.

    Outputs are non-negative and sum to 1 along the axis. ``temperature``
    must be positive; small values sharpen toward one-hot, large values
    flatten toward uniform.
    """
    if not temperature > 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    z = a.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _make(y, a.requires_grad)
    if a.requires_grad:
        def fn(g, a=a, y=y):
            dot = (g * y).sum(axis=axis, keepdims=True)
            a._accum((g - dot) * y / temperature)
        _record(out, fn)
    return out


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b):
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    if not isinstance(b, Tensor):
        b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim == 2:
        # stacked row blocks against a shared matrix: run one flat GEMM so
        # the backward needs no per-batch weight-gradient buffer
        lead = a.data.shape[:-1]
        a2 = a.data.reshape(-1, a.data.shape[-1])
        out = _make((a2 @ b.data).reshape(lead + (b.data.shape[-1],)),
                    a.requires_grad or b.requires_grad)
        if out.requires_grad:
            def fn2(g, a=a, b=b, a2=a2, lead=lead):
                g2 = g.reshape(-1, g.shape[-1])
                if a.requires_grad:
                    a._accum_own((g2 @ b.data.T).reshape(a.data.shape))
                if b.requires_grad:
                    b._accum_own(a2.T @ g2)
            _record(out, fn2)
        return out
    out = _make(np.matmul(a.data, b.data), a.requires_grad or b.requires_grad)
    if out.requires_grad:
        def fn(g, a=a, b=b):
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                a._accum_own(_unbroadcast(ga, a.data.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                b._accum_own(_unbroadcast(gb, b.data.shape))
        _record(out, fn)
    return out


def tsum(a: Tensor, axis=None, keepdims: bool = False):
    out = _make(a.data.sum(axis=axis, keepdims=keepdims), a.requires_grad)
    if a.requires_grad:
        def fn(g, a=a):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.data.shape))
        _record(out, fn)
    return out


def tmean(a: Tensor, axis=None, keepdims: bool = False):
    out = _make(a.data.mean(axis=axis, keepdims=keepdims), a.requires_grad)
    if a.requires_grad:
        n = a.data.size // out.data.size

        def fn(g, a=a, n=n):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.data.shape) / n)
        _record(out, fn)
    return out


def reshape(a: Tensor, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = _make(a.data.reshape(shape), a.requires_grad)
    if a.requires_grad:
        def fn(g, a=a):
            a._accum(g.reshape(a.data.shape))
        _record(out, fn)
    return out


def transpose(a: Tensor, axes=None):
    out = _make(np.transpose(a.data, axes), a.requires_grad)
    if a.requires_grad:
        inv = None if axes is None else tuple(np.argsort(axes))

        def fn(g, a=a, inv=inv):
            a._accum(np.transpose(g, inv))
        _record(out, fn)
    return out


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice, type(Ellipsis), type(None)))
               for p in parts)


def getitem(a: Tensor, idx):
    """Slice/index a tensor. Advanced integer indexing accumulates via add.at."""
    out = _make(a.data[idx], a.requires_grad)
    if a.requires_grad:
        basic = _is_basic_index(idx)

        def fn(g, a=a, idx=idx, basic=basic):
            ga = np.zeros_like(a.data)
            if basic:
                ga[idx] += g
            else:
                np.add.at(ga, idx, g)
            a._accum(ga)
        _record(out, fn)
    return out


def concat(tensors, axis: int = 0):
    tensors = list(tensors)
    req = any(t.requires_grad for t in tensors)
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), req)
    if req:
        sizes = [t.data.shape[axis] for t in tensors]

        def fn(g, tensors=tensors, sizes=sizes):
            start = 0
            for t, s in zip(tensors, sizes):
                if t.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(start, start + s)
                    t._accum(g[tuple(sl)])
                start += s
        _record(out, fn)
    return out


def pad(a: Tensor, pad_width):
    """Zero padding; ``pad_width`` as for ``np.pad``."""
    out = _make(np.pad(a.data, pad_width), a.requires_grad)
    if a.requires_grad:
        slices = tuple(slice(lo, lo + s) for (lo, _), s in zip(pad_width, a.data.shape))

        def fn(g, a=a, slices=slices):
            a._accum(g[slices])
        _record(out, fn)
    return out


def embedding(table: Tensor, ids: np.ndarray):
    """Row lookup ``table[ids]`` with scatter-add gradient into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(
            f"embedding ids out of range [0, {table.data.shape[0]}): "
            f"min {ids.min()}, max {ids.max()}"
        )
    out = _make(table.data[ids], table.requires_grad)
    if table.requires_grad:
        def fn(g, table=table, ids=ids):
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids, g)
            table._accum(gt)
        _record(out, fn)
    return out


def dropout(a: Tensor, p: float, rng: np.random.Generator, train: bool):
    """Inverted dropout: train mode zeroes units with prob ``p`` and rescales."""
    if not train or p == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    return mul(a, Tensor(keep))


def zoneout(h_prev: Tensor, h_new: Tensor, p: float, mode: str,
            rng: np.random.Generator | None = None):
    """Per-unit stochastic state preservation.

    Train mode keeps each unit's previous value with probability ``p``;
    eval mode uses the deterministic expectation ``p*h_prev + (1-p)*h_new``.
    """
    if h_prev.data.shape != h_new.data.shape:
        raise ShapeError(f"zoneout shapes differ: {h_prev.shape} vs {h_new.shape}")
    if not 0.0 <= p < 1.0:
        raise ValueError(f"zoneout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return h_new
    if mode == "train":
        if rng is None:
            raise ValueError("zoneout train mode needs an rng")
        m = (rng.random(h_new.data.shape) < p).astype(h_new.data.dtype)
    elif mode == "eval":
        m = p
    else:
        raise ValueError(f"unknown zoneout mode {mode!r}")
    out = _make(m * h_prev.data + (1.0 - m) * h_new.data,
                h_prev.requires_grad or h_new.requires_grad)
    if out.requires_grad:
        def fn(g, h_prev=h_prev, h_new=h_new, m=m):
            if h_prev.requires_grad:
                h_prev._accum_own(g * m)
            if h_new.requires_grad:
                h_new._accum_own(g * (1.0 - m))
        _record(out, fn)
    return out


# ---------------------------------------------------------------------------
# fused ops: strided convolution and recurrent cell steps


def _same_pad(extent: int, k: int, s: int):
    out = -(-extent // s)  # ceil division
    total = max(0, (out - 1) * s + k - extent)
    return out, total // 2, total - total // 2


def conv2d_nhwc(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
                stride=(2, 2)):
    """Channels-last 2-D convolution, 'same' zero padding, fused backward.

    ``x`` is ``[B,H,W,Cin]``, ``kernel`` ``[kh,kw,Cin,Cout]``; output spatial
    extents are ``ceil(input/stride)``.
    """
    b, h, w, cin = x.data.shape
    kh, kw, kcin, cout = kernel.data.shape
    if cin != kcin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, kernel expects {kcin}")
    sh, sw = stride
    oh, pt, _pb = _same_pad(h, kh, sh)
    ow, pl, _pr = _same_pad(w, kw, sw)
    xp = np.zeros((b, h + kh - 1, w + kw - 1, cin), dtype=x.data.dtype)
    xp[:, pt:pt + h, pl:pl + w, :] = x.data
    kd = kernel.data
    y = None
    taps = []
    for i in range(kh):
        rows = slice(i, i + sh * (oh - 1) + 1, sh)
        for j in range(kw):
            cols = slice(j, j + sw * (ow - 1) + 1, sw)
            taps.append((rows, cols, i, j))
            t = np.matmul(xp[:, rows, cols, :], kd[i, j])
            y = t if y is None else y + t
    if bias is not None:
        y = y + bias.data
    req = x.requires_grad or kernel.requires_grad or (bias is not None and bias.requires_grad)
    out = _make(y, req)
    if req:
        def fn(g, x=x, kernel=kernel, bias=bias, xp=xp, taps=taps, pt=pt, pl=pl):
            if bias is not None and bias.requires_grad:
                bias._accum(g.sum(axis=(0, 1, 2)))
            if kernel.requires_grad:
                gk = np.empty_like(kernel.data)
                gm = g.reshape(-1, g.shape[-1])
                for rows, cols, i, j in taps:
                    patch = xp[:, rows, cols, :].reshape(-1, xp.shape[-1])
                    gk[i, j] = patch.T @ gm
                kernel._accum(gk)
            if x.requires_grad:
                gp = np.zeros_like(xp)
                kd = kernel.data
                for rows, cols, i, j in taps:
                    gp[:, rows, cols, :] += np.matmul(g, kd[i, j].T)
                h, w = x.data.shape[1], x.data.shape[2]
                x._accum(gp[:, pt:pt + h, pl:pl + w, :])
        _record(out, fn)
    return out


def conv2d(x: Tensor, kernel: Tensor, stride=(2, 2)):
    """Strided 2-D convolution with 'same' zero padding, channels first.

    ``x`` is ``[C_in, H, W]`` or ``[B, C_in, H, W]``; ``kernel`` is
    ``[C_out, C_in, kh, kw]``. Output spatial extents are
    ``ceil(input / stride)``.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.data.shape)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/kernel, got {x.shape}, {kernel.shape}")
    if x.data.shape[1] != kernel.data.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input has {x.data.shape[1]}, "
            f"kernel expects {kernel.data.shape[1]}"
        )
    xl = transpose(x, (0, 2, 3, 1))
    kl = transpose(kernel, (2, 3, 1, 0))
    y = conv2d_nhwc(xl, kl, stride=stride)
    y = transpose(y, (0, 3, 1, 2))
    if squeeze:
        y = reshape(y, y.data.shape[1:])
    return y


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def gru_step(x: Tensor, h: Tensor, w_zr: Tensor, u_zr: Tensor, b_zr: Tensor,
             w_n: Tensor, u_n: Tensor, b_n: Tensor) -> Tensor:
    """One GRU step, reset gate applied to the state before the candidate.

    ``x`` is ``[B, d_in]`` and ``h`` ``[B, d_h]``; gate weights are stacked
    as ``[.., 2*d_h]`` for the update/reset pair plus separate candidate
    weights. Fused forward/backward.
    """
    d = h.data.shape[-1]
    if x.data.shape[0] != h.data.shape[0]:
        raise ShapeError(f"gru step batch mismatch: x {x.shape}, h {h.shape}")
    if w_zr.data.shape != (x.data.shape[-1], 2 * d):
        raise ShapeError(f"gru step weight mismatch: w_zr {w_zr.shape} for x {x.shape}, h {h.shape}")
    a = x.data @ w_zr.data + h.data @ u_zr.data + b_zr.data
    z = _sig(a[:, :d])
    r = _sig(a[:, d:])
    hr = r * h.data
    an = x.data @ w_n.data + hr @ u_n.data + b_n.data
    n = np.tanh(an)
    hd = h.data
    y = (1.0 - z) * n + z * hd
    params = (w_zr, u_zr, b_zr, w_n, u_n, b_n)
    req = x.requires_grad or h.requires_grad or any(p.requires_grad for p in params)
    out = _make(y, req)
    if req:
        def fn(g, x=x, h=h, z=z, r=r, n=n, hr=hr):
            dn = g * (1.0 - z)
            dan = dn * (1.0 - n * n)
            dz = (g * (h.data - n)) * z * (1.0 - z)
            dhr = dan @ u_n.data.T
            dr = (dhr * h.data) * r * (1.0 - r)
            dzr = np.concatenate([dz, dr], axis=1)
            if w_n.requires_grad:
                w_n._accum(x.data.T @ dan)
            if u_n.requires_grad:
                u_n._accum(hr.T @ dan)
            if b_n.requires_grad:
                b_n._accum(dan.sum(axis=0))
            if w_zr.requires_grad:
                w_zr._accum(x.data.T @ dzr)
            if u_zr.requires_grad:
                u_zr._accum(h.data.T @ dzr)
            if b_zr.requires_grad:
                b_zr._accum(dzr.sum(axis=0))
            if x.requires_grad:
                x._accum(dan @ w_n.data.T + dzr @ w_zr.data.T)
            if h.requires_grad:
                h._accum(g * z + dhr * r + dzr @ u_zr.data.T)
        _record(out, fn)
    return out


def lstm_step(x: Tensor, h: Tensor, c: Tensor, w: Tensor, u: Tensor, b: Tensor):
    """One LSTM step (input/forget/candidate/output gate order in ``b``).

    Returns ``(h_new, c_new)``. Both outputs share one fused backward
    closure, replayed once all downstream gradients have arrived.
    """
    d = h.data.shape[-1]
    if c.data.shape != h.data.shape:
        raise ShapeError(f"lstm step state mismatch: h {h.shape}, c {c.shape}")
    if w.data.shape != (x.data.shape[-1], 4 * d):
        raise ShapeError(f"lstm step weight mismatch: w {w.shape} for x {x.shape}, h {h.shape}")
    gates = x.data @ w.data + h.data @ u.data + b.data
    i = _sig(gates[:, :d])
    f = _sig(gates[:, d:2 * d])
    gg = np.tanh(gates[:, 2 * d:3 * d])
    o = _sig(gates[:, 3 * d:])
    c_new = f * c.data + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc
    params = (w, u, b)
    req = (x.requires_grad or h.requires_grad or c.requires_grad
           or any(p.requires_grad for p in params))
    out_h = _make(h_new, req)
    out_c = _make(c_new, req)
    if req:
        def fn(gh, gc, x=x, h=h, c=c, i=i, f=f, gg=gg, o=o, tc=tc):
            if gh is None:
                gh = 0.0
            dc = (gc if gc is not None else 0.0) + gh * o * (1.0 - tc * tc)
            do = gh * tc * o * (1.0 - o)
            df = dc * c.data * f * (1.0 - f)
            di = dc * gg * i * (1.0 - i)
            dg = dc * i * (1.0 - gg * gg)
            dz = np.concatenate([di, df, dg, do], axis=1)
            if w.requires_grad:
                w._accum(x.data.T @ dz)
            if u.requires_grad:
                u._accum(h.data.T @ dz)
            if b.requires_grad:
                b._accum(dz.sum(axis=0))
            if x.requires_grad:
                x._accum(dz @ w.data.T)
            if h.requires_grad:
                h._accum(dz @ u.data.T)
            if c.requires_grad:
                c._accum(dc * f)
        _record((out_h, out_c), fn)
    return out_h, out_c


__all__ = [
    "DEFAULT_DTYPE", "Tensor", "Parameter", "Tape", "finite_checks",
    "add", "sub", "mul", "div", "neg", "power",
    "tanh", "sigmoid", "relu", "softplus", "exp", "log", "sqrt", "absolute",
    "softmax", "matmul", "tsum", "tmean", "reshape", "transpose", "getitem",
    "concat", "pad", "embedding", "dropout", "zoneout",
    "conv2d", "conv2d_nhwc", "gru_step", "lstm_step",
]
