"""Minimal reverse-mode automatic differentiation over numpy arrays.

Tensors are plain ``numpy.ndarray`` objects (float32 or float64). A
:class:`Tape` records every primitive applied to :class:`Var` handles that
depend on a trainable leaf; :meth:`Tape.backward` replays the record in
reverse and returns one gradient per leaf.

Complex quantities are carried as (real, imaginary) pairs of real Vars, so
every gradient in the engine is real-valued.

Example:
    >>> tape = Tape()
    >>> x = tape.var(np.array([1.0, 2.0]), requires_grad=True)
    >>> grads = tape.backward(sum_(x * x))
    >>> grads[x]
    array([2., 4.])
"""

from __future__ import annotations

import weakref
from typing import Callable, Sequence

import numpy as np


class TapeError(ValueError):
    """Raised when Vars are combined or differentiated incorrectly."""


class Var:
    """Handle to a value recorded on a tape."""

    __slots__ = ("value", "tape", "tape_id", "requires_grad", "__weakref__")
    __array_ufunc__ = None  # ndarray (op) Var defers to Var

    def __init__(self, value: np.ndarray, tape: "Tape", tape_id: int, requires_grad: bool):
        self.value = value
        self.tape = tape
        self.tape_id = tape_id
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Var(shape={self.shape}, id={self.tape_id}, requires_grad={self.requires_grad})"

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


class _Node:
    """Tape entry. Holds ids and shapes only, so a tape never references its Vars."""

    __slots__ = ("input_ids", "input_shapes", "input_live", "output_ids", "output_protos", "vjp")

    def __init__(self, inputs, outputs, vjp):
        self.input_ids = [i.tape_id for i in inputs]
        self.input_shapes = [i.shape for i in inputs]
        self.input_live = [i.requires_grad for i in inputs]
        self.output_ids = [o.tape_id for o in outputs]
        self.output_protos = [(o.shape, o.dtype) for o in outputs]
        self.vjp = vjp


class Tape:
    """Ordered record of primitive operations for one forward pass."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._leaves: list[weakref.ref] = []
        self._next_id = 0

    def __len__(self):
        return len(self._nodes)

    def _new(self, value: np.ndarray, requires_grad: bool) -> Var:
        v = Var(value, self, self._next_id, requires_grad)
        self._next_id += 1
        return v

    def var(self, value, requires_grad: bool = False, dtype=None) -> Var:
        """Register a leaf. Trainable leaves get an entry in every backward result."""
        arr = np.asarray(value, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        _check_finite(arr, "leaf")
        v = self._new(arr, requires_grad)
        if requires_grad:
            self._leaves.append(weakref.ref(v))
        return v

    def constant(self, value, dtype=None) -> Var:
        return self.var(value, requires_grad=False, dtype=dtype)

    def _record(self, inputs: Sequence[Var], values: Sequence[np.ndarray], vjp: Callable):
        for v in values:
            _check_finite(v, "output")
        track = any(i.requires_grad for i in inputs)
        outs = [self._new(v, track) for v in values]
        if track:
            self._nodes.append(_Node(list(inputs), outs, vjp))
        return outs

    def backward(self, root: Var) -> dict:
        """Reverse-mode sweep from a scalar root.

        Returns:
            dict mapping every trainable leaf of this tape to its gradient
            (zeros for leaves the root does not depend on).
        """
        if not isinstance(root, Var) or root.tape is not self:
            raise TapeError("root is not on this tape")
        if root.value.size != 1:
            raise TapeError(f"backward needs a scalar root, got shape {root.shape}")
        if not root.requires_grad:
            raise TapeError("root does not depend on any trainable leaf")
        grads: dict[int, np.ndarray] = {root.tape_id: np.ones_like(root.value)}
        for node in reversed(self._nodes):
            if not any(i in grads for i in node.output_ids):
                continue
            cots = [grads.pop(i, None) for i in node.output_ids]
            cots = [np.zeros(*p) if c is None else c for p, c in zip(node.output_protos, cots)]
            in_grads = node.vjp(*cots)
            for tid, shape, live, g in zip(node.input_ids, node.input_shapes, node.input_live, in_grads):
                if g is None or not live:
                    continue
                if g.shape != shape:
                    g = _unbroadcast(g, shape)
                prev = grads.get(tid)
                grads[tid] = g if prev is None else prev + g
        out = {}
        for ref in self._leaves:
            leaf = ref()
            if leaf is not None:
                out[leaf] = grads.get(leaf.tape_id, np.zeros_like(leaf.value))
        return out


def backward(root: Var) -> dict:
    """Gradient table of ``root`` with respect to the leaves of its tape."""
    if not isinstance(root, Var):
        raise TapeError("root must be a Var")
    return root.tape.backward(root)


def _check_finite(arr: np.ndarray, what: str):
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite value in {what}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _common_tape(items) -> Tape:
    tape = None
    for it in items:
        if isinstance(it, Var):
            if tape is None:
                tape = it.tape
            elif it.tape is not tape:
                raise TapeError("Vars from different tapes cannot be combined")
    if tape is None:
        raise TapeError("at least one operand must be a Var")
    return tape


def _lift(items):
    tape = _common_tape(items)
    out = []
    for it in items:
        if isinstance(it, Var):
            out.append(it)
        else:
            arr = np.asarray(it)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float64)
            out.append(tape._new(arr, False))
    return tape, out


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Var:
    tape, (a, b) = _lift([a, b])
    (out,) = tape._record([a, b], [a.value + b.value], lambda g: (g, g))
    return out


def sub(a, b) -> Var:
    tape, (a, b) = _lift([a, b])
    (out,) = tape._record([a, b], [a.value - b.value], lambda g: (g, -g))
    return out


def neg(a: Var) -> Var:
    (out,) = a.tape._record([a], [-a.value], lambda g: (-g,))
    return out


def mul(a, b) -> Var:
    """Elementwise product with numpy broadcasting (used for per-channel gates)."""
    tape, (a, b) = _lift([a, b])
    av, bv = a.value, b.value
    (out,) = tape._record([a, b], [av * bv], lambda g: (g * bv, g * av))
    return out


def div(a, b) -> Var:
    tape, (a, b) = _lift([a, b])
    av, bv = a.value, b.value
    q = av / bv
    (out,) = tape._record([a, b], [q], lambda g: (g / bv, -g * q / bv))
    return out


def log(a: Var) -> Var:
    if np.any(a.value <= 0):
        raise FloatingPointError("log of a non-positive value")
    av = a.value
    (out,) = a.tape._record([a], [np.log(av)], lambda g: (g / av,))
    return out


def abs_(a: Var) -> Var:
    sgn = np.sign(a.value)
    (out,) = a.tape._record([a], [np.abs(a.value)], lambda g: (g * sgn,))
    return out


def relu(a: Var) -> Var:
    mask = a.value > 0
    (out,) = a.tape._record([a], [np.where(mask, a.value, 0.0).astype(a.dtype)], lambda g: (g * mask,))
    return out


def sigmoid(a: Var) -> Var:
    s = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    (out,) = a.tape._record([a], [s], lambda g: (g * s * (1.0 - s),))
    return out


def soft_threshold(v: Var, theta) -> Var:
    """``sign(v) * max(|v| - theta, 0)`` with a scalar threshold.

    The subgradient at ``|v| == theta`` is taken as 0.
    """
    tape, (v, theta) = _lift([v, theta])
    if theta.value.size != 1:
        raise TapeError("theta must be a scalar")
    th = theta.value.reshape(())
    if th < 0:
        raise ValueError(f"negative threshold {float(th)}")
    vv = v.value
    active = np.abs(vv) > th
    sgn = np.sign(vv)
    out_v = np.where(active, vv - sgn * th, 0.0).astype(vv.dtype)

    th_shape = theta.shape

    def vjp(g):
        gv = g * active
        gt = -(gv * sgn).sum().reshape(th_shape)
        return gv, gt

    (out,) = tape._record([v, theta], [out_v], vjp)
    return out


def complex_abs(re: Var, im: Var, eps: float = 0.0) -> Var:
    """``max(sqrt(re**2 + im**2), eps)``; gradient is zero where clamped."""
    tape, (re, im) = _lift([re, im])
    m = np.sqrt(re.value**2 + im.value**2)
    live = m > eps
    safe = np.where(live, m, 1.0)
    cr = np.where(live, re.value / safe, 0.0)
    ci = np.where(live, im.value / safe, 0.0)
    (out,) = tape._record([re, im], [np.maximum(m, eps)], lambda g: (g * cr, g * ci))
    return out


# ---------------------------------------------------------------- reductions / shape


def sum_(a: Var, axis=None, keepdims: bool = False) -> Var:
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    (out,) = a.tape._record([a], [np.asarray(a.value.sum(axis=axis, keepdims=keepdims))], vjp)
    return out


def mean(a: Var, axis=None, keepdims: bool = False) -> Var:
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), np.asarray(1.0 / n, dtype=a.dtype))


def reshape(a: Var, shape) -> Var:
    old = a.shape
    (out,) = a.tape._record([a], [a.value.reshape(shape)], lambda g: (g.reshape(old),))
    return out


def concat_channels(items: Sequence[Var]) -> Var:
    """Concatenate along axis 1 of (B, C, H, W) tensors."""
    tape, items = _lift(list(items))
    sizes = np.cumsum([it.shape[1] for it in items])[:-1]
    (out,) = tape._record(
        items,
        [np.concatenate([it.value for it in items], axis=1)],
        lambda g: tuple(np.split(g, sizes, axis=1)),
    )
    return out


def slice_channels(a: Var, start: int, stop: int) -> Var:
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    (out,) = a.tape._record([a], [a.value[:, start:stop]], vjp)
    return out


def global_avg_pool(a: Var) -> Var:
    """(B, C, H, W) -> (B, C) spatial mean."""
    return mean(a, axis=(2, 3))


def global_max_pool(a: Var) -> Var:
    """(B, C, H, W) -> (B, C) spatial max; ties route gradient to the first index."""
    b, c, h, w = shape = a.shape
    flat = a.value.reshape(b, c, h * w)
    idx = flat.argmax(axis=2)
    vals = np.take_along_axis(flat, idx[..., None], axis=2)[..., 0]

    def vjp(g):
        full = np.zeros_like(flat)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=2)
        return (full.reshape(shape),)

    (out,) = a.tape._record([a], [vals], vjp)
    return out


def channel_mean(a: Var) -> Var:
    """(B, C, H, W) -> (B, 1, H, W)."""
    return mean(a, axis=1, keepdims=True)


def channel_max(a: Var) -> Var:
    """(B, C, H, W) -> (B, 1, H, W); ties route gradient to the lowest channel."""
    av = a.value
    idx = av.argmax(axis=1)[:, None]
    vals = np.take_along_axis(av, idx, axis=1)

    def vjp(g):
        full = np.zeros_like(av)
        np.put_along_axis(full, idx, g, axis=1)
        return (full,)

    (out,) = a.tape._record([a], [vals], vjp)
    return out


# ---------------------------------------------------------------- linear layers


def dense(x: Var, weight: Var, bias: Var | None = None) -> Var:
    """Fully connected layer: (B, in) @ weight(out, in).T + bias(out)."""
    ins = [x, weight] + ([bias] if bias is not None else [])
    tape, ins = _lift(ins)
    xv, wv = ins[0].value, ins[1].value
    y = xv @ wv.T
    if bias is not None:
        y = y + ins[2].value

    has_bias = bias is not None

    def vjp(g):
        grads = [g @ wv, g.T @ xv]
        if has_bias:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    (out,) = tape._record(ins, [y], vjp)
    return out


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(B, C, H, W) -> (C*kh*kw, B*H*W) column matrix for zero 'same' padding."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2))).transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, b, h, w), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(c * kh * kw, b * h * w)


def _correlate_same(x: np.ndarray, k: np.ndarray, cols: np.ndarray | None = None) -> np.ndarray:
    """Zero-padded 'same' cross-correlation of (B, C, H, W) with (O, C, kh, kw)."""
    o, c, kh, kw = k.shape
    b, _, h, w = x.shape
    if cols is None:
        cols = x.transpose(1, 0, 2, 3).reshape(c, -1) if kh == kw == 1 else _im2col(x, kh, kw)
    out = k.reshape(o, -1) @ cols
    return out.reshape(o, b, h, w).transpose(1, 0, 2, 3)


def conv2d(x: Var, kernel: Var, bias: Var | None = None) -> Var:
    """2D cross-correlation with zero 'same' padding.

    Args:
        x: (C_in, H, W) or (B, C_in, H, W).
        kernel: (C_out, C_in, kh, kw) with odd kh, kw.
        bias: optional (C_out,).
    """
    ins = [x, kernel] + ([bias] if bias is not None else [])
    tape, ins = _lift(ins)
    xv, kv = ins[0].value, ins[1].value
    if kv.ndim != 4:
        raise ValueError(f"kernel must be 4-D, got shape {kv.shape}")
    o, c, kh, kw = kv.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("kernel extents must be odd")
    unbatched = xv.ndim == 3
    xb = xv[None] if unbatched else xv
    if xb.ndim != 4 or xb.shape[1] != c:
        raise ValueError(f"input shape {xv.shape} does not match kernel {kv.shape}")
    if bias is not None and ins[2].shape != (o,):
        raise ValueError(f"bias shape {ins[2].shape} != ({o},)")
    cols = xb.transpose(1, 0, 2, 3).reshape(c, -1) if kh == kw == 1 else _im2col(xb, kh, kw)
    y = _correlate_same(xb, kv, cols)
    has_bias = bias is not None
    if has_bias:
        y = y + ins[2].value[None, :, None, None]

    def vjp(g):
        gb = g[None] if unbatched else g
        gx = _correlate_same(gb, kv[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gk = (gb.transpose(1, 0, 2, 3).reshape(o, -1) @ cols.T).reshape(kv.shape)
        grads = [gx[0] if unbatched else gx, gk]
        if has_bias:
            grads.append(gb.sum(axis=(0, 2, 3)))
        return tuple(grads)

    (out,) = tape._record(ins, [y[0] if unbatched else y], vjp)
    return out


# ---------------------------------------------------------------- fourier


def _check_pow2(shape):
    h, w = shape[-2:]
    for s in (h, w):
        if s < 1 or s & (s - 1):
            raise ValueError(f"FFT extents must be powers of two, got {h}x{w}")


def _fft_pair(re, im, inverse: bool):
    tape, (re, im) = _lift([re, im])
    if re.shape != im.shape:
        raise ValueError("real and imaginary parts differ in shape")
    _check_pow2(re.shape)
    fwd = np.fft.ifft2 if inverse else np.fft.fft2
    bwd = np.fft.fft2 if inverse else np.fft.ifft2
    z = fwd(re.value + 1j * im.value, norm="ortho")
    dtype = re.dtype

    def vjp(gr, gi):
        w = bwd(gr + 1j * gi, norm="ortho")
        return w.real.astype(dtype), w.imag.astype(dtype)

    return tuple(tape._record([re, im], [z.real.astype(dtype), z.imag.astype(dtype)], vjp))


def fft2c(re, im) -> tuple[Var, Var]:
    """Unitary 2D DFT over the last two axes of a (real, imag) pair."""
    return _fft_pair(re, im, inverse=False)


def ifft2c(re, im) -> tuple[Var, Var]:
    """Inverse of :func:`fft2c`."""
    return _fft_pair(re, im, inverse=True)
