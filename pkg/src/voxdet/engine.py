"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps one float64 numpy array. While a Tape is active, every op
that touches a tracked tensor appends a record holding a backward closure;
Tape.backward walks the records in reverse and accumulates gradients into
the leaf tensors' .grad buffers. With no tape active the ops are plain
eager numpy, which is what inference uses.

The op set is exactly what the detector needs: elementwise arithmetic,
linear layers, ReLU, sigmoid, softplus, reductions, smooth L1, rigid and
offset-guided 2D convolution, and bilinear sampling. 64-bit floats
throughout so finite-difference checks can run tight tolerances.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Sequence

import numpy as np


class Tensor:
    """A shaped float64 buffer, optionally accumulating a gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_tracked")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tracked = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # convenience arithmetic; scalars and arrays promote to constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float64))


class _Record:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs: Sequence[Tensor], output: Tensor,
                 backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.inputs = tuple(inputs)
        self.output = output
        self.backward = backward


_STATE = threading.local()


def _tape_stack() -> list:
    if not hasattr(_STATE, "stack"):
        _STATE.stack = []
    return _STATE.stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations; context manager scopes what gets recorded."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tape_stack().pop()
        assert popped is self

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(leaf) into every requires_grad leaf on this tape."""
        grads: dict[int, np.ndarray] = {}
        if seed is None:
            seed = np.ones_like(loss.data)
        grads[id(loss)] = np.asarray(seed, dtype=np.float64).reshape(loss.data.shape)
        for rec in reversed(self.records):
            gout = grads.pop(id(rec.output), None)
            if gout is None:
                continue
            gins = rec.backward(gout)
            for t, g in zip(rec.inputs, gins):
                if g is None or not (t._tracked or t.requires_grad):
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        # anything left in the map is a leaf; push into .grad buffers
        by_id = {id(t): t for rec in self.records for t in rec.inputs}
        by_id[id(loss)] = loss
        for key, g in grads.items():
            t = by_id.get(key)
            if t is not None and t.requires_grad:
                t.accumulate_grad(g)


def _record(inputs: Sequence[Tensor], out_data: np.ndarray, backward) -> Tensor:
    """Create the output tensor and, if a tape is live and cares, record it."""
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t._tracked or t.requires_grad for t in inputs):
        out._tracked = True
        tape.records.append(_Record(inputs, out, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record([a, b], out, backward)


def neg(a: Tensor) -> Tensor:
    return _record([a], -a.data, lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _record([a, b], out, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _record([a, b], out, backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Fully connected layer: rows of x against weight (out_features, in_features)."""
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=tuple(range(g.ndim - 1)))

    return _record([x, weight, bias], out, backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record([a], np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        return (g * out * (1.0 - out),)

    return _record([a], out, backward)


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed stably; its derivative is sigmoid(x)."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return (g * s,)

    return _record([a], out, backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record([a], out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _record([a], np.log(a.data), lambda g: (g / a.data,))


def pow_const(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    return _record([a], out, lambda g: (g * p * a.data ** (p - 1.0),))


def sqrt(a: Tensor) -> Tensor:
    """Elementwise square root with the gradient at 0 defined as 0.

    The zero convention keeps sqrt-of-sum-of-squares norms differentiable
    where both operands coincide; the true one-sided derivative diverges.
    """
    out = np.sqrt(a.data)
    pos = out > 0.0
    safe = np.where(pos, out, 1.0)
    return _record([a], out, lambda g: (g * np.where(pos, 0.5 / safe, 0.0),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.data.shape
    return _record([a], a.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return _record([a], np.transpose(a.data, axes).copy(),
                   lambda g: (np.transpose(g, inverse).copy(),))


def tsum(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g_expanded = np.expand_dims(g, axis)
        return (np.broadcast_to(g_expanded, a.data.shape).copy(),)

    return _record([a], out, backward)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = a.data.mean()
    return _record([a], out, lambda g: (np.broadcast_to(g / n, a.data.shape).copy(),))


def smooth_l1(a: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise smooth L1: quadratic inside |x| < beta, linear outside."""
    x = a.data
    absx = np.abs(x)
    out = np.where(absx < beta, 0.5 * x * x / beta, absx - 0.5 * beta)

    def backward(g):
        return (g * np.where(absx < beta, x / beta, np.sign(x)),)

    return _record([a], out, backward)


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix (C*kh*kw, ho*wo) from an already-padded (C, Hp, Wp) input."""
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride][:, :ho, :wo]
    return windows.transpose(0, 3, 4, 1, 2).reshape(xp.shape[0] * kh * kw, ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a (C_in, H, W) map with (C_out, C_in, kH, kW) filters."""
    c_in, h, w = x.data.shape
    c_out, c_in2, kh, kw = weight.data.shape
    if c_in != c_in2:
        raise ValueError(f"conv2d channel mismatch: input {c_in}, weight {c_in2}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d output would be empty for input {x.data.shape}, kernel {(kh, kw)}")
    xp = np.zeros((c_in, h + 2 * padding, w + 2 * padding))
    xp[:, padding:padding + h, padding:padding + w] = x.data
    patches = _im2col(xp, kh, kw, stride, ho, wo)
    w_mat = weight.data.reshape(c_out, -1)
    out = w_mat @ patches
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(c_out, ho, wo)

    def backward(g):
        g_mat = g.reshape(c_out, -1)
        d_w = (g_mat @ patches.T).reshape(weight.data.shape)
        d_patches = w_mat.T @ g_mat
        d_xp = np.zeros_like(xp)
        dp = d_patches.reshape(c_in, kh, kw, ho, wo)
        for ky in range(kh):
            for kx in range(kw):
                d_xp[:, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride] += dp[:, ky, kx]
        d_x = d_xp[:, padding:padding + h, padding:padding + w]
        if bias is None:
            return d_x, d_w
        return d_x, d_w, g_mat.sum(axis=1)

    inputs = [x, weight] if bias is None else [x, weight, bias]
    return _record(inputs, out, backward)


def _bilinear_gather(x: np.ndarray, ys: np.ndarray, xs: np.ndarray):
    """Sample (C, H, W) at fractional coords, zero outside; returns values and
    the pieces backward needs."""
    c, h, w = x.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy1 = ys - y0
    wx1 = xs - x0
    wy0 = 1.0 - wy1
    wx0 = 1.0 - wx1
    corners = []
    for yy, wy in ((y0, wy0), (y0 + 1, wy1)):
        for xx, wx in ((x0, wx0), (x0 + 1, wx1)):
            valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            yc = np.clip(yy, 0, h - 1)
            xc = np.clip(xx, 0, w - 1)
            vals = x[:, yc, xc] * valid
            corners.append((vals, wy * wx, yc, xc, valid, wy, wx))
    sampled = sum(vals * wgt for vals, wgt, *_ in corners)
    return sampled, corners, (y0, x0, wy0, wy1, wx0, wx1)


def bilinear_sample(x: Tensor, xs: float, ys: float) -> Tensor:
    """Per-channel bilinear read of a (C, H, W) map at one continuous point.

    Zero padding outside the pixel grid; differentiable in the map values.
    """
    ys_a = np.asarray([float(ys)])
    xs_a = np.asarray([float(xs)])
    sampled, corners, _ = _bilinear_gather(x.data, ys_a, xs_a)
    out = sampled[:, 0]

    def backward(g):
        d_x = np.zeros_like(x.data)
        for vals, wgt, yc, xc, valid, _, _ in corners:
            contrib = g[:, None] * (wgt * valid)
            np.add.at(d_x, (slice(None), yc, xc), contrib)
        return (d_x,)

    return _record([x], out, backward)


def deform_conv2d(x: Tensor, weight: Tensor, offsets: Tensor,
                  bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Convolution whose kernel taps sample at grid + learned offset.

    `offsets` is (2*kH*kW, H_out, W_out): channel 2n is the y shift and
    channel 2n+1 the x shift of tap n, in pixels. Sampling is bilinear with
    zero padding, so zero offsets reproduce conv2d exactly.
    """
    c_in, h, w = x.data.shape
    c_out, c_in2, kh, kw = weight.data.shape
    if c_in != c_in2:
        raise ValueError(f"deform_conv2d channel mismatch: input {c_in}, weight {c_in2}")
    n = kh * kw
    if offsets.data.shape[0] != 2 * n:
        raise ValueError(f"expected {2 * n} offset channels, got {offsets.data.shape[0]}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if offsets.data.shape[1:] != (ho, wo):
        raise ValueError(f"offset spatial shape {offsets.data.shape[1:]} != output {(ho, wo)}")

    oy, ox = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    taps_y = np.repeat(np.arange(kh), kw)
    taps_x = np.tile(np.arange(kw), kh)
    # (N, ho, wo) absolute sampling coordinates
    ys = (oy[None] * stride + taps_y[:, None, None] - padding) + offsets.data[0::2]
    xs = (ox[None] * stride + taps_x[:, None, None] - padding) + offsets.data[1::2]
    sampled, corners, frac = _bilinear_gather(x.data, ys, xs)  # (C_in, N, ho, wo)
    s_mat = sampled.reshape(c_in * n, ho * wo)
    w_mat = weight.data.reshape(c_out, -1)
    out = w_mat @ s_mat
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(c_out, ho, wo)

    def backward(g):
        g_mat = g.reshape(c_out, -1)
        d_w = (g_mat @ s_mat.T).reshape(weight.data.shape)
        d_sampled = (w_mat.T @ g_mat).reshape(c_in, n, ho, wo)
        d_x = np.zeros_like(x.data)
        corner_vals = {}
        for key, (vals, wgt, yc, xc, valid, wy, wx) in zip(("00", "01", "10", "11"), corners):
            contrib = d_sampled * (wgt * valid)
            np.add.at(d_x, (slice(None), yc, xc), contrib)
            corner_vals[key] = vals
        _, _, wy0, wy1, wx0, wx1 = frac
        v00, v01, v10, v11 = (corner_vals[k] for k in ("00", "01", "10", "11"))
        ds_dy = (v10 - v00) * wx0 + (v11 - v01) * wx1
        ds_dx = (v01 - v00) * wy0 + (v11 - v10) * wy1
        d_off = np.zeros_like(offsets.data)
        d_off[0::2] = (d_sampled * ds_dy).sum(axis=0)
        d_off[1::2] = (d_sampled * ds_dx).sum(axis=0)
        if bias is None:
            return d_x, d_w, d_off
        return d_x, d_w, d_off, g_mat.sum(axis=1)

    inputs = [x, weight, offsets] if bias is None else [x, weight, offsets, bias]
    return _record(inputs, out, backward)


# ---------------------------------------------------------------------------
# verification harness


def gradient_check(f: Callable[..., Tensor], inputs: Sequence[Tensor],
                   eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    Relative error divides by max(1, |analytic|, |numeric|) so tiny gradients
    are compared absolutely.
    """
    for t in inputs:
        t.zero_grad()
    with Tape() as tape:
        out = f(*inputs)
        if out.data.size != 1:
            raise ValueError("gradient_check needs a scalar-valued function")
        tape.backward(out)
    if not np.isfinite(out.data).all():
        raise FloatingPointError("non-finite forward value")
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.isfinite(analytic).all():
            raise FloatingPointError("non-finite analytic gradient")
        flat = t.data.reshape(-1)
        a_flat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(*inputs).data.item()
            flat[i] = orig - eps
            fm = f(*inputs).data.item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            if not np.isfinite(numeric):
                raise FloatingPointError("non-finite numeric gradient")
            denom = max(1.0, abs(a_flat[i]), abs(numeric))
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
    return worst


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"VDCK"
_CKPT_VERSION = 1


def save_checkpoint(path, params: dict[str, Tensor | np.ndarray]) -> None:
    """Write named float64 arrays with a version header; byte-stable ordering."""
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<II", _CKPT_VERSION, len(params)))
        for name in sorted(params):
            arr = params[name]
            data = arr.data if isinstance(arr, Tensor) else np.asarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}q", *data.shape))
            f.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}q", raw, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += 8 * n
        out[name] = arr.astype(np.float64)
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return out
