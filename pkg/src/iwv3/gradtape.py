"""Dense tensor engine with recorded reverse-mode differentiation.

A Tape records every operation applied to tensors attached to it; backward()
replays the recording once to produce gradients for named parameters and for
inputs flagged as differentiable.  Tensors without a tape evaluate eagerly,
so the same network code serves both training and plain inference.

Values are float64 throughout; weight files store float32 little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import ndtr as _ndtr

# Raw affine scales are clamped before exponentiation so that e^raw stays in
# a numerically invertible band; positivity is preserved for all weights.
RAW_SCALE_LIMIT = 1.0

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tape:
    """A single-use recording of tensor operations."""

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def leaf(self, values, name=None, requires_grad=False) -> "Tensor":
        t = Tensor(values, tape=self, name=name, requires_grad=requires_grad)
        return t

    def params(self, weights: "ModelWeights") -> dict:
        """Differentiable named leaves for every weight entry."""
        return {n: self.leaf(v, name=n, requires_grad=True) for n, v in weights.items()}

    def _record(self, tensor):
        self._nodes.append(tensor)

    def backward(self, loss: "Tensor") -> dict:
        """Gradients of a scalar loss wrt named/differentiable leaves.

        Returns {name: gradient array} for named leaves; every differentiable
        leaf also gets its gradient stored on `.grad`.  A tape can only be
        walked once.
        """
        if self._consumed:
            raise ValueError("recording consumed twice")
        if loss.tape is not self:
            raise ValueError("loss does not belong to this recording")
        if loss.data.shape != ():
            raise ValueError("loss must be scalar")
        self._consumed = True
        grads = {id(loss): np.ones((), dtype=np.float64)}
        out = {}
        for node in reversed(self._nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._parents:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            else:
                if node.requires_grad:
                    node.grad = g
                    if node.name is not None:
                        out[node.name] = g
        self._nodes = []
        return out


class Tensor:
    """N-d float64 value, optionally attached to a recording."""

    __slots__ = ("data", "tape", "name", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, values, tape=None, name=None, requires_grad=False,
                 parents=(), backward=None):
        self.data = np.asarray(values, dtype=np.float64)
        self.tape = tape
        self.name = name
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = parents
        self._backward = backward
        if tape is not None:
            tape._record(self)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, tape={self.tape is not None})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result_tape(*tensors):
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise ValueError("tensors belong to different recordings")
            tape = t.tape
    return tape


def _make(data, parents, backward):
    tape = _result_tape(*parents)
    if tape is None:
        return Tensor(data)
    return Tensor(data, tape=tape, parents=parents, backward=backward)


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# Elementwise and reduction ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a, s: float) -> Tensor:
    a = _wrap(a)
    s = float(s)
    return _make(a.data * s, (a,), lambda g: (g * s,))


def smul(a, s) -> Tensor:
    """Multiply a tensor by a scalar tensor (the one broadcast we allow)."""
    a, s = _wrap(a), _wrap(s)
    if s.data.shape != ():
        raise ValueError("smul: second operand must be scalar")
    return _make(a.data * s.data,
                 (a, s),
                 lambda g: (g * s.data, np.asarray(np.sum(g * a.data))))


def relu(a) -> Tensor:
    a = _wrap(a)
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),))


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _wrap(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * (0.5 / out),))


def reciprocal(a) -> Tensor:
    a = _wrap(a)
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,))


def ndtr(a) -> Tensor:
    """Standard normal CDF; gradient is the normal pdf."""
    a = _wrap(a)
    return _make(_ndtr(a.data), (a,),
                 lambda g: (g * _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data),))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _wrap(a)
    inside = (a.data > lo) & (a.data < hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def floor_const(a) -> Tensor:
    """Elementwise floor treated as a constant (zero gradient)."""
    a = _wrap(a)
    return _make(np.floor(a.data), (a,), lambda g: (np.zeros_like(a.data),))


def tsum(a) -> Tensor:
    a = _wrap(a)
    return _make(np.asarray(np.sum(a.data)), (a,),
                 lambda g: (np.full(a.data.shape, float(g)),))


def tmean(a) -> Tensor:
    a = _wrap(a)
    n = a.data.size
    return _make(np.asarray(np.mean(a.data)), (a,),
                 lambda g: (np.full(a.data.shape, float(g) / n),))


# ---------------------------------------------------------------------------
# Structural ops
# ---------------------------------------------------------------------------

def take_even(a, axis: int) -> Tensor:
    a = _wrap(a)

    def back(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.data.ndim
        sl[axis] = slice(0, None, 2)
        full[tuple(sl)] = g
        return (full,)

    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(0, None, 2)
    return _make(a.data[tuple(sl)].copy(), (a,), back)


def take_odd(a, axis: int) -> Tensor:
    a = _wrap(a)

    def back(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.data.ndim
        sl[axis] = slice(1, None, 2)
        full[tuple(sl)] = g
        return (full,)

    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(1, None, 2)
    return _make(a.data[tuple(sl)].copy(), (a,), back)


def interleave(even, odd, axis: int) -> Tensor:
    even, odd = _wrap(even), _wrap(odd)
    _check_same_shape(even, odd, "interleave")
    shape = list(even.data.shape)
    shape[axis] *= 2
    out = np.zeros(shape, dtype=np.float64)
    sl_e = [slice(None)] * len(shape)
    sl_o = [slice(None)] * len(shape)
    sl_e[axis] = slice(0, None, 2)
    sl_o[axis] = slice(1, None, 2)
    out[tuple(sl_e)] = even.data
    out[tuple(sl_o)] = odd.data

    def back(g):
        return (g[tuple(sl_e)].copy(), g[tuple(sl_o)].copy())

    return _make(out, (even, odd), back)


def concat_channels(parts) -> Tensor:
    parts = [_wrap(p) for p in parts]
    widths = [p.data.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)

    def back(g):
        grads, at = [], 0
        for w in widths:
            grads.append(g[:, at : at + w].copy())
            at += w
        return tuple(grads)

    return _make(out, tuple(parts), back)


def slice_channels(a, lo: int, hi: int) -> Tensor:
    a = _wrap(a)

    def back(g):
        full = np.zeros_like(a.data)
        full[:, lo:hi] = g
        return (full,)

    return _make(a.data[:, lo:hi].copy(), (a,), back)


# ---------------------------------------------------------------------------
# Convolution (stride 1, zero padding preserving H x W, odd kernels)
# ---------------------------------------------------------------------------

def _conv2d_raw(x, w, b):
    kh, kw = w.shape[2], w.shape[3]
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = np.tensordot(win, w, axes=[(1, 4, 5), (1, 2, 3)])
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if b is not None:
        out += b[None, :, None, None]
    return out


def conv2d(x, w, b=None) -> Tensor:
    """2D convolution: x (N,C,H,W) with w (O,C,kh,kw) and optional bias (O,)."""
    x, w = _wrap(x), _wrap(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d: expected 4-d input and weight")
    if x.data.shape[1] != w.data.shape[1]:
        raise ValueError(
            f"conv2d: channel mismatch {x.data.shape[1]} vs {w.data.shape[1]}")
    if w.data.shape[2] % 2 == 0 or w.data.shape[3] % 2 == 0:
        raise ValueError("conv2d: kernel dims must be odd")
    parents = (x, w) if b is None else (x, w, _wrap(b))
    bdata = None if b is None else parents[2].data
    out = _conv2d_raw(x.data, w.data, bdata)
    kh, kw = w.data.shape[2], w.data.shape[3]
    ph, pw = kh // 2, kw // 2

    def back(g):
        wflip = w.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
        dx = _conv2d_raw(g, np.ascontiguousarray(wflip), None)
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
        dw = np.tensordot(g, win, axes=[(0, 2, 3), (0, 2, 3)])
        if bdata is None:
            return (dx, dw)
        return (dx, dw, g.sum(axis=(0, 2, 3)))

    return _make(out, parents, back)


_OP_TABLE = {
    "conv2d": conv2d,
    "relu": relu,
    "add": add,
    "sub": sub,
    "mul": mul,
    "exp": exp,
    "tanh": tanh,
    "scale-by-scalar": scale,
    "sum": tsum,
    "mean": tmean,
}


def op_apply(kind: str, inputs) -> Tensor:
    """Apply a named operation to a list of inputs."""
    fn = _OP_TABLE.get(kind)
    if fn is None:
        raise ValueError(f"unknown op {kind!r}")
    return fn(*inputs)


def backward(tape: Tape, loss: Tensor) -> dict:
    return tape.backward(loss)


# ---------------------------------------------------------------------------
# Named weight store and on-disk format
# ---------------------------------------------------------------------------

WEIGHTS_MAGIC = b"IWTW"
WEIGHTS_VERSION = 1


class ModelWeights:
    """Ordered store of named float tensors."""

    def __init__(self):
        self._entries: dict[str, np.ndarray] = {}

    def add(self, name: str, values) -> None:
        if name in self._entries:
            raise ValueError(f"duplicate name {name!r}")
        self._entries[name] = np.asarray(values, dtype=np.float64)

    def get(self, name: str) -> np.ndarray:
        return self._entries[name]

    def set(self, name: str, values) -> None:
        if name not in self._entries:
            raise KeyError(name)
        arr = np.asarray(values, dtype=np.float64)
        if arr.shape != self._entries[name].shape:
            raise ValueError(f"shape mismatch for {name!r}")
        self._entries[name] = arr

    def __contains__(self, name):
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def copy(self) -> "ModelWeights":
        dup = ModelWeights()
        for name, values in self._entries.items():
            dup.add(name, values.copy())
        return dup


def save_weights(weights: ModelWeights) -> bytes:
    out = bytearray()
    out += WEIGHTS_MAGIC
    out += struct.pack("<B", WEIGHTS_VERSION)
    out += struct.pack("<I", len(weights))
    for name, values in weights.items():
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded))
        out += encoded
        out += struct.pack("<B", values.ndim)
        for dim in values.shape:
            out += struct.pack("<I", dim)
        out += values.astype("<f4").tobytes()
    return bytes(out)


def load_weights(data: bytes) -> ModelWeights:
    if data[:4] != WEIGHTS_MAGIC:
        raise ValueError("bad magic in weights file")
    pos = 4
    (version,) = struct.unpack_from("<B", data, pos)
    pos += 1
    if version != WEIGHTS_VERSION:
        raise ValueError(f"unsupported weights version {version}")
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    weights = ModelWeights()
    for _ in range(count):
        if pos + 2 > len(data):
            raise ValueError("truncated tensor header")
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        if pos + 1 > len(data):
            raise ValueError("truncated tensor header")
        (rank,) = struct.unpack_from("<B", data, pos)
        pos += 1
        if pos + 4 * rank > len(data):
            raise ValueError("truncated tensor dims")
        dims = struct.unpack_from(f"<{rank}I", data, pos) if rank else ()
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        payload = data[pos : pos + 4 * n]
        if len(payload) < 4 * n:
            raise ValueError(f"truncated tensor payload for {name!r}")
        pos += 4 * n
        values = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(dims)
        if name in weights:
            raise ValueError(f"duplicate name {name!r}")
        weights.add(name, values)
    return weights


# ---------------------------------------------------------------------------
# Predict/update networks for the lifting transform
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PUNet:
    """3-layer conv net computing a lifting prediction or update.

    additive: 1 -> 16 -> 16 -> 1, linear final layer, output is the shift.
    affine:   shared 1 -> 16 -> 16 trunk with two 16 -> 1 heads; the raw
              scale head is exponentiated so the scale is strictly positive.
    """

    kind: str
    prefix: str
    channels: int = 16

    def weight_shapes(self):
        c = self.channels
        shapes = {
            f"{self.prefix}.c1.w": (c, 1, 3, 3),
            f"{self.prefix}.c1.b": (c,),
            f"{self.prefix}.c2.w": (c, c, 3, 3),
            f"{self.prefix}.c2.b": (c,),
        }
        if self.kind == "additive":
            shapes[f"{self.prefix}.c3.w"] = (1, c, 3, 3)
            shapes[f"{self.prefix}.c3.b"] = (1,)
        elif self.kind == "affine":
            shapes[f"{self.prefix}.hs.w"] = (1, c, 3, 3)
            shapes[f"{self.prefix}.hs.b"] = (1,)
            shapes[f"{self.prefix}.hr.w"] = (1, c, 3, 3)
            shapes[f"{self.prefix}.hr.b"] = (1,)
        else:
            raise ValueError(f"unknown lifting kind {self.kind!r}")
        return shapes


def pu_forward(net: PUNet, params, x):
    """Run a P/U net on a 1-channel plane; returns (shift, scale or None)."""
    p = net.prefix
    try:
        t = relu(conv2d(x, params[f"{p}.c1.w"], params[f"{p}.c1.b"]))
        t = relu(conv2d(t, params[f"{p}.c2.w"], params[f"{p}.c2.b"]))
        if net.kind == "additive":
            return conv2d(t, params[f"{p}.c3.w"], params[f"{p}.c3.b"]), None
        shift = conv2d(t, params[f"{p}.hs.w"], params[f"{p}.hs.b"])
        raw = conv2d(t, params[f"{p}.hr.w"], params[f"{p}.hr.b"])
        return shift, exp(clamp(raw, -RAW_SCALE_LIMIT, RAW_SCALE_LIMIT))
    except KeyError as missing:
        raise ValueError(f"kind/weight mismatch: missing {missing}") from None


def constant_params(weights: ModelWeights) -> dict:
    """Weight tensors detached from any recording (plain inference)."""
    return {name: Tensor(values) for name, values in weights.items()}
