"""Minimal tape-based reverse-mode differentiation over numpy arrays.

Every forward op is recorded on the active :class:`Tape` when at least one of
its inputs requires a gradient.  Outside a tape, ops run in inference mode and
record nothing, which is what the tracking loop uses.

    >>> x = Tensor(np.arange(3.0), requires_grad=True)
    >>> with Tape() as tape:
    ...     y = sum_all(mul(x, x))
    >>> tape.backward(y)
    >>> x.grad
    array([0., 2., 4.])
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

COSINE_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names the offending dimension."""

    def __init__(self, op: str, dim: str, detail: str):
        self.op = op
        self.dim = dim
        super().__init__(f"{op}: bad {dim}: {detail}")


class TapeError(RuntimeError):
    pass


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError("Tensor", "shape", f"extents must be positive, got {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", "size", f"expected a scalar, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_local = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of one forward pass; replayed backwards exactly once."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self.visit_log: list[int] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward_fn: Callable) -> None:
        if self.consumed:
            raise TapeError("tape already replayed; start a new tape for a new forward pass")
        self.nodes.append(_Node(tuple(inputs), output, backward_fn))

    def backward(self, root: Tensor) -> None:
        """Populate ``.grad`` on every reachable leaf that requires a gradient."""
        if self.consumed:
            raise TapeError("backward already ran on this tape")
        if root.data.size != 1:
            raise ShapeError("backward", "root", f"root must be scalar, got shape {root.shape}")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        produced = {id(node.output) for node in self.nodes}
        for idx in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[idx]
            g_out = grads.pop(id(node.output), None)
            self.visit_log.append(idx)
            if g_out is None:
                continue
            g_ins = node.backward_fn(g_out)
            for inp, g in zip(node.inputs, g_ins):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        # whatever remains belongs to leaves (tensors not produced on this tape)
        seen: set[int] = set()
        for node in self.nodes:
            for inp in node.inputs:
                key = id(inp)
                if key in seen or key in produced or not inp.requires_grad:
                    continue
                seen.add(key)
                g = grads.get(key)
                if g is None:
                    continue
                inp.grad = g.copy() if inp.grad is None else inp.grad + g


def _emit(inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = ""
    tape = _active_tape() if needs else None
    out.requires_grad = tape is not None
    if tape is not None:
        tape.record(inputs, out, backward_fn)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_axis(op: str, axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(op, "axis", f"axis {axis} out of range for {ndim}-d input")
    return axis % ndim


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _emit((a, b), out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _emit((a, b), out, lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _emit(
        (a, b),
        out,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit((a,), a.data * c, lambda g: (g * c,))


def shift(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit((a,), a.data + c, lambda g: (g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit((a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def max_with_constant(a: Tensor, m: float) -> Tensor:
    """Elementwise ``max(m, a)``; the constant branch carries zero subgradient."""
    mask = a.data > m
    return _emit((a,), np.where(mask, a.data, float(m)), lambda g: (g * mask,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)
    return _emit((a,), np.clip(a.data, lo, hi), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit((a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _emit((a,), np.log(a.data), lambda g: (g / a.data,))


def smooth_l1(a: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style smooth L1 with transition at ``beta``."""
    x = a.data
    ax = np.abs(x)
    small = ax < beta
    out = np.where(small, 0.5 * x * x / beta, ax - 0.5 * beta)
    return _emit((a,), out, lambda g: (g * np.where(small, x / beta, np.sign(x)),))


# ---------------------------------------------------------------- reductions / shape


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit((a,), np.array(a.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_axis(a: Tensor, axis: int) -> Tensor:
    axis = _check_axis("sum_axis", axis, a.data.ndim)
    shape = a.shape
    out = a.data.sum(axis=axis)
    return _emit((a,), out, lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _emit((a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def take(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing; gradient scatters back with accumulation."""
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _emit((a,), np.asarray(a.data[index]), back)


def l2_norm(a: Tensor) -> Tensor:
    """Euclidean norm of all entries; subgradient 0 at the origin."""
    n = float(np.sqrt(np.sum(a.data * a.data)))

    def back(g):
        if n == 0.0:
            return (np.zeros_like(a.data),)
        return (g * a.data / n,)

    return _emit((a,), np.array(n), back)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis("softmax", axis, a.data.ndim)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _emit((a,), s, back)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis("log_softmax", axis, a.data.ndim)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def back(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _emit((a,), out, back)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """``<a,b> / (|a||b| + 1e-12)`` over flattened inputs.

    When both norms fall below 1e-12 the result is 0 with zero gradient.
    """
    if a.size != b.size:
        raise ShapeError("cosine_similarity", "length", f"{a.size} != {b.size}")
    x = a.data.reshape(-1)
    y = b.data.reshape(-1)
    na = float(np.sqrt(x @ x))
    nb = float(np.sqrt(y @ y))
    if na < COSINE_EPS and nb < COSINE_EPS:
        return _emit((a, b), np.array(0.0), lambda g: (np.zeros(a.shape), np.zeros(b.shape)))
    dot = float(x @ y)
    den = na * nb + COSINE_EPS
    val = dot / den

    def back(g):
        g = float(g)
        # d(den)/dx = nb * x / na  (0 when na == 0)
        ddx = (nb / na) * x if na > 0 else np.zeros_like(x)
        ddy = (na / nb) * y if nb > 0 else np.zeros_like(y)
        gx = g * (y / den - dot * ddx / (den * den))
        gy = g * (x / den - dot * ddy / (den * den))
        return gx.reshape(a.shape), gy.reshape(b.shape)

    return _emit((a, b), np.array(val), back)


# ---------------------------------------------------------------- convolutions


def _conv_out(op: str, dim: str, n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0:
        raise ShapeError(op, dim, f"kernel extent {k} exceeds padded input extent {n + 2 * pad}")
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0, bias: Optional[Tensor] = None) -> Tensor:
    """Cross-correlation of ``x`` [C_in,H,W] (or [B,C_in,H,W]) with ``w`` [C_out,C_in,kH,kW].

    Output extent is ``floor((H + 2*pad - kH) / stride) + 1``; trailing rows that
    do not fit a full stride are dropped.
    """
    if stride < 1:
        raise ShapeError("conv2d", "stride", f"stride must be >= 1, got {stride}")
    batched = x.data.ndim == 4
    if x.data.ndim not in (3, 4):
        raise ShapeError("conv2d", "input rank", f"expected [C,H,W] or [B,C,H,W], got {x.shape}")
    if w.data.ndim != 4:
        raise ShapeError("conv2d", "kernel rank", f"expected [C_out,C_in,kH,kW], got {w.shape}")
    xd = x.data if batched else x.data[None]
    B, C, H, W = xd.shape
    Co, Ci, kh, kw = w.shape
    if Ci != C:
        raise ShapeError("conv2d", "C_in", f"input has {C} channels, kernel expects {Ci}")
    Ho = _conv_out("conv2d", "H", H, kh, stride, pad)
    Wo = _conv_out("conv2d", "W", W, kw, stride, pad)
    if bias is not None and bias.shape != (Co,):
        raise ShapeError("conv2d", "bias", f"expected ({Co},), got {bias.shape}")

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    # win: [B, C, Ho, Wo, kh, kw]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(Co, -1)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    if not batched:
        out = out[0]

    def back(g):
        gb = g if batched else g[None]
        gmat = gb.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Co)
        gw = (gmat.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gflat = gb.reshape(B, Co, Ho * Wo)
            wtaps = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0))  # [kh, kw, C_in, C_out]
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    tap = (wtaps[i, j] @ gflat).reshape(B, C, Ho, Wo)
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += tap
            gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
            if not batched:
                gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(gb.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, w) if bias is None else (x, w, bias)
    return _emit(inputs, out, back)


def xcorr_depthwise(search: Tensor, template: Tensor) -> Tensor:
    """Per-channel sliding inner product of ``template`` over ``search``.

    Accepts [C,H,W] pairs or batched [B,C,H,W] pairs (one template per item).
    """
    if search.data.ndim != template.data.ndim or search.data.ndim not in (3, 4):
        raise ShapeError("xcorr_depthwise", "rank", f"{search.shape} vs {template.shape}")
    batched = search.data.ndim == 4
    s = search.data if batched else search.data[None]
    t = template.data if batched else template.data[None]
    if s.shape[0] != t.shape[0]:
        raise ShapeError("xcorr_depthwise", "batch", f"{s.shape[0]} != {t.shape[0]}")
    if s.shape[1] != t.shape[1]:
        raise ShapeError("xcorr_depthwise", "C", f"search has {s.shape[1]}, template has {t.shape[1]}")
    _, _, Hs, Ws = s.shape
    _, _, Ht, Wt = t.shape
    if Ht > Hs:
        raise ShapeError("xcorr_depthwise", "H", f"template {Ht} larger than search {Hs}")
    if Wt > Ws:
        raise ShapeError("xcorr_depthwise", "W", f"template {Wt} larger than search {Ws}")
    win = sliding_window_view(s, (Ht, Wt), axis=(2, 3))  # [B,C,Ho,Wo,Ht,Wt]
    out = np.einsum("bcxyij,bcij->bcxy", win, t, optimize=True)
    Ho, Wo = out.shape[2:]
    if not batched:
        out = out[0]

    def back(g):
        gb = g if batched else g[None]
        gt = np.einsum("bcxyij,bcxy->bcij", win, gb, optimize=True) if template.requires_grad else None
        gs = None
        if search.requires_grad:
            gs = np.zeros_like(s)
            tt = np.ascontiguousarray(t.transpose(2, 3, 0, 1))[..., None, None]
            for i in range(Ht):
                for j in range(Wt):
                    gs[:, :, i:i + Ho, j:j + Wo] += gb * tt[i, j]
        if not batched:
            gs = gs[0] if gs is not None else None
            gt = gt[0] if gt is not None else None
        return gs, gt

    return _emit((search, template), out, back)


def gradcheck_numeric(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-4,
                      indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """Central finite differences of a scalar function at ``x`` (flat indices optional)."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(len(idx))
    for n, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        out[n] = (fp - fm) / (2 * h)
    return out


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise :func:`cosine_similarity` of two [R, D] tensors, giving [R]."""
    if a.shape != b.shape or a.data.ndim != 2:
        raise ShapeError("cosine_rows", "shape", f"{a.shape} vs {b.shape}")
    x, y = a.data, b.data
    na = np.sqrt((x * x).sum(axis=1))
    nb = np.sqrt((y * y).sum(axis=1))
    dead = (na < COSINE_EPS) & (nb < COSINE_EPS)
    dot = (x * y).sum(axis=1)
    den = na * nb + COSINE_EPS
    val = np.where(dead, 0.0, dot / den)

    def back(g):
        g = np.where(dead, 0.0, g)[:, None]
        safe_na = np.where(na > 0, na, 1.0)[:, None]
        safe_nb = np.where(nb > 0, nb, 1.0)[:, None]
        ddx = np.where(na[:, None] > 0, (nb[:, None] / safe_na) * x, 0.0)
        ddy = np.where(nb[:, None] > 0, (na[:, None] / safe_nb) * y, 0.0)
        d2 = (den * den)[:, None]
        gx = g * (y / den[:, None] - dot[:, None] * ddx / d2)
        gy = g * (x / den[:, None] - dot[:, None] * ddy / d2)
        return gx, gy

    return _emit((a, b), val, back)
