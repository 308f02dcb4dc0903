"""Dense float32 tensors with tape-based reverse-mode differentiation.

Every op works on arrays shaped ``(C, H, W)`` or ``(N, C, H, W)``; spatial and
channel axes are always the trailing three. Gradients are only recorded while a
:class:`GradientTape` is active and at least one input requires a gradient.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32

_local = threading.local()


def _dt():
    return getattr(_local, "dtype", DTYPE)


class precision:
    """Evaluate ops on this thread in another float type (e.g. float64 for
    finite-difference oracles). Storage of new tensors follows the setting."""

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype).type

    def __enter__(self):
        self._prev = _dt()
        _local.dtype = self.dtype
        return self

    def __exit__(self, *exc):
        _local.dtype = self._prev


class ShapeError(ValueError):
    pass


class Tensor:
    """A float32 array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_dt())
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = requires_grad
        self._tape: GradientTape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    __radd__ = __add__

    def __rmul__(self, other):
        return mul(self, other)


@dataclass(eq=False)
class Parameter:
    """Named trainable (or frozen) tensor owned by a model."""

    name: str
    value: Tensor
    trainable: bool = True

    def __post_init__(self):
        self.value.requires_grad = self.trainable

    def freeze(self) -> None:
        self.trainable = False
        self.value.requires_grad = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


@dataclass(eq=False)
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


class GradientTape:
    """Append-only record of differentiable ops, used as a context manager.

    Nodes are appended in execution order, so the list is already topologically
    sorted and a single reverse sweep visits each node once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradientTape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self, "gradient tapes must be exited in LIFO order"

    def record(self, inputs, output: Tensor, vjp) -> None:
        output.requires_grad = True
        output._tape = self
        self.nodes.append(_Node(tuple(inputs), output, vjp))

    def gradient(self, loss: Tensor, sources: Iterable[Tensor]) -> list[np.ndarray]:
        """Gradients of a scalar ``loss`` w.r.t. ``sources`` (zeros if unreachable)."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        sources = list(sources)
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        wanted = {id(s) for s in sources}
        keep: dict[int, np.ndarray] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            if id(node.output) in wanted:
                keep[id(node.output)] = g
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        keep.update({k: v for k, v in grads.items() if k in wanted})
        if id(loss) in wanted and id(loss) not in keep:
            keep[id(loss)] = np.ones_like(loss.data)
        return [
            np.asarray(keep.get(id(s), np.zeros_like(s.data)), dtype=_dt()).reshape(s.shape)
            for s in sources
        ]


class no_grad:
    """Suspend recording on the current thread."""

    def __enter__(self):
        _stack().append(None)
        return self

    def __exit__(self, *exc):
        _stack().pop()


def active_tape() -> GradientTape | None:
    stack = _stack()
    return stack[-1] if stack else None


def backward(loss: Tensor, params: Iterable[Parameter]) -> dict[str, np.ndarray]:
    """Map each parameter name to d(loss)/d(param); frozen parameters get zeros."""
    params = list(params)
    if loss.data.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    out = {p.name: np.zeros_like(p.value.data) for p in params}
    if tape is None:
        return out
    live = [p for p in params if p.trainable]
    for p, g in zip(live, tape.gradient(loss, [p.value for p in live])):
        out[p.name] = g
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    result = Tensor(out)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(inputs, result, vjp)
    return result


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ---------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = _dt()(b)
        return _finish(a.data + c, (a,), lambda g: (g,))
    _check_same(a, b, "add")
    return _finish(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = _dt()(b)
        return _finish(a.data - c, (a,), lambda g: (g,))
    _check_same(a, b, "sub")
    return _finish(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _finish(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = _dt()(c)
    return _finish(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _finish(np.where(mask, a.data, _dt()(0)), (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form avoids overflow warnings from exp on large |x|
    return _dt()(0.5) * (_dt()(1) + np.tanh(_dt()(0.5) * x))


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = _sigmoid(x)
    out = x * sig

    def vjp(g):
        return (g * (sig * (_dt()(1) + x * (_dt()(1) - sig))),)

    return _finish(out, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _finish(out, (a,), lambda g: (g * out,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _finish(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "scale": scale}


def elementwise(op_kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name; ``relu`` and ``silu`` ignore ``b``."""
    if op_kind == "relu":
        return relu(a)
    if op_kind == "silu":
        return silu(a)
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    return fn(a, b)


# -- reductions ----------------------------------------------------------------

def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean(dtype=np.float64), dtype=_dt())
    shape = a.shape
    return _finish(out, (a,), lambda g: (np.full(shape, g / n, dtype=_dt()),))


def reduce_mean_sq(a: Tensor, b) -> Tensor:
    """Mean over all elements of ``(a - b)**2``; ``b`` may be a plain array."""
    b = _as_tensor(b)
    _check_same(a, b, "reduce_mean_sq")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray(np.mean(np.square(diff, dtype=np.float64)), dtype=_dt())

    def vjp(g):
        gd = (_dt()(2.0 / n) * g) * diff
        return gd, -gd

    return _finish(out, (a, b), vjp)


# -- spatial -------------------------------------------------------------------

def _as4d(x: np.ndarray) -> np.ndarray:
    if x.ndim == 3:
        return x[None]
    if x.ndim == 4:
        return x
    raise ShapeError(f"expected (C,H,W) or (N,C,H,W), got shape {x.shape}")


def _im2col(x_nhwc: np.ndarray, k: int) -> np.ndarray:
    """Rows of k*k*C patch values (offset-major, channel-minor), zero padded."""
    n, h, w, c = x_nhwc.shape
    if k == 1:
        return x_nhwc.reshape(n * h * w, c)
    p = (k - 1) // 2
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=_dt())
    xp[:, p:p + h, p:p + w, :] = x_nhwc
    cols = np.empty((n, h, w, k * k, c), dtype=_dt())
    for idx in range(k * k):
        i, j = divmod(idx, k)
        cols[:, :, :, idx, :] = xp[:, i:i + h, j:j + w, :]
    return cols.reshape(n * h * w, k * k * c)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 convolution with zero "same" padding, so H and W are preserved."""
    c_out, c_in, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square with odd size, got {kernel.shape}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match {c_out} output channels")
    xd = _as4d(x.data)
    n, c, h, w = xd.shape
    if c != c_in:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {c_in}")
    # channels-last so every shifted window copies contiguous channel runs
    cols = _im2col(xd.transpose(0, 2, 3, 1), k)
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(c_out, k * k * c)
    out = cols @ wmat.T
    out += bias.data
    out = out.reshape(n, h, w, c_out).transpose(0, 3, 1, 2)
    if x.ndim == 3:
        out = out[0]

    def vjp(g):
        g_nhwc = _as4d(g).transpose(0, 2, 3, 1)
        g2 = np.ascontiguousarray(g_nhwc).reshape(n * h * w, c_out)
        gk = gb = gx = None
        if kernel.requires_grad:
            gk = (g2.T @ cols).reshape(c_out, k, k, c).transpose(0, 3, 1, 2)
        if bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            # input gradient is a same-padded conv of g with the flipped, transposed kernel
            wflip = kernel.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, k * k * c_out)
            gx = (_im2col(g_nhwc, k) @ wflip.T).reshape(n, h, w, c)
            gx = gx.transpose(0, 3, 1, 2).reshape(x.shape)
        return gx, gk, gb

    return _finish(out, (x, kernel, bias), vjp)


def avg_pool2d(x: Tensor, f: int) -> Tensor:
    """Mean over non-overlapping f x f blocks."""
    if f < 1:
        raise ValueError(f"pooling factor must be positive, got {f}")
    *lead, h, w = x.shape
    if h % f or w % f:
        raise ShapeError(f"avg_pool2d: factor {f} does not divide spatial extent {h}x{w}")
    if f == 1:
        return _finish(x.data.copy(), (x,), lambda g: (g,))
    blocks = x.data.reshape(*lead, h // f, f, w // f, f)
    # float64 accumulation keeps pooling of replicated values exact
    out = blocks.mean(axis=(-3, -1), dtype=np.float64).astype(_dt())
    inv = _dt()(1.0 / (f * f))

    def vjp(g):
        return (np.repeat(np.repeat(g * inv, f, axis=-2), f, axis=-1),)

    return _finish(out, (x,), vjp)


def upsample_nearest(x: Tensor, f: int) -> Tensor:
    """Replicate each cell into an f x f block."""
    if f < 1:
        raise ValueError(f"upsample factor must be positive, got {f}")
    out = np.repeat(np.repeat(x.data, f, axis=-2), f, axis=-1)
    *lead, h, w = x.shape

    def vjp(g):
        return (g.reshape(*lead, h, f, w, f).sum(axis=(-3, -1)),)

    return _finish(out, (x,), vjp)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_channels needs at least one part")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or p.shape[:-3] != ref[:-3] or p.shape[-2:] != ref[-2:]:
            raise ShapeError(f"concat_channels: spatial mismatch {ref} vs {p.shape}")
    out = np.concatenate([p.data for p in parts], axis=-3)
    bounds = np.cumsum([0] + [p.shape[-3] for p in parts])

    def vjp(g):
        return tuple(g[..., lo:hi, :, :] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _finish(out, parts, vjp)


def slice_channels(x: Tensor, lo: int, hi: int) -> Tensor:
    c = x.shape[-3]
    if not 0 <= lo < hi <= c:
        raise ShapeError(f"slice_channels: range [{lo}, {hi}) invalid for {c} channels")
    out = x.data[..., lo:hi, :, :].copy()
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=_dt())
        gx[..., lo:hi, :, :] = g
        return (gx,)

    return _finish(out, (x,), vjp)
