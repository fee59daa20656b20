"""Small reverse-mode autodiff layer over float64 numpy arrays.

Every differentiable operation appends a node to the active :class:`Tape`.
``backward`` replays the recorded adjoints in reverse order and then marks
the tape consumed, so a tape serves exactly one training step.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (double backward, foreign tape, ...)."""


class DiffTensor:
    """N-dimensional float64 array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "DiffTensor":
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(arr, dtype=np.float64)
        out.requires_grad = requires_grad
        out.grad = None
        out._tape = None
        out.name = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "DiffTensor":
        return DiffTensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DiffTensor(shape={self.shape}{flag})"

    # operator sugar; everything routes through the primitive ops below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, DiffTensor):
            return mul(self, exp(mul(log(other), -1.0)))
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    return DiffTensor._wrap(np.asarray(x, dtype=np.float64))


# --------------------------------------------------------------------------
# tape


@dataclass
class _Node:
    out: DiffTensor
    inputs: tuple[DiffTensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of executed operations."""

    nodes: list[_Node] = field(default_factory=list)
    consumed: bool = False

    def record(self, out: DiffTensor, inputs: tuple[DiffTensor, ...], vjp) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a consumed tape")
        out._tape = self
        self.nodes.append(_Node(out, inputs, vjp))

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()


class _State(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []
        self.default: Tape | None = None
        self.grad_enabled = True


_state = _State()


def current_tape() -> Tape:
    """Return the innermost active tape, creating a fresh default if needed."""
    if _state.stack:
        return _state.stack[-1]
    if _state.default is None or _state.default.consumed:
        _state.default = Tape()
    return _state.default


def grad_enabled() -> bool:
    return _state.grad_enabled


@contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _make(out_data: np.ndarray, inputs: tuple[DiffTensor, ...], vjp) -> DiffTensor:
    needs = _state.grad_enabled and any(t.requires_grad for t in inputs)
    out = DiffTensor._wrap(out_data, requires_grad=needs)
    if needs:
        tape = current_tape()
        for t in inputs:
            if t._tape is not None and t._tape is not tape:
                raise TapeError(
                    "operand was recorded on a different (possibly consumed) tape"
                )
        tape.record(out, inputs, vjp)
    return out


def backward(loss: DiffTensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any requires_grad tensor")
    tape = loss._tape
    if tape is None:
        # loss is itself a leaf
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    if tape.consumed:
        raise TapeError("backward() already ran on this tape; record a new step")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.vjp(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._tape is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
    tape.nodes.clear()


# --------------------------------------------------------------------------
# primitive ops


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: DiffTensor, b: DiffTensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), vjp)


def mul(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), vjp)


def matmul(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands with ndim >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions differ ({a.shape[-1]} vs {b.shape[-2]}) "
            f"for shapes {a.shape} @ {b.shape}"
        )
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), vjp)


def _conv_out(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x, w, stride: int = 1, padding: int = 0) -> DiffTensor:
    """Cross-correlation of ``x`` [B, Cin, H, W] with ``w`` [Cout, Cin, k, k]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, Ck, k, k2 = w.shape
    if k != k2:
        raise ShapeError(f"conv2d supports square kernels only, got {k}x{k2}")
    if Ck != C:
        raise ShapeError(f"conv2d: input has {C} channels but kernel expects {Ck}")
    if int(stride) != stride or stride < 1:
        raise ShapeError(f"conv2d: stride must be an integer >= 1, got {stride}")
    if int(padding) != padding or padding < 0:
        raise ShapeError(f"conv2d: padding must be a non-negative integer, got {padding}")
    Ho, Wo = _conv_out(H, k, stride, padding), _conv_out(W, k, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {H}x{W}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    # im2col as [C*k*k, B*Ho*Wo]; built once, reused for the weight gradient
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(C * k * k, B * Ho * Wo)
    w2 = w.data.reshape(O, C * k * k)
    out = np.ascontiguousarray((w2 @ cols).reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3))

    def vjp(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(O, B * Ho * Wo)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(C, k, k, B, Ho, Wo)
            gxp = np.zeros((C, B) + xp.shape[2:])
            he, we = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + he : stride, j : j + we : stride] += gcols[:, i, j]
            if padding:
                gxp = gxp[:, :, padding : padding + H, padding : padding + W]
            gx = np.ascontiguousarray(gxp.transpose(1, 0, 2, 3))
        return gx, gw

    return _make(out, (x, w), vjp)


def relu(x) -> DiffTensor:
    x = as_tensor(x)
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0.0), (x,), vjp)


def reshape(x, shape: Sequence[int]) -> DiffTensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} ({x.size} values) as {shape}") from None
    src = x.shape

    def vjp(g):
        return (g.reshape(src),)

    return _make(out, (x,), vjp)


def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for {ndim}-d tensor")
        out.append(a % ndim)
    return tuple(out)


def _expand(g: np.ndarray, axes, keepdims: bool, shape) -> np.ndarray:
    if axes is not None and not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims: bool = False) -> DiffTensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape

    def vjp(g):
        return (np.array(_expand(g, axes, keepdims, shape)),)

    return _make(np.sum(x.data, axis=axes, keepdims=keepdims), (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> DiffTensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    n = x.size if axes is None else int(np.prod([shape[a] for a in axes]))

    def vjp(g):
        return (np.array(_expand(g, axes, keepdims, shape)) / n,)

    return _make(np.mean(x.data, axis=axes, keepdims=keepdims), (x,), vjp)


def max_over_axis(x, axis: int, keepdims: bool = False) -> DiffTensor:
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    (ax,) = _norm_axis(axis, x.ndim)
    idx = np.expand_dims(np.argmax(x.data, axis=ax), ax)
    out = np.take_along_axis(x.data, idx, axis=ax)
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape)
        if not keepdims:
            g = np.expand_dims(g, ax)
        np.put_along_axis(gx, idx, g, axis=ax)
        return (gx,)

    return _make(out if keepdims else np.squeeze(out, axis=ax), (x,), vjp)


def log(x) -> DiffTensor:
    x = as_tensor(x)
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)

    def vjp(g):
        return (g / xd,)

    return _make(out, (x,), vjp)


def exp(x) -> DiffTensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def vjp(g):
        return (g * out,)

    return _make(out, (x,), vjp)


def gather_class_channel(logits, labels) -> DiffTensor:
    """Pick ``logits[b, labels[b, h, w], h, w]`` -> [B, H, W]."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 4:
        raise ShapeError(f"gather_class_channel expects [B, C, H, W], got {logits.shape}")
    B, C, H, W = logits.shape
    if labels.shape != (B, H, W):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"labels must be integers, got dtype {labels.dtype}")
    bad = (labels < 0) | (labels >= C)
    if bad.any():
        b, h, w = (int(v) for v in np.argwhere(bad)[0])
        raise ValueError(
            f"label {int(labels[b, h, w])} out of range [0, {C}) at pixel (b={b}, h={h}, w={w})"
        )
    idx = labels[:, None, :, :].astype(np.intp)
    out = np.take_along_axis(logits.data, idx, axis=1)[:, 0]

    def vjp(g):
        gx = np.zeros((B, C, H, W))
        np.put_along_axis(gx, idx, g[:, None], axis=1)
        return (gx,)

    return _make(out, (logits,), vjp)


def log_softmax(x, axis: int = 1) -> DiffTensor:
    x = as_tensor(x)
    (ax,) = _norm_axis(axis, x.ndim)
    if x.shape[ax] < 2:
        raise ShapeError(f"log_softmax needs at least 2 entries on axis {ax}, got {x.shape}")
    shifted = x.data - np.max(x.data, axis=ax, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=ax, keepdims=True))
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * np.sum(g, axis=ax, keepdims=True),)

    return _make(out, (x,), vjp)


# --------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol


def grad_check(
    f: Callable[..., DiffTensor],
    leaves: Sequence[DiffTensor],
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients of ``f(*leaves)`` with central differences.

    The error per leaf is ``max |analytic - numeric| / max(1, |numeric|)``.
    """
    if not 0 < h <= 1e-2:
        raise ValueError(f"h must lie in (0, 1e-2], got {h}")
    for leaf in leaves:
        leaf.requires_grad = True
        leaf.grad = None
    with Tape():
        out = f(*leaves)
        if out.size != 1:
            raise ShapeError(f"grad_check needs a scalar-valued f, got shape {out.shape}")
        backward(out)

    errors = {}
    with no_grad():
        for n, leaf in enumerate(leaves):
            analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            numeric = np.empty_like(leaf.data)
            flat = leaf.data.reshape(-1)
            num_flat = numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f(*leaves).item()
                flat[i] = orig - h
                fm = f(*leaves).item()
                flat[i] = orig
                num_flat[i] = (fp - fm) / (2 * h)
            err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
            errors[leaf.name or f"leaf{n}"] = float(err.max()) if err.size else 0.0
    return GradCheckReport(errors, tol)
