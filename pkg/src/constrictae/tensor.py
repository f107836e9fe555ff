"""Dense tensors with reverse-mode automatic differentiation.

Every numeric operation the autoencoder, the losses and the metrics need lives
here. Values are stored as numpy arrays; each differentiable operation records
a node holding its parents and a backward rule, and :func:`backward` replays
those nodes in reverse topological order.

Convolutions are cross-correlations (no kernel flip) over ``(N, C, T, H, W)``
inputs.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np

Triple = tuple[int, int, int]

_DTYPES = {32: np.float32, 64: np.float64}
_default_dtype: contextvars.ContextVar[type] = contextvars.ContextVar(
    "default_dtype", default=np.float32
)
_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "active_tape", default=None
)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def dtype_for(precision: int) -> type:
    try:
        return _DTYPES[precision]
    except KeyError:
        raise ValueError(f"precision must be 32 or 64, got {precision}") from None


def get_default_dtype() -> type:
    return _default_dtype.get()


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily change the dtype used when building tensors from raw data."""
    token = _default_dtype.set(dtype_for(bits))
    try:
        yield
    finally:
        _default_dtype.reset(token)


class Node:
    __slots__ = ("parents", "backward_fn", "name")

    def __init__(self, parents: Sequence["Tensor"], backward_fn: Callable, name: str):
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.name = name


class Tensor:
    """N-dimensional real array that can take part in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, _node: Node | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or (data.dtype if _is_float_array(data) else get_default_dtype()))
        if arr.ndim == 0:
            arr = arr.reshape(())
        if not np.isfinite(arr).all():
            raise NonFiniteError("non-finite values in tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node = _node

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numel(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None if self.grad is None else np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scalar_mul(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def backward(self) -> None:
        backward(self)


def _is_float_array(x) -> bool:
    return isinstance(x, np.ndarray) and x.dtype in (np.float32, np.float64)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, name: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {name}")
    needs = any(p.requires_grad for p in parents)
    node = Node(parents, backward_fn, name) if needs else None
    out = Tensor.__new__(Tensor)
    out.data, out.requires_grad, out.grad, out._node = data, needs, None, node
    if needs:
        tape = _active_tape.get()
        if tape is not None:
            tape.record(out)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {t.shape}")
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class Tape:
    """Ordered record of differentiable operations made while the tape is active.

    Use as a context manager. Operations are appended in creation order, which
    is already topological, so reverse replay needs no sorting.
    """

    def __init__(self):
        self.entries: list[Tensor] = []

    def record(self, out: Tensor) -> None:
        self.entries.append(out)

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)

    def __len__(self) -> int:
        return len(self.entries)

    def leaves(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for out in self.entries:
            for p in out._node.parents:
                if p._node is None and p.requires_grad:
                    seen.setdefault(id(p), p)
        return list(seen.values())

    def backward(self, loss: Tensor) -> int:
        """Replay the tape in reverse from ``loss``; returns the number of nodes visited."""
        _check_scalar_loss(loss)
        if loss._node is None:
            _accumulate(loss, np.ones_like(loss.data))
            return 0
        grads = {id(loss): np.ones_like(loss.data)}
        visited = 0
        for out in reversed(self.entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            visited += 1
            _propagate(out, g, grads)
        return visited

    def clear(self) -> None:
        """Drop recorded operations and zero every gradient seen on the tape."""
        for out in self.entries:
            out.grad = None
        for leaf in self.leaves():
            leaf.zero_grad()
        self.entries.clear()


def _check_scalar_loss(loss: Tensor) -> None:
    if loss.numel() != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")


def _propagate(out: Tensor, g: np.ndarray, grads: dict[int, np.ndarray]) -> None:
    node = out._node
    parent_grads = node.backward_fn(g)
    for p, pg in zip(node.parents, parent_grads):
        if pg is None or not p.requires_grad:
            continue
        if p._node is None:
            _accumulate(p, pg)
        elif id(p) in grads:
            grads[id(p)] = grads[id(p)] + pg
        else:
            grads[id(p)] = pg


def topological_order(loss: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen or t._node is None:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t._node.parents:
            if p._node is not None and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad.

    Gradients add up across calls; zero them between steps.
    """
    _check_scalar_loss(loss)
    if loss._node is None:
        # a leaf loss or one that touches nothing trainable
        _accumulate(loss, np.ones_like(loss.data))
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for out in reversed(topological_order(loss)):
        g = grads.pop(id(out), None)
        if g is not None:
            _propagate(out, g, grads)


@contextlib.contextmanager
def no_grad_params(params: Iterable[Tensor]):
    """Run a block with ``requires_grad`` switched off on ``params``."""
    params = list(params)
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and b.numel() != 1 and a.numel() != 1:
        raise ShapeError(f"{op}: shape mismatch between {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_same(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a), _reduce_to(g * a.data, b)),
        "mul",
    )


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,), "scalar_mul")


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    # sign(0) == 0 gives the zero subgradient at the kink
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def max_with_zero(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "max_with_zero")


relu = max_with_zero


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in [0, 1), got {slope}")
    scale = np.where(x.data >= 0, 1.0, slope).astype(x.dtype)
    return _make(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch one of the named elementwise operations."""
    if op_kind == "add":
        return add(a, b)
    if op_kind == "sub":
        return sub(a, b)
    if op_kind == "mul":
        return mul(a, b)
    if op_kind == "scalar_mul":
        return scalar_mul(a, b)
    if op_kind == "abs":
        return abs(a)
    if op_kind == "max_with_zero":
        return max_with_zero(a)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    elif not isinstance(a, Tensor):
        a, b = Tensor(a), Tensor(b)
    return a, b


# ---------------------------------------------------------------------------
# Reductions and reshaping
# ---------------------------------------------------------------------------


def sum(x: Tensor) -> Tensor:  # noqa: A001
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, x.shape),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.numel()
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    return _make(
        np.asarray(x.data.mean(), dtype=x.dtype),
        (x,),
        lambda g: (np.broadcast_to(g / n, x.shape),),
        "mean",
    )


def mean_squared(x: Tensor) -> Tensor:
    """Mean of squared entries; equals the squared Frobenius norm over the element count."""
    n = x.numel()
    if n == 0:
        raise ShapeError("mean_squared of an empty tensor")
    value = np.asarray(np.mean(np.square(x.data)), dtype=x.dtype)
    return _make(value, (x,), lambda g: (g * (2.0 / n) * x.data,), "mean_squared")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inverse),), "transpose")


def l2_norm_per_location(F: Tensor) -> Tensor:
    """Euclidean norm over the (time, channel) axes at every spatial location.

    ``F`` is ``(T', C', H', W')`` or batched ``(N, T', C', H', W')``; the
    result drops the two leading feature axes. The gradient at a zero vector is
    taken as zero.
    """
    if F.ndim not in (4, 5):
        raise ShapeError(f"l2_norm_per_location expects a 4-D or 5-D tensor, got shape {F.shape}")
    axes = (-4, -3)
    norms = np.sqrt(np.sum(np.square(F.data), axis=axes))

    def bw(g):
        safe = np.where(norms > 0, norms, 1)
        scale = np.where(norms > 0, g / safe, 0)
        return (F.data * np.expand_dims(scale, axes),)

    return _make(norms.astype(F.dtype), (F,), bw, "l2_norm_per_location")


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------


def _triple(v) -> Triple:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ValueError(f"expected an int or a 3-tuple, got {v}")
    return v


def conv_output_shape(size: Sequence[int], kernel, stride, padding) -> Triple:
    k, s, p = _triple(kernel), _triple(stride), _triple(padding)
    return tuple((n + 2 * pp - kk) // ss + 1 for n, kk, ss, pp in zip(size, k, s, p))


def conv_transpose_output_shape(size: Sequence[int], kernel, stride, padding, output_padding=0) -> Triple:
    k, s, p, op = _triple(kernel), _triple(stride), _triple(padding), _triple(output_padding)
    return tuple((n - 1) * ss - 2 * pp + kk + oo for n, kk, ss, pp, oo in zip(size, k, s, p, op))


def _windows(xp: np.ndarray, k: Triple, s: Triple, out: Triple) -> np.ndarray:
    # (N, C, To, Ho, Wo, kt, kh, kw) view, no copy
    v = np.lib.stride_tricks.sliding_window_view(xp, k, axis=(2, 3, 4))
    return v[:, :, : (out[0] - 1) * s[0] + 1 : s[0], : (out[1] - 1) * s[1] + 1 : s[1], : (out[2] - 1) * s[2] + 1 : s[2]]


def _pad(x: np.ndarray, p: Triple) -> np.ndarray:
    if p == (0, 0, 0):
        return x
    return np.pad(x, ((0, 0), (0, 0), (p[0], p[0]), (p[1], p[1]), (p[2], p[2])))


def _corr(x: np.ndarray, w: np.ndarray, s: Triple, p: Triple) -> np.ndarray:
    """Cross-correlate ``x (N,C,T,H,W)`` with ``w (Co,C,kt,kh,kw)``."""
    k = w.shape[2:]
    out = conv_output_shape(x.shape[2:], k, s, p)
    cols = _windows(_pad(x, p), k, s, out)
    y = np.tensordot(cols, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))  # (N,To,Ho,Wo,Co)
    return np.ascontiguousarray(y.transpose(0, 4, 1, 2, 3))


def _corr_input_grad(gy: np.ndarray, w: np.ndarray, s: Triple, p: Triple, in_size: Triple) -> np.ndarray:
    """Adjoint of :func:`_corr` with respect to its input (scatter-accumulate)."""
    n, c = gy.shape[0], w.shape[1]
    k = w.shape[2:]
    out = gy.shape[2:]
    dcols = np.tensordot(gy, w, axes=([1], [0]))  # (N,To,Ho,Wo,C,kt,kh,kw)
    dcols = dcols.transpose(0, 4, 1, 2, 3, 5, 6, 7)
    padded = tuple(n_ + 2 * p_ for n_, p_ in zip(in_size, p))
    dxp = np.zeros((n, c) + padded, dtype=gy.dtype)
    for a in range(k[0]):
        ta = slice(a, a + (out[0] - 1) * s[0] + 1, s[0])
        for b in range(k[1]):
            hb = slice(b, b + (out[1] - 1) * s[1] + 1, s[1])
            for d in range(k[2]):
                wd = slice(d, d + (out[2] - 1) * s[2] + 1, s[2])
                dxp[:, :, ta, hb, wd] += dcols[..., a, b, d]
    return dxp[:, :, p[0] : p[0] + in_size[0], p[1] : p[1] + in_size[1], p[2] : p[2] + in_size[2]]


def _corr_weight_grad(x: np.ndarray, gy: np.ndarray, s: Triple, p: Triple, k: Triple) -> np.ndarray:
    cols = _windows(_pad(x, p), k, s, gy.shape[2:])
    return np.tensordot(gy, cols, axes=([0, 2, 3, 4], [0, 2, 3, 4]))  # (Co,C,kt,kh,kw)


def _check_conv_args(x: Tensor, kernel: Tensor, bias: Tensor | None, in_channels: int, out_channels: int, name: str):
    if x.ndim != 5:
        raise ShapeError(f"{name}: input must be (N, C, T, H, W), got shape {x.shape}")
    if kernel.ndim != 5:
        raise ShapeError(f"{name}: kernel must be 5-D, got shape {kernel.shape}")
    if x.shape[1] != in_channels:
        raise ShapeError(f"{name}: input has {x.shape[1]} channels but kernel {kernel.shape} expects {in_channels}")
    if bias is not None and bias.shape != (out_channels,):
        raise ShapeError(f"{name}: bias shape {bias.shape} does not match {out_channels} output channels")


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """3-D cross-correlation. ``kernel`` is ``(C_out, C_in, kt, kh, kw)``."""
    s, p = _triple(stride), _triple(padding)
    if min(s) < 1:
        raise ValueError(f"conv3d: strides must be >= 1, got {s}")
    _check_conv_args(x, kernel, bias, kernel.shape[1], kernel.shape[0], "conv3d")
    k = kernel.shape[2:]
    padded = [n + 2 * pp for n, pp in zip(x.shape[2:], p)]
    if any(kk > n for kk, n in zip(k, padded)):
        raise ShapeError(f"conv3d: kernel extents {k} exceed padded input extents {tuple(padded)}")
    out = conv_output_shape(x.shape[2:], k, s, p)
    if min(out) < 1:
        raise ShapeError(f"conv3d: zero-size output {out}")
    y = _corr(x.data, kernel.data, s, p)
    if bias is not None:
        y += bias.data.reshape(1, -1, 1, 1, 1)
    in_size = x.shape[2:]

    def bw(g):
        gx = _corr_input_grad(g, kernel.data, s, p, in_size) if x.requires_grad else None
        gk = _corr_weight_grad(x.data, g, s, p, k) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None and bias.requires_grad else None
        return gx, gk, gb

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return _make(y, parents, bw, "conv3d")


def conv3d_transpose(
    x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=1, padding=0, output_padding=0
) -> Tensor:
    """Transposed 3-D convolution, the input-gradient of :func:`conv3d`.

    ``kernel`` is ``(C_in, C_out, kt, kh, kw)``. Output extents are
    ``(n - 1) * s - 2 * p + k + output_padding``.
    """
    s, p, op = _triple(stride), _triple(padding), _triple(output_padding)
    if min(s) < 1:
        raise ValueError(f"conv3d_transpose: strides must be >= 1, got {s}")
    if any(o >= ss for o, ss in zip(op, s)):
        raise ValueError(f"conv3d_transpose: output_padding {op} must be smaller than stride {s}")
    _check_conv_args(x, kernel, bias, kernel.shape[0], kernel.shape[1], "conv3d_transpose")
    k = kernel.shape[2:]
    out = conv_transpose_output_shape(x.shape[2:], k, s, p, op)
    if min(out) < 1:
        raise ShapeError(f"conv3d_transpose: zero-size output {out}")
    if any(kk > n + 2 * pp for kk, n, pp in zip(k, out, p)):
        raise ShapeError(f"conv3d_transpose: kernel extents {k} exceed padded output extents")
    y = _corr_input_grad(x.data, kernel.data, s, p, out)
    y = np.ascontiguousarray(y)
    if bias is not None:
        y += bias.data.reshape(1, -1, 1, 1, 1)

    def bw(g):
        gx = _corr(g, kernel.data, s, p) if x.requires_grad else None
        gk = _corr_weight_grad(g, x.data, s, p, k) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None and bias.requires_grad else None
        return gx, gk, gb

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return _make(y, parents, bw, "conv3d_transpose")


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences for ``f`` at ``x``.

    The error is ``max|a - n| / max(max|a|, max|n|)``, i.e. the worst
    coordinate deviation relative to the gradient's overall scale. Both
    gradients identically zero gives 0.
    """
    x0 = np.array(x.data, copy=True)
    probe = Tensor(x0, requires_grad=True, dtype=x0.dtype)
    out = f(probe)
    if out.numel() != 1:
        raise ShapeError(f"grad_check needs a scalar function, got output shape {out.shape}")
    if out.requires_grad:
        backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(x0)

    numeric = np.zeros_like(x0, dtype=np.float64)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(x0, dtype=x0.dtype)).item()
        flat[i] = orig - h
        fm = f(Tensor(x0, dtype=x0.dtype)).item()
        flat[i] = orig
        numeric.reshape(-1)[i] = (fp - fm) / (2 * h)

    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric))) / scale
