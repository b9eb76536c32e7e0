"""Dense float32 tensors with a reverse-mode gradient tape.

Arrays live in numpy; every differentiable op records its parents and a
closure that pushes the upstream gradient back to them.  ``backward`` walks
the recorded graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NonFiniteError

DTYPE = np.float32

_grad_enabled = True
_check_finite = True
_mac_counter: list[int] | None = None


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (used for sampling)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the storage dtype of newly built tensors.

    Float64 is only meant for finite-difference gradient checks; everything
    else runs in float32.
    """
    global DTYPE
    prev = DTYPE
    DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = prev


def set_finite_checks(enabled: bool) -> bool:
    """Toggle the per-op NaN/Inf guard. Returns the previous setting."""
    global _check_finite
    prev = _check_finite
    _check_finite = bool(enabled)
    return prev


@contextlib.contextmanager
def count_macs():
    """Tally multiply-accumulates of forward matmul/linear/conv2d calls in the block.

    Yields a one-element list whose entry holds the running total.
    """
    global _mac_counter
    prev = _mac_counter
    _mac_counter = [0]
    try:
        yield _mac_counter
    finally:
        _mac_counter = prev


def _tally(n: int) -> None:
    if _mac_counter is not None:
        _mac_counter[0] += int(n)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if _check_finite and not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = cls(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=DTYPE), requires_grad=requires_grad)

    # -- basic properties -----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    # -- autodiff driver ------------------------------------------------------

    def backward(self) -> None:
        """Populate ``.grad`` on every tensor that requires grad and feeds this scalar."""
        if self.data.size != 1 or self.data.ndim > 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor that requires grad")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # free graph-internal buffers; leaves keep their grads
                node.grad = None
                node._backward = None
                node._parents = ()

    # -- elementwise arithmetic ----------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.shape))

        return Tensor._make(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        a = self
        return Tensor._make(-a.data, (a,), lambda g: a._accum(-g))

    def __sub__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g, b.shape))

        return Tensor._make(a.data - b.data, (a, b), bw)

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.shape))

        return Tensor._make(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._make(a.data / b.data, (a, b), bw)

    def __rtruediv__(self, other) -> "Tensor":
        return _as_tensor(other) / self

    def __pow__(self, p: float) -> "Tensor":
        a = self
        p = float(p)
        return Tensor._make(
            a.data**p, (a,), lambda g: a._accum(g * p * a.data ** (p - 1.0))
        )

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    # -- reductions / shape ops ----------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.shape))

        return Tensor._make(
            np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw
        )

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            n = int(np.prod([self.shape[i] for i in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._make(
            a.data.reshape(shape), (a,), lambda g: a._accum(g.reshape(a.shape))
        )

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        inv = np.argsort(axes)
        return Tensor._make(
            a.data.transpose(axes), (a,), lambda g: a._accum(g.transpose(inv))
        )

    def __getitem__(self, idx) -> "Tensor":
        a = self

        def bw(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accum(full)

        return Tensor._make(a.data[idx], (a,), bw)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractError("matmul expects 2-D operands")

    def bw(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return Tensor._make(a.data @ b.data, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (N, in)."""

    def bw(g):
        if x.requires_grad:
            x._accum(g @ weight.data)
        if weight.requires_grad:
            weight._accum(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=0))

    out = x.data @ weight.data.T
    _tally(out.size * x.shape[-1])
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [t.reshape(t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(parts, axis=axis)


# -- activations ----------------------------------------------------------------


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return (0.5 * (1.0 + np.tanh(0.5 * x))).astype(DTYPE, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return Tensor._make(s, (x,), lambda g: x._accum(g * s * (1.0 - s)))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    out = x.data * s
    return Tensor._make(out, (x,), lambda g: x._accum(g * (s + out * (1.0 - s))))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return Tensor._make(x.data * pos, (x,), lambda g: x._accum(g * pos))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return Tensor._make(e, (x,), lambda g: x._accum(g * e))


# -- convolution and friends ---------------------------------------------------


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(B, Hp, Wp, C) padded input -> (B*Ho*Wo, k*k*C) patch matrix."""
    b, c = xp.shape[0], xp.shape[3]
    if k == 1 and stride == 1:
        return xp.reshape(b * ho * wo, c)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    patches = [
        xp[:, i : i + span_h : stride, j : j + span_w : stride, :] for i in range(k) for j in range(k)
    ]
    return np.concatenate(patches, axis=-1).reshape(b * ho * wo, k * k * c)


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    b, h, w, c = x.shape
    out = np.zeros((b, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    out[:, p : p + h, p : p + w] = x
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Same-padded 2-D cross-correlation.

    Layout is NHWC; ``weight`` is (k, k, C_in, C_out).  With stride 2 the
    output is ``ceil(H / 2)`` rows, sampling every other padded position.
    """
    b, h, w, cin = x.shape
    k, k2, cin_w, cout = weight.shape
    if cin != cin_w or k != k2 or k % 2 == 0:
        raise ContractError(f"conv2d shape mismatch: x{x.shape} w{weight.shape}")
    pad = k // 2
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = _im2col(_pad_hw(x.data, pad), k, stride, ho, wo)
    wmat = weight.data.reshape(-1, cout)
    out = cols @ wmat
    _tally(out.size * cols.shape[1])
    if bias is not None:
        out += bias.data

    def bw(g):
        gmat = g.reshape(-1, cout)
        if weight.requires_grad:
            weight._accum((cols.T @ gmat).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accum(np.ones(gmat.shape[0], dtype=DTYPE) @ gmat)
        if x.requires_grad:
            x._accum(_conv_input_grad(g, weight.data, stride, h, w))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out.reshape(b, ho, wo, cout), parents, bw)


def _conv_input_grad(g: np.ndarray, wt: np.ndarray, stride: int, h: int, w: int) -> np.ndarray:
    """Input gradient of a same-padded conv: correlate the (dilated) output grad with the flipped kernel."""
    b, ho, wo, cout = g.shape
    k, _, cin, _ = wt.shape
    pad = k // 2
    wflip = wt[::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, cin)
    if stride == 1:
        cols = _im2col(_pad_hw(g, pad), k, 1, h, w)
        return (cols @ wflip).reshape(b, h, w, cin)
    gd = np.zeros((b, (ho - 1) * stride + 1, (wo - 1) * stride + 1, cout), dtype=DTYPE)
    gd[:, ::stride, ::stride] = g
    lh, lw = gd.shape[1] + k - 1, gd.shape[2] + k - 1
    full = (_im2col(_pad_hw(gd, k - 1), k, 1, lh, lw) @ wflip).reshape(b, lh, lw, cin)
    # full[r] is the grad of padded-input row r; keep the rows that are real input
    gx = np.zeros((b, h, w, cin), dtype=DTYPE)
    rh, rw = min(h, lh - pad), min(w, lw - pad)
    gx[:, :rh, :rw] = full[:, pad : pad + rh, pad : pad + rw]
    return gx


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of an NHWC tensor."""
    b, h, w, c = x.shape
    out = np.broadcast_to(x.data[:, :, None, :, None, :], (b, h, 2, w, 2, c)).reshape(b, 2 * h, 2 * w, c)

    def bw(g):
        x._accum(g.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4)))

    return Tensor._make(out, (x,), bw)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Group normalisation of an NHWC tensor with per-channel affine."""
    b, h, w, c = x.shape
    if c % groups:
        raise ContractError(f"{c} channels not divisible into {groups} groups")
    cg = c // groups
    n = h * w * cg
    xf = x.data.reshape(b, h * w, c)

    def group_mean(v):  # (B, C) channel sums -> per-channel group means (B, 1, C)
        gm = v.reshape(b, groups, cg).sum(axis=2, keepdims=True) / n
        return np.repeat(gm, cg, axis=2).reshape(b, 1, c)

    mu = group_mean(xf.sum(axis=1))
    xc = xf - mu
    var = group_mean((xc * xc).sum(axis=1))
    inv = (1.0 / np.sqrt(var + eps)).astype(DTYPE)
    xhat = xc * inv
    out = (xhat * gamma.data + beta.data).reshape(b, h, w, c)

    def bw(g):
        gf = g.reshape(b, h * w, c)
        if gamma.requires_grad:
            gamma._accum((gf * xhat).sum(axis=(0, 1)))
        if beta.requires_grad:
            beta._accum(gf.sum(axis=(0, 1)))
        if x.requires_grad:
            gx = gf * gamma.data
            dx = inv * (gx - group_mean(gx.sum(axis=1)) - xhat * group_mean((gx * xhat).sum(axis=1)))
            x._accum(dx.reshape(b, h, w, c))

    return Tensor._make(out, (x, gamma, beta), bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradient scatters back into the table."""
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accum(full)

    return Tensor._make(table.data[ids], (table,), bw)


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ContractError(f"mse shape mismatch {a.shape} vs {b.shape}")
    # accumulate in float64 so the scalar is correctly rounded
    d = a.data.astype(np.float64) - b.data.astype(np.float64)
    n = d.size

    def bw(g):
        scale = 2.0 * g / n
        if a.requires_grad:
            a._accum((scale * d).astype(DTYPE))
        if b.requires_grad:
            b._accum((-scale * d).astype(DTYPE))

    return Tensor._make(np.asarray(np.mean(d * d)), (a, b), bw)


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.isfinite(p.data).all() for p in params)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor._make(np.clip(x.data, lo, hi), (x,), lambda g: x._accum(g * inside))
