"""Dense tensor engine with reverse-mode differentiation.

Tensors wrap numpy arrays and record the ops that produced them, so a scalar
loss can be differentiated by walking the recorded graph backwards.  Design
constraints, in rough order of importance:

* Determinism.  Gradient accumulation walks nodes in descending creation
  order (node ids are a topological order by construction), so repeated runs
  accumulate in exactly the same sequence.  Randomness only ever comes from
  `Rng`, a counter-based Philox stream that produces the same bytes on every
  platform.
* Every op checks its output for NaN/Inf and raises `NumericError` naming the
  op, so numerical blowups surface where they happen instead of ten calls
  later.
* Broadcasting is restricted to the few patterns the models need: a 1-D bias
  over the trailing axis of `add`, per-row scalars in the `*_rows` ops, and
  stacked batch dims in `matmul`.  Anything else is a ShapeError.
* Buffers are treated as immutable once wrapped; optimizers rebind
  `Tensor.data` to a freshly computed array rather than writing in place.

A global `flops` counter is bumped by every op (2 flops per multiply-add;
exp/div/sqrt count as 1), which is what the efficiency profiler reads.
"""
from __future__ import annotations

import contextlib
import itertools
import logging
from typing import Callable, Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

EXP_CAP = 30.0
LAYERNORM_EPS = 1e-6


class ShapeError(ValueError):
    """Operand shapes are incompatible with the op's contract."""


class NumericError(ArithmeticError):
    """An op produced NaN or Inf."""


class ContractError(ValueError):
    """An op was called in a way its contract forbids (bad labels, non-scalar loss, ...)."""


_DTYPES = {"f32": np.float32, "f64": np.float64}
_default_dtype = np.float32


def set_default_dtype(kind: str) -> None:
    """Switch the global dtype mode ("f32" default, "f64" for verification)."""
    global _default_dtype
    if kind not in _DTYPES:
        raise ContractError(f"unknown dtype mode {kind!r}, expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[kind]


def default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


@contextlib.contextmanager
def using_dtype(kind: str) -> Iterator[None]:
    global _default_dtype
    prev = _default_dtype
    set_default_dtype(kind)
    try:
        yield
    finally:
        _default_dtype = prev


_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording, e.g. around teacher forwards and evaluation."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class FlopCounter:
    __slots__ = ("count",)

    def __init__(self) -> None:
        self.count = 0

    def add(self, n: int) -> None:
        self.count += int(n)

    def reset(self) -> None:
        self.count = 0


flops = FlopCounter()

_node_ids = itertools.count()


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by op {op!r}")


class Tensor:
    """Immutable n-d value plus the bookkeeping needed for backward()."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_default_dtype)
        _check_finite(arr, "leaf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_ids)
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, grad={self.requires_grad})"

    def backward(self) -> None:
        """Populate .grad on every tensor this scalar depends on."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self.backward_fn is None and not self.requires_grad:
            return
        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if t.node_id in nodes:
                continue
            nodes[t.node_id] = t
            stack.extend(t.parents)
        self.grad = np.ones_like(self.data)
        for nid in sorted(nodes, reverse=True):
            t = nodes[nid]
            if t.backward_fn is not None and t.grad is not None:
                t.backward_fn(t.grad)

    # Operator sugar; the real implementations are the module-level functions.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    def __rmul__(self, other):
        return mul_scalar(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("tensor/tensor division is only provided per-row, use div_rows")
        return mul_scalar(self, 1.0 / other)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...],
          backward_fn: Callable[[np.ndarray], None] | None) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = next(_node_ids)
    out.op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out.parents = parents if needs else ()
    out.backward_fn = backward_fn if needs else None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (have, want) in enumerate(zip(g.shape, shape)):
        if want == 1 and have != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# core ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the trailing two axes; leading axes broadcast."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {ad.shape} @ {bd.shape}")
    if bd.ndim == 2 and ad.ndim > 2:
        # One big GEMM instead of a strided batch loop; same dot products.
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(*ad.shape[:-1], bd.shape[-1])
    else:
        out = ad @ bd
    flops.add(2 * out.size * ad.shape[-1])

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape))

    return _make(out, "matmul", (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1-D bias over the trailing axis."""
    if a.shape != b.shape and not (b.ndim == 1 and a.shape[-1:] == b.shape):
        raise ShapeError(f"add shapes disagree: {a.shape} + {b.shape}")
    out = a.data + b.data
    flops.add(out.size)

    def bw(g: np.ndarray) -> None:
        _accum(a, g)
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out, "add", (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shapes disagree: {a.shape} - {b.shape}")
    out = a.data - b.data
    flops.add(out.size)

    def bw(g: np.ndarray) -> None:
        _accum(a, g)
        _accum(b, -g)

    return _make(out, "sub", (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes disagree: {a.shape} * {b.shape}")
    out = a.data * b.data
    flops.add(out.size)

    def bw(g: np.ndarray) -> None:
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(out, "mul", (a, b), bw)


def add_scalar(x: Tensor, c: float) -> Tensor:
    out = x.data + x.data.dtype.type(c)
    flops.add(out.size)

    def bw(g: np.ndarray) -> None:
        _accum(x, g)

    return _make(out, "add_scalar", (x,), bw)


def mul_scalar(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    out = x.data * c
    flops.add(out.size)

    def bw(g: np.ndarray) -> None:
        _accum(x, g * c)

    return _make(out, "mul_scalar", (x,), bw)


def _rows_shape_check(x: Tensor, s: Tensor, op: str) -> None:
    if s.shape != x.shape[:-1] + (1,):
        raise ShapeError(f"{op} needs per-row scalars shaped {x.shape[:-1] + (1,)}, got {s.shape}")


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of x by scalar s[i]; s has shape x.shape[:-1] + (1,)."""
    _rows_shape_check(x, s, "scale_rows")
    out = x.data * s.data
    flops.add(out.size)

    def bw(g: np.ndarray) -> None:
        _accum(x, g * s.data)
        _accum(s, (g * x.data).sum(axis=-1, keepdims=True))

    return _make(out, "scale_rows", (x, s), bw)


def shift_rows(x: Tensor, s: Tensor) -> Tensor:
    """Add scalar s[i] to every element of row i."""
    _rows_shape_check(x, s, "shift_rows")
    out = x.data + s.data
    flops.add(out.size)

    def bw(g: np.ndarray) -> None:
        _accum(x, g)
        _accum(s, g.sum(axis=-1, keepdims=True))

    return _make(out, "shift_rows", (x, s), bw)


def div_rows(x: Tensor, s: Tensor) -> Tensor:
    """Divide row i of x by scalar s[i]."""
    _rows_shape_check(x, s, "div_rows")
    with np.errstate(divide="ignore", invalid="ignore"):  # finite check reports instead
        out = x.data / s.data
    flops.add(out.size)

    def bw(g: np.ndarray) -> None:
        _accum(x, g / s.data)
        _accum(s, -(g * out).sum(axis=-1, keepdims=True) / s.data)

    return _make(out, "div_rows", (x, s), bw)


def transpose_last(x: Tensor) -> Tensor:
    out = x.data.swapaxes(-1, -2)
    if x.ndim < 2:
        raise ShapeError(f"transpose_last needs >=2-d input, got {x.shape}")

    def bw(g: np.ndarray) -> None:
        _accum(x, g.swapaxes(-1, -2))

    return _make(out, "transpose_last", (x,), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(tuple(shape))

    def bw(g: np.ndarray) -> None:
        _accum(x, g.reshape(x.data.shape))

    return _make(out, "reshape", (x,), bw)


def slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    if not (0 <= lo < hi <= x.shape[-1]):
        raise ShapeError(f"slice_cols [{lo}:{hi}] out of range for {x.shape}")
    out = np.ascontiguousarray(x.data[..., lo:hi])

    def bw(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        full[..., lo:hi] = g
        _accum(x, full)

    return _make(out, "slice_cols", (x,), bw)


def slice_rows(x: Tensor, lo: int, hi: int) -> Tensor:
    if x.ndim < 2 or not (0 <= lo < hi <= x.shape[-2]):
        raise ShapeError(f"slice_rows [{lo}:{hi}] out of range for {x.shape}")
    out = np.ascontiguousarray(x.data[..., lo:hi, :])

    def bw(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        full[..., lo:hi, :] = g
        _accum(x, full)

    return _make(out, "slice_rows", (x,), bw)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols needs at least one tensor")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise ShapeError(f"concat_cols leading shapes disagree: {[p.shape for p in parts]}")
    out = np.concatenate([p.data for p in parts], axis=-1)
    widths = [p.shape[-1] for p in parts]

    def bw(g: np.ndarray) -> None:
        lo = 0
        for p, w in zip(parts, widths):
            _accum(p, g[..., lo:lo + w])
            lo += w

    return _make(out, "concat_cols", tuple(parts), bw)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows needs at least one tensor")
    ref = parts[0]
    for p in parts:
        if p.ndim < 2 or p.shape[:-2] != ref.shape[:-2] or p.shape[-1] != ref.shape[-1]:
            raise ShapeError(f"concat_rows shapes disagree: {[p.shape for p in parts]}")
    out = np.concatenate([p.data for p in parts], axis=-2)
    heights = [p.shape[-2] for p in parts]

    def bw(g: np.ndarray) -> None:
        lo = 0
        for p, h in zip(parts, heights):
            _accum(p, g[..., lo:lo + h, :])
            lo += h

    return _make(out, "concat_rows", tuple(parts), bw)


def expand_batch(x: Tensor, b: int) -> Tensor:
    """Repeat a leading-1 tensor b times along axis 0 (shared embeddings over a batch)."""
    if x.ndim < 1 or x.shape[0] != 1:
        raise ShapeError(f"expand_batch needs leading axis 1, got {x.shape}")
    out = np.ascontiguousarray(np.broadcast_to(x.data, (b,) + x.shape[1:]))

    def bw(g: np.ndarray) -> None:
        _accum(x, g.sum(axis=0, keepdims=True))

    return _make(out, "expand_batch", (x,), bw)


def max_last2(x: Tensor) -> Tensor:
    """Max over the trailing two axes, keepdims; subgradient goes to the first argmax."""
    if x.ndim < 2:
        raise ShapeError(f"max_last2 needs >=2-d input, got {x.shape}")
    flat = x.data.reshape(*x.shape[:-2], -1)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1).reshape(*x.shape[:-2], 1, 1)
    flops.add(x.data.size)

    def bw(g: np.ndarray) -> None:
        mask = np.zeros_like(flat)
        np.put_along_axis(mask, idx[..., None], 1.0, axis=-1)
        _accum(x, (mask * g.reshape(*x.shape[:-2], 1)).reshape(x.data.shape))

    return _make(out, "max_last2", (x,), bw)


def reciprocal(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):  # finite check reports instead
        out = 1.0 / x.data
    flops.add(out.size)

    def bw(g: np.ndarray) -> None:
        _accum(x, -g * out * out)

    return _make(out, "reciprocal", (x,), bw)


def scale_slices(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each trailing matrix slice of x by its scalar in s (shape x.shape[:-2] + (1,1))."""
    if s.shape != x.shape[:-2] + (1, 1):
        raise ShapeError(f"scale_slices needs scalars shaped {x.shape[:-2] + (1, 1)}, got {s.shape}")
    out = x.data * s.data
    flops.add(out.size)

    def bw(g: np.ndarray) -> None:
        _accum(x, g * s.data)
        _accum(s, (g * x.data).sum(axis=(-1, -2), keepdims=True))

    return _make(out, "scale_slices", (x, s), bw)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)
    flops.add(x.data.size)

    def bw(g: np.ndarray) -> None:
        _accum(x, np.broadcast_to(g, x.data.shape))

    return _make(out, "sum_all", (x,), bw)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.data.dtype)
    flops.add(n + 1)

    def bw(g: np.ndarray) -> None:
        _accum(x, np.broadcast_to(g / n, x.data.shape))

    return _make(out, "mean_all", (x,), bw)


def segment_mean(x: Tensor, m: int) -> Tensor:
    """Mean-pool the token axis (-2) into m contiguous segments.

    With N = q*m + r tokens the first r segments get q+1 tokens and the rest
    get q, so every token lands in exactly one segment.
    """
    n = x.shape[-2]
    if not (1 <= m <= n):
        raise ShapeError(f"segment_mean needs 1 <= m <= {n}, got m={m}")
    q, r = divmod(n, m)
    lengths = np.array([q + 1] * r + [q] * (m - r))
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    sums = np.add.reduceat(x.data, offsets, axis=-2)
    out = sums / lengths[:, None].astype(x.data.dtype)
    flops.add(x.data.size + out.size)

    def bw(g: np.ndarray) -> None:
        scaled = g / lengths[:, None]
        _accum(x, np.repeat(scaled, lengths, axis=-2))

    return _make(out, "segment_mean", (x,), bw)


# ---------------------------------------------------------------------------
# activations and fused ops


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    flops.add(out.size)

    def bw(g: np.ndarray) -> None:
        _accum(x, g * (x.data > 0))

    return _make(out, "relu", (x,), bw)


def elu_plus_one(x: Tensor) -> Tensor:
    """x+1 for x > 0, exp(x) otherwise; strictly positive everywhere."""
    pos = x.data > 0
    out = np.where(pos, x.data + 1.0, np.exp(np.minimum(x.data, 0.0)))
    out = out.astype(x.data.dtype, copy=False)
    flops.add(2 * out.size)

    def bw(g: np.ndarray) -> None:
        _accum(x, g * np.where(pos, 1.0, out).astype(x.data.dtype, copy=False))

    return _make(out, "elu_plus_one", (x,), bw)


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data).astype(x.data.dtype, copy=False)
    flops.add(3 * out.size)

    def bw(g: np.ndarray) -> None:
        sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
        _accum(x, g * sig)

    return _make(out, "softplus", (x,), bw)


def exp_capped(x: Tensor) -> Tensor:
    """exp with the argument clamped at EXP_CAP so float32 stays finite."""
    clipped = np.minimum(x.data, x.data.dtype.type(EXP_CAP))
    out = np.exp(clipped)
    flops.add(2 * out.size)

    def bw(g: np.ndarray) -> None:
        _accum(x, g * np.where(x.data <= EXP_CAP, out, 0.0).astype(x.data.dtype, copy=False))

    return _make(out, "exp_capped", (x,), bw)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation; exact erf is not worth a scipy dependency here
    c = x.data.dtype.type(np.sqrt(2.0 / np.pi))
    xd = x.data
    sq = xd * xd
    t = np.tanh(c * (xd + 0.044715 * (sq * xd)))
    out = (0.5 * xd * (1.0 + t)).astype(x.data.dtype, copy=False)
    flops.add(6 * out.size)

    def bw(g: np.ndarray) -> None:
        du = c * (1.0 + (3 * 0.044715) * sq)
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du
        _accum(x, (g * d).astype(x.data.dtype, copy=False))

    return _make(out, "gelu", (x,), bw)


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "elu_plus_one": elu_plus_one,
    "softplus": softplus,
    "exp": exp_capped,
}

# Elementwise flops charged per output element by each feature map, counting
# the comparison/add/exp work the forward pass actually does.
ACTIVATION_FLOPS: dict[str, int] = {
    "relu": 1,
    "elu_plus_one": 2,
    "softplus": 3,
    "exp": 2,
}


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax over the trailing axis (fused, numerically shifted)."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    flops.add(3 * out.size)

    def bw(g: np.ndarray) -> None:
        inner = (g * out).sum(axis=-1, keepdims=True)
        _accum(x, out * (g - inner))

    return _make(out, "softmax_rows", (x,), bw)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize the trailing axis to zero mean/unit variance, then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm affine params must be shape ({d},), got {gamma.shape}/{beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = (xhat * gamma.data + beta.data).astype(x.data.dtype, copy=False)
    flops.add(8 * out.size)

    def bw(g: np.ndarray) -> None:
        if gamma.requires_grad:
            _accum(gamma, _unbroadcast(g * xhat, gamma.data.shape).reshape(gamma.data.shape))
        if beta.requires_grad:
            _accum(beta, _unbroadcast(g, beta.data.shape).reshape(beta.data.shape))
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, (inv * (dxhat - m1 - xhat * m2)).astype(x.data.dtype, copy=False))

    return _make(out, "layernorm", (x, gamma, beta), bw)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [batch, classes] logits, got {logits.shape}")
    b, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ShapeError(f"cross_entropy expects {b} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ContractError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    m = logits.data.max(axis=-1, keepdims=True)
    shifted = logits.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True)) + m
    picked = logits.data[np.arange(b), labels][:, None]
    out = np.asarray((lse - picked).mean(), dtype=logits.data.dtype)
    flops.add(5 * logits.data.size)

    def bw(g: np.ndarray) -> None:
        p = np.exp(logits.data - lse)
        p[np.arange(b), labels] -= 1.0
        _accum(logits, (g * p / b).astype(logits.data.dtype, copy=False))

    return _make(out, "cross_entropy", (logits,), bw)


# ---------------------------------------------------------------------------
# randomness


class Rng:
    """Thin wrapper over a Philox stream.

    Philox is counter-based, so draws are identical across platforms and
    independent of how many threads numpy uses.  All floats are drawn in
    float64 and cast afterwards, making the stream itself independent of the
    global dtype mode.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def normal(self, shape: Sequence[int] | tuple = (), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(mean, std, size=tuple(shape)).astype(_default_dtype)

    def uniform(self, shape: Sequence[int] | tuple = (), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=tuple(shape)).astype(_default_dtype)

    def integers(self, low: int, high: int, shape: Sequence[int] | tuple = ()) -> np.ndarray:
        return self._gen.integers(low, high, size=tuple(shape))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def raw(self, n: int) -> bytes:
        return self._gen.bytes(n)


def leaf(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)
