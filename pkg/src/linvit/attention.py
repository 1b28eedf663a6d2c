"""Block-level attention operators over token sequences.

Seven interchangeable variants share one calling convention: the operator
receives the (already layer-normalized) token matrix X, projects it with
W_Q/W_K/W_V, runs a per-head core, concatenates heads, and applies W_O.
Inputs may carry leading batch axes; the token axis is always -2.

The linear variants never materialize the N×N score matrix.  They use the
associativity rewrite

    O_i = phi(Q_i) * S / (phi(Q_i) * z + eps),   S = sum_j phi(K_j)^T V_j,
                                                 z = sum_j phi(K_j)^T

which costs O(N * d_head^2) per head.  Every linear variant also has an
explicit O(N^2) twin (`*_explicit`) that does materialize the score matrix;
the twins exist purely as oracles for the rewrite and share the same epsilon
placement so the two routes are mathematically identical.

Conventions, applied uniformly:

* Q is scaled by 1/sqrt(d_head) before the feature map (or before the logits
  for softmax-style cores).  Pretrained teachers are trained with scaled
  attention, and stage-1 alignment needs the student to see the same
  statistics.
* denom_eps (default 1e-6) is added to every linear-attention denominator.
  relu-family maps can produce an exactly zero denominator; the epsilon
  rescues it and a warning is logged when that happens.
* Kernels are pure functions of (X, params); nothing here mutates state.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ContractError, ShapeError, Tensor

log = logging.getLogger(__name__)

VARIANTS = ("softmax", "vanilla_linear", "hedgehog", "performer", "cosformer", "linformer", "nystrom")
LINEAR_VARIANTS = ("vanilla_linear", "hedgehog", "performer", "cosformer", "linformer", "nystrom")
# variants with an explicit O(N^2) oracle form of the same computation
EXPLICIT_FORMS = ("vanilla_linear", "hedgehog", "performer", "cosformer")

DEFAULT_LANDMARKS = 32
PINV_ITERS = 6


@dataclass
class AttentionSpec:
    """Static description of one attention operator."""

    variant: str
    d_model: int
    heads: int
    feature_map: str = "elu_plus_one"  # vanilla_linear only
    landmarks: int | None = None  # nystrom; None means min(32, N) at call time
    proj_rank: int = 32  # linformer k
    rand_features: int = 64  # performer r
    seq_len_fixed: int | None = None  # linformer only
    seed: int = 0
    denom_eps: float = 1e-6
    pinv_iters: int = PINV_ITERS

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown attention variant {self.variant!r}, expected one of {VARIANTS}")
        if self.d_model <= 0 or self.heads <= 0:
            raise ContractError(f"d_model and heads must be positive, got {self.d_model}/{self.heads}")
        if self.d_model % self.heads != 0:
            raise ContractError(f"heads must divide d_model: {self.d_model} % {self.heads} != 0")
        if self.feature_map not in T.ACTIVATIONS:
            raise ContractError(f"unknown feature map {self.feature_map!r}, expected one of {sorted(T.ACTIVATIONS)}")
        if self.variant == "linformer":
            if self.seq_len_fixed is None or self.seq_len_fixed < 1:
                raise ContractError("linformer needs seq_len_fixed >= 1 (its projections are length-bound)")
            if self.proj_rank < 1:
                raise ContractError(f"linformer proj_rank must be >= 1, got {self.proj_rank}")
        if self.variant == "performer" and self.rand_features < 1:
            raise ContractError(f"performer rand_features must be >= 1, got {self.rand_features}")
        if self.landmarks is not None and self.landmarks < 1:
            raise ContractError(f"nystrom landmarks must be >= 1, got {self.landmarks}")
        if self.denom_eps <= 0:
            raise ContractError(f"denom_eps must be positive, got {self.denom_eps}")
        if self.pinv_iters < 1:
            raise ContractError(f"pinv_iters must be >= 1, got {self.pinv_iters}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    def nystrom_landmarks(self, n: int) -> int:
        m = min(DEFAULT_LANDMARKS, n) if self.landmarks is None else self.landmarks
        if m > n:
            raise ContractError(f"nystrom landmarks m={m} exceeds sequence length N={n}")
        return m


@dataclass
class AttentionParams:
    """Projections plus variant-specific extras.

    extras keys: "maps" (hedgehog, one [d_head, d_head] tensor per head),
    "omega" (performer, [r, d_head], frozen), "e"/"f" (linformer, [k, N]).
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    extras: dict = field(default_factory=dict)

    def named(self) -> Iterator[tuple[str, Tensor]]:
        yield "w_q", self.w_q
        yield "w_k", self.w_k
        yield "w_v", self.w_v
        yield "w_o", self.w_o
        for key in sorted(self.extras):
            val = self.extras[key]
            if isinstance(val, list):
                for i, t in enumerate(val):
                    yield f"{key}.{i}", t
            else:
                yield key, val

    def projection_tensors(self) -> list[Tensor]:
        return [self.w_q, self.w_k, self.w_v]

    def extra_trainables(self) -> list[Tensor]:
        out = []
        for key, val in self.extras.items():
            if key == "omega":  # frozen random features by contract
                continue
            out.extend(val if isinstance(val, list) else [val])
        return out


def init_attention_params(spec: AttentionSpec, rng: T.Rng, init_std: float = 0.02) -> AttentionParams:
    d = spec.d_model
    p = AttentionParams(
        w_q=T.param(rng.normal((d, d), std=init_std)),
        w_k=T.param(rng.normal((d, d), std=init_std)),
        w_v=T.param(rng.normal((d, d), std=init_std)),
        w_o=T.param(rng.normal((d, d), std=init_std)),
    )
    p.extras = init_extras(spec)
    return p


def init_extras(spec: AttentionSpec) -> dict:
    """Variant extras, generated from spec.seed so linearization is reproducible."""
    rng = T.Rng(spec.seed)
    dh = spec.d_head
    if spec.variant == "hedgehog":
        return {"maps": [T.param(np.eye(dh)) for _ in range(spec.heads)]}
    if spec.variant == "performer":
        omega = T.leaf(rng.normal((spec.rand_features, dh)), requires_grad=False)
        return {"omega": omega}
    if spec.variant == "linformer":
        n = spec.seq_len_fixed
        std = 1.0 / math.sqrt(n)
        return {
            "e": T.param(rng.normal((spec.proj_rank, n), std=std)),
            "f": T.param(rng.normal((spec.proj_rank, n), std=std)),
        }
    return {}


# ---------------------------------------------------------------------------
# shared pieces


def _qkv(x: Tensor, p: AttentionParams, spec: AttentionSpec) -> tuple[Tensor, Tensor, Tensor]:
    if x.shape[-1] != spec.d_model:
        raise ShapeError(f"input width {x.shape[-1]} does not match d_model {spec.d_model}")
    q = T.matmul(x, p.w_q)
    k = T.matmul(x, p.w_k)
    v = T.matmul(x, p.w_v)
    q = T.mul_scalar(q, 1.0 / math.sqrt(spec.d_head))
    return q, k, v


def _heads(t: Tensor, h: int) -> list[Tensor]:
    d = t.shape[-1] // h
    return [T.slice_cols(t, i * d, (i + 1) * d) for i in range(h)]


def _ones_col(n: int, dtype) -> Tensor:
    return T.leaf(np.ones((n, 1), dtype=dtype))


def _eps_guard(den: Tensor, eps: float, variant: str) -> Tensor:
    lowest = float(den.data.min())
    if lowest <= 0.0:
        log.warning("%s denominator reached %.3e; epsilon rescue applied", variant, lowest)
    return T.add_scalar(den, eps)


def _reordered_core(phi_q: Tensor, phi_k: Tensor, v: Tensor, eps: float, variant: str) -> Tensor:
    n = phi_k.shape[-2]
    s = T.matmul(T.transpose_last(phi_k), v)
    z = T.matmul(T.transpose_last(phi_k), _ones_col(n, phi_k.data.dtype))
    den = _eps_guard(T.matmul(phi_q, z), eps, variant)
    return T.div_rows(T.matmul(phi_q, s), den)


def _explicit_core(phi_q: Tensor, phi_k: Tensor, v: Tensor, eps: float,
                   reweight: np.ndarray | None = None) -> Tensor:
    n = phi_k.shape[-2]
    a = T.matmul(phi_q, T.transpose_last(phi_k))
    if reweight is not None:
        w = T.leaf(np.broadcast_to(reweight.astype(a.data.dtype), a.shape).copy())
        a = T.mul(a, w)
    den = _eps_guard(T.matmul(a, _ones_col(n, a.data.dtype)), eps, "explicit")
    return T.div_rows(T.matmul(a, v), den)


def _per_head(x: Tensor, p: AttentionParams, spec: AttentionSpec, core) -> Tensor:
    q, k, v = _qkv(x, p, spec)
    outs = [core(qh, kh, vh, i)
            for i, (qh, kh, vh) in enumerate(zip(_heads(q, spec.heads),
                                                 _heads(k, spec.heads),
                                                 _heads(v, spec.heads)))]
    return T.matmul(T.concat_cols(outs), p.w_o)


# ---------------------------------------------------------------------------
# variants


def softmax_attention(x: Tensor, p: AttentionParams, spec: AttentionSpec) -> Tensor:
    def core(qh, kh, vh, _i):
        a = T.softmax_rows(T.matmul(qh, T.transpose_last(kh)))
        return T.matmul(a, vh)

    return _per_head(x, p, spec, core)


def linear_attention(x: Tensor, p: AttentionParams, spec: AttentionSpec) -> Tensor:
    fmap = T.ACTIVATIONS[spec.feature_map]

    def core(qh, kh, vh, _i):
        return _reordered_core(fmap(qh), fmap(kh), vh, spec.denom_eps, "vanilla_linear")

    return _per_head(x, p, spec, core)


def linear_attention_explicit(x: Tensor, p: AttentionParams, spec: AttentionSpec) -> Tensor:
    """O(N^2) oracle: materializes phi(Q) phi(K)^T, row-normalizes, multiplies by V."""
    fmap = T.ACTIVATIONS[spec.feature_map]

    def core(qh, kh, vh, _i):
        return _explicit_core(fmap(qh), fmap(kh), vh, spec.denom_eps)

    return _per_head(x, p, spec, core)


def _hedgehog_phi(t: Tensor, m: Tensor) -> Tensor:
    u = T.matmul(t, T.transpose_last(m))
    return T.concat_cols([T.softmax_rows(u), T.softmax_rows(T.mul_scalar(u, -1.0))])


def hedgehog_attention(x: Tensor, p: AttentionParams, spec: AttentionSpec) -> Tensor:
    maps = p.extras["maps"]

    def core(qh, kh, vh, i):
        return _reordered_core(_hedgehog_phi(qh, maps[i]), _hedgehog_phi(kh, maps[i]),
                               vh, spec.denom_eps, "hedgehog")

    return _per_head(x, p, spec, core)


def hedgehog_attention_explicit(x: Tensor, p: AttentionParams, spec: AttentionSpec) -> Tensor:
    maps = p.extras["maps"]

    def core(qh, kh, vh, i):
        return _explicit_core(_hedgehog_phi(qh, maps[i]), _hedgehog_phi(kh, maps[i]),
                              vh, spec.denom_eps)

    return _per_head(x, p, spec, core)


def performer_features(t: Tensor, omega: Tensor) -> Tensor:
    """Positive random features phi(x) = exp(omega x - |x|^2/2) / sqrt(r)."""
    r, d = omega.shape
    if t.shape[-1] != d:
        raise ShapeError(f"performer features need width {d}, got {t.shape[-1]}")
    proj = T.matmul(t, T.transpose_last(omega))
    sqnorm = T.matmul(T.mul(t, t), _ones_col(d, t.data.dtype))
    arg = T.shift_rows(proj, T.mul_scalar(sqnorm, -0.5))
    return T.mul_scalar(T.exp_capped(arg), 1.0 / math.sqrt(r))


def performer_attention(x: Tensor, p: AttentionParams, spec: AttentionSpec) -> Tensor:
    omega = p.extras["omega"]

    def core(qh, kh, vh, _i):
        return _reordered_core(performer_features(qh, omega), performer_features(kh, omega),
                               vh, spec.denom_eps, "performer")

    return _per_head(x, p, spec, core)


def performer_attention_explicit(x: Tensor, p: AttentionParams, spec: AttentionSpec) -> Tensor:
    omega = p.extras["omega"]

    def core(qh, kh, vh, _i):
        return _explicit_core(performer_features(qh, omega), performer_features(kh, omega),
                              vh, spec.denom_eps)

    return _per_head(x, p, spec, core)


def _cos_sin_cols(n: int, lead_shape: tuple[int, ...], dtype) -> tuple[Tensor, Tensor]:
    # reweighting period M = runtime N (non-causal bidirectional usage)
    theta = np.pi * np.arange(n, dtype=np.float64) / (2.0 * n)
    cos = np.broadcast_to(np.cos(theta)[:, None].astype(dtype), lead_shape + (n, 1)).copy()
    sin = np.broadcast_to(np.sin(theta)[:, None].astype(dtype), lead_shape + (n, 1)).copy()
    return T.leaf(cos), T.leaf(sin)


def cosformer_attention(x: Tensor, p: AttentionParams, spec: AttentionSpec) -> Tensor:
    """relu features with score reweighting cos(pi*(i-j)/2M), M = N.

    cos(a-b) = cos a cos b + sin a sin b splits the reweighted score matrix
    into two rank-d branches, each computable with the linear reordering; the
    branch numerators and denominators are summed before normalizing.
    """
    n = x.shape[-2]

    def core(qh, kh, vh, _i):
        cos, sin = _cos_sin_cols(n, qh.shape[:-2], qh.data.dtype)
        pq, pk = T.relu(qh), T.relu(kh)
        qc, qs = T.scale_rows(pq, cos), T.scale_rows(pq, sin)
        kc, ks = T.scale_rows(pk, cos), T.scale_rows(pk, sin)
        ones = _ones_col(n, qh.data.dtype)
        num = T.add(T.matmul(qc, T.matmul(T.transpose_last(kc), vh)),
                    T.matmul(qs, T.matmul(T.transpose_last(ks), vh)))
        den = T.add(T.matmul(qc, T.matmul(T.transpose_last(kc), ones)),
                    T.matmul(qs, T.matmul(T.transpose_last(ks), ones)))
        return T.div_rows(num, _eps_guard(den, spec.denom_eps, "cosformer"))

    return _per_head(x, p, spec, core)


def cosformer_attention_explicit(x: Tensor, p: AttentionParams, spec: AttentionSpec) -> Tensor:
    """Quadratic oracle with the cos(pi*(i-j)/2M) reweighting materialized directly."""
    n = x.shape[-2]
    idx = np.arange(n, dtype=np.float64)
    reweight = np.cos(np.pi * (idx[:, None] - idx[None, :]) / (2.0 * n))

    def core(qh, kh, vh, _i):
        return _explicit_core(T.relu(qh), T.relu(kh), vh, spec.denom_eps, reweight=reweight)

    return _per_head(x, p, spec, core)


def linformer_attention(x: Tensor, p: AttentionParams, spec: AttentionSpec) -> Tensor:
    n = x.shape[-2]
    if n != spec.seq_len_fixed:
        raise ShapeError(
            f"linformer was configured for sequence length {spec.seq_len_fixed} but got {n}; "
            "its learned projections cannot be reused across lengths")
    e, f = p.extras["e"], p.extras["f"]

    def core(qh, kh, vh, _i):
        a = T.softmax_rows(T.matmul(qh, T.transpose_last(T.matmul(e, kh))))
        return T.matmul(a, T.matmul(f, vh))

    return _per_head(x, p, spec, core)


def nystrom_attention(x: Tensor, p: AttentionParams, spec: AttentionSpec) -> Tensor:
    """Landmark softmax reconstruction: F1 * pinv(A) * F3 * V.

    Landmarks are means of m contiguous token segments of (scaled) Q and K;
    F1 = softmax(Q Kl^T), A = softmax(Ql Kl^T), F3 = softmax(Ql K^T).
    """
    n = x.shape[-2]
    m = spec.nystrom_landmarks(n)

    def core(qh, kh, vh, _i):
        ql, kl = T.segment_mean(qh, m), T.segment_mean(kh, m)
        f1 = T.softmax_rows(T.matmul(qh, T.transpose_last(kl)))
        a = T.softmax_rows(T.matmul(ql, T.transpose_last(kl)))
        f3 = T.softmax_rows(T.matmul(ql, T.transpose_last(kh)))
        z = iterative_pinv(a, spec.pinv_iters)
        return T.matmul(f1, T.matmul(z, T.matmul(f3, vh)))

    return _per_head(x, p, spec, core)


def iterative_pinv(a: Tensor, iters: int = PINV_ITERS) -> Tensor:
    """Moore-Penrose pseudo-inverse by the cubic Newton-Schulz style iteration.

    Z0 = A^T / (|A|_1 * |A|_inf), then iters rounds of
    Z <- 1/4 * Z (13 I - A Z (15 I - A Z (7 I - A Z))).
    Expects entries in [0, 1] (row-stochastic-like), so column/row sums serve
    as the norms without taking absolute values.
    """
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"iterative_pinv needs square trailing axes, got {a.shape}")
    if iters < 1:
        raise ContractError(f"iterative_pinv needs iters >= 1, got {iters}")
    m = a.shape[-1]
    ones = _ones_col(m, a.data.dtype)
    col_sums = T.matmul(T.transpose_last(a), ones)
    row_sums = T.matmul(a, ones)
    scale = T.reciprocal(T.mul(T.max_last2(col_sums), T.max_last2(row_sums)))
    z = T.scale_slices(T.transpose_last(a), scale)
    eye = np.eye(m, dtype=a.data.dtype)
    i7 = T.leaf(np.broadcast_to(7.0 * eye, a.shape).copy())
    i15 = T.leaf(np.broadcast_to(15.0 * eye, a.shape).copy())
    i13 = T.leaf(np.broadcast_to(13.0 * eye, a.shape).copy())
    for it in range(iters):
        try:
            az = T.matmul(a, z)
            inner = T.sub(i15, T.matmul(az, T.sub(i7, az)))
            z = T.mul_scalar(T.matmul(z, T.sub(i13, T.matmul(az, inner))), 0.25)
        except T.NumericError as exc:
            raise T.NumericError(f"iterative_pinv produced non-finite values at iteration {it}") from exc
    return z


_DISPATCH = {
    "softmax": softmax_attention,
    "vanilla_linear": linear_attention,
    "hedgehog": hedgehog_attention,
    "performer": performer_attention,
    "cosformer": cosformer_attention,
    "linformer": linformer_attention,
    "nystrom": nystrom_attention,
}

_EXPLICIT_DISPATCH = {
    "vanilla_linear": linear_attention_explicit,
    "hedgehog": hedgehog_attention_explicit,
    "performer": performer_attention_explicit,
    "cosformer": cosformer_attention_explicit,
}


def attend(x: Tensor, p: AttentionParams, spec: AttentionSpec) -> Tensor:
    return _DISPATCH[spec.variant](x, p, spec)


def attend_explicit(x: Tensor, p: AttentionParams, spec: AttentionSpec) -> Tensor:
    if spec.variant not in _EXPLICIT_DISPATCH:
        raise ContractError(f"no explicit O(N^2) form for variant {spec.variant!r}")
    return _EXPLICIT_DISPATCH[spec.variant](x, p, spec)
