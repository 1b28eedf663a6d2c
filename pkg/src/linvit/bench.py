"""Analytic cost models, wall-clock sweeps, the crossover check, and PCA imaging.

FLOP model
----------
2 flops per multiply-add; exp, div, sqrt and comparisons count 1 each.  With
N tokens, model width D, H heads, d = D/H, and variant parameters r (random
features), k (projection rank), m (landmarks), the documented counts are:

    projections (all variants):  8*N*D^2        (W_Q, W_K, W_V, W_O)
    query scaling:               N*D            (1/sqrt(d) multiply)

    softmax core:        4*N^2*D + 3*N^2*H
    vanilla-linear core: 4*N*d^2*H + 6*N*d*H + c_phi*N*D
    hedgehog core:       12*N*d^2*H + 23*N*d*H + N*H
    performer core:      8*N*d*r*H + 7*N*d*H + 12*N*r*H + 3*N*H
    cosformer core:      8*N*d^2*H + 16*N*d*H + 2*N*H
    linformer core:      8*N*k*d*H + 3*N*k*H
    nystrom core:        H * (8*N*m*d + 2*N*d + 6*N*m + 4*m^2*d + 2*m*d
                              + 8*I*m^3 + (4*I+8)*m^2 + 2*m + 2),  I pinv iters

c_phi charges the elementwise feature map over both Q and K: relu 2,
elu_plus_one 4, softplus 6, exp 4 per element of D.  The instrumented
multiply-add counters in the kernels agree with these formulas within 5%
(the vanilla normalizer is 6*N*d*H in the model vs 5*N*d*H + N*H executed;
everything else matches exactly).

Peak-activation model
---------------------
An analytic liveness model over 4-byte elements, not process RSS.  Every
variant holds Q, K, V (3*N*D*4 bytes).  On top of that:

    softmax:    the N x N x H score matrix, 4*N^2*H bytes
    vanilla:    phi(Q), phi(K) (2*N*D*4) + the d x d x H state (4*d^2*H)
    hedgehog:   phi width 2d: 4*N*D*4 + state 8*d^2*H
    performer:  phi(Q), phi(K) in r features (2*N*r*H*4) + state 4*r*d*H
    cosformer:  two branches of phi pairs (4*N*D*4) + state 8*d^2*H
    linformer:  N x k x H scores (4*N*k*H) + state (E K, F V) 8*k*d*H
    nystrom:    N x m x H landmark scores (8*N*m*H for F1, F3) + state
                (landmarks + pinv matrices) (2*m*d + 3*m^2)*H*4

"State" is the sequence-length-independent reduced structure; it is constant
in N for every linear variant, while the softmax score term is exactly
quadratic (doubling N quadruples it).

The crossover check compares core formulas only; projections are shared by
both sides and cancel.  Sweeps time the attention operator (projections
included) single-threaded, batch 1, H = D/64.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .attention import AttentionSpec, attend, init_attention_params
from .tensor import ContractError, ShapeError, Tensor

log = logging.getLogger(__name__)

BYTES = 4  # the liveness model accounts in F32
C_PHI = {"relu": 2, "elu_plus_one": 4, "softplus": 6, "exp": 4}

SWEEP_DEFAULT_NS = (512, 1024, 2048, 4096)


def _extras(extras: dict | None) -> dict:
    out = {"feature_map": "elu_plus_one", "landmarks": None, "proj_rank": 32,
           "rand_features": 64, "pinv_iters": 6}
    if extras:
        unknown = set(extras) - set(out)
        if unknown:
            raise ContractError(f"unknown cost-model extras {sorted(unknown)}")
        out.update(extras)
    return out


def _landmarks(ex: dict, n: int) -> int:
    m = min(32, n) if ex["landmarks"] is None else ex["landmarks"]
    if m > n:
        raise ContractError(f"landmarks m={m} exceeds N={n}")
    return m


def flops_breakdown(variant: str, n: int, d_model: int, h: int, extras: dict | None = None) -> dict[str, int]:
    """Named components of the analytic FLOP count; 'total' sums them."""
    if d_model % h != 0:
        raise ContractError(f"heads {h} must divide d_model {d_model}")
    ex = _extras(extras)
    d = d_model // h
    out = {"projections": 8 * n * d_model * d_model, "q_scale": n * d_model}
    if variant == "softmax":
        out["core"] = 4 * n * n * d_model + 3 * n * n * h
    elif variant == "vanilla_linear":
        out["core_state"] = 4 * n * d * d * h
        out["core_normalizer"] = 6 * n * d * h
        out["core_feature_map"] = C_PHI[ex["feature_map"]] * n * d_model
        out["core"] = out["core_state"] + out["core_normalizer"] + out["core_feature_map"]
    elif variant == "hedgehog":
        out["core"] = 12 * n * d * d * h + 23 * n * d * h + n * h
    elif variant == "performer":
        r = ex["rand_features"]
        out["core"] = 8 * n * d * r * h + 7 * n * d * h + 12 * n * r * h + 3 * n * h
    elif variant == "cosformer":
        out["core"] = 8 * n * d * d * h + 16 * n * d * h + 2 * n * h
    elif variant == "linformer":
        k = ex["proj_rank"]
        out["core"] = 8 * n * k * d * h + 3 * n * k * h
    elif variant == "nystrom":
        m = _landmarks(ex, n)
        it = ex["pinv_iters"]
        out["core"] = h * (8 * n * m * d + 2 * n * d + 6 * n * m + 4 * m * m * d + 2 * m * d
                           + 8 * it * m ** 3 + (4 * it + 8) * m * m + 2 * m + 2)
    else:
        raise ContractError(f"unknown variant {variant!r}")
    out["total"] = out["projections"] + out["q_scale"] + out["core"]
    return out


def flops_attention(variant: str, n: int, d_model: int, h: int, extras: dict | None = None) -> int:
    return flops_breakdown(variant, n, d_model, h, extras)["total"]


def peak_activation_breakdown(variant: str, n: int, d_model: int, h: int,
                              extras: dict | None = None) -> dict[str, int]:
    """Named byte counts of the largest simultaneously-live intermediates."""
    ex = _extras(extras)
    d = d_model // h
    out = {"qkv": 3 * n * d_model * BYTES}
    if variant == "softmax":
        out["score"] = 4 * n * n * h
    elif variant == "vanilla_linear":
        out["features"] = 2 * n * d_model * BYTES
        out["state"] = 4 * d * d * h
    elif variant == "hedgehog":
        out["features"] = 4 * n * d_model * BYTES
        out["state"] = 8 * d * d * h
    elif variant == "performer":
        r = ex["rand_features"]
        out["features"] = 2 * n * r * h * BYTES
        out["state"] = r * d * h * BYTES
    elif variant == "cosformer":
        out["features"] = 4 * n * d_model * BYTES
        out["state"] = 8 * d * d * h
    elif variant == "linformer":
        k = ex["proj_rank"]
        out["score"] = 4 * n * k * h
        out["state"] = 8 * k * d * h
    elif variant == "nystrom":
        m = _landmarks(ex, n)
        out["score"] = 8 * n * m * h
        out["state"] = (2 * m * d + 3 * m * m) * h * BYTES
    else:
        raise ContractError(f"unknown variant {variant!r}")
    out["total"] = sum(v for key, v in out.items())
    return out


def peak_activation_bytes(variant: str, n: int, d_model: int, h: int, extras: dict | None = None) -> int:
    return peak_activation_breakdown(variant, n, d_model, h, extras)["total"]


def crossover_check(n: int, d_model: int, h: int, feature_map: str = "elu_plus_one") -> str:
    """Compare core FLOP formulas (shared projections excluded); ties go to linear."""
    if h < 1:
        raise ContractError(f"need h >= 1, got {h}")
    softmax_core = flops_breakdown("softmax", n, d_model, h)["core"]
    linear_core = flops_breakdown("vanilla_linear", n, d_model, h,
                                  {"feature_map": feature_map})["core"]
    return "linear_cheaper" if linear_core <= softmax_core else "softmax_cheaper"


# ---------------------------------------------------------------------------
# wall-clock sweep


@dataclass
class BenchRecord:
    variant: str
    n: int
    d: int
    h: int
    flops: int
    peak_bytes: int
    wall_seconds: float
    throughput: float


def _bench_spec(variant: str, n: int, d_model: int, h: int, seed: int) -> AttentionSpec:
    kw = {}
    if variant == "linformer":
        kw["seq_len_fixed"] = n
    return AttentionSpec(variant, d_model, h, seed=seed, **kw)


def _spec_extras(spec: AttentionSpec) -> dict:
    return {"feature_map": spec.feature_map, "landmarks": spec.landmarks,
            "proj_rank": spec.proj_rank, "rand_features": spec.rand_features,
            "pinv_iters": spec.pinv_iters}


def time_attention(variant: str, n: int, d_model: int, h: int, reps: int = 5,
                   seed: int = 0) -> float:
    """Median wall time of one batch-1 attention call after 2 warmups, single-threaded."""
    if reps < 1:
        raise ContractError(f"need reps >= 1, got {reps}")
    spec = _bench_spec(variant, n, d_model, h, seed)
    params = init_attention_params(spec, T.Rng(seed))
    x = T.leaf(T.Rng(seed + 1).normal((n, d_model)))
    while True:
        with threadpool_limits(limits=1), T.no_grad():
            for _ in range(2):
                attend(x, params, spec)
            times = []
            for _ in range(reps):
                t0 = time.perf_counter()
                attend(x, params, spec)
                times.append(time.perf_counter() - t0)
        wall = float(np.median(times))
        if wall >= 1e-6 or reps >= 640:
            return wall
        reps *= 2  # timer resolution guard; rerun with more repetitions
        log.info("wall time %.3g s below timer resolution, raising reps to %d", wall, reps)


def sweep(variants: list[str], ns: list[int], reps: int = 5, d_model: int = 64,
          seed: int = 0) -> list[BenchRecord]:
    if list(ns) != sorted(ns):
        raise ContractError(f"sweep lengths must be ascending, got {ns}")
    h = max(1, d_model // 64)
    records = []
    for variant in variants:
        for n in ns:
            spec = _bench_spec(variant, n, d_model, h, seed)
            ex = _spec_extras(spec)
            wall = time_attention(variant, n, d_model, h, reps, seed)
            records.append(BenchRecord(
                variant=variant, n=n, d=d_model, h=h,
                flops=flops_attention(variant, n, d_model, h, ex),
                peak_bytes=peak_activation_bytes(variant, n, d_model, h, ex),
                wall_seconds=wall, throughput=1.0 / wall))
            log.info("bench %s N=%d: %.4g s", variant, n, wall)
    return records


def records_to_csv(records: list[BenchRecord], path) -> None:
    lines = ["# attention-only sweep: batch=1, H=D/64, single-threaded",
             "variant,N,D,H,flops,peak_bytes,wall_seconds,throughput"]
    for r in records:
        lines.append(f"{r.variant},{r.n},{r.d},{r.h},{r.flops},{r.peak_bytes},"
                     f"{r.wall_seconds:.9g},{r.throughput:.9g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def loglog_slope(xs, ys) -> float:
    """Least-squares slope of log(y) against log(x)."""
    lx, ly = np.log(np.asarray(xs, dtype=np.float64)), np.log(np.asarray(ys, dtype=np.float64))
    lx = lx - lx.mean()
    return float((lx * (ly - ly.mean())).sum() / (lx * lx).sum())


# ---------------------------------------------------------------------------
# SVG charts (hand-rolled: deterministic output, no plotting dependency)

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def chart_svg(records: list[BenchRecord], metric: str, path) -> None:
    """One log-log line chart of `metric` against N, one polyline per variant."""
    by_variant: dict[str, list[BenchRecord]] = {}
    for r in records:
        by_variant.setdefault(r.variant, []).append(r)
    pts = [(r.n, getattr(r, metric)) for r in records]
    if not pts or any(v <= 0 for _, v in pts):
        raise ContractError(f"cannot log-plot nonpositive {metric} values")
    w, hgt, ml, mb, mt, mr = 640, 420, 70, 50, 20, 150
    xs = [math.log10(n) for n, _ in pts]
    ys = [math.log10(v) for _, v in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    x1 += 1e-9 if x1 == x0 else 0
    y1 += 1e-9 if y1 == y0 else 0

    def px(x): return ml + (x - x0) / (x1 - x0) * (w - ml - mr)

    def py(y): return hgt - mb - (y - y0) / (y1 - y0) * (hgt - mb - mt)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{hgt}">',
             f'<rect width="{w}" height="{hgt}" fill="white"/>',
             f'<line x1="{ml}" y1="{hgt - mb}" x2="{w - mr}" y2="{hgt - mb}" stroke="black"/>',
             f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{hgt - mb}" stroke="black"/>',
             f'<text x="{(ml + w - mr) / 2}" y="{hgt - 12}" text-anchor="middle" font-size="13">N (log)</text>',
             f'<text x="16" y="{(mt + hgt - mb) / 2}" font-size="13" '
             f'transform="rotate(-90 16 {(mt + hgt - mb) / 2})" text-anchor="middle">{metric} (log)</text>']
    for i, (variant, recs) in enumerate(sorted(by_variant.items())):
        color = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{px(math.log10(r.n)):.1f},{py(math.log10(getattr(r, metric))):.1f}"
                          for r in sorted(recs, key=lambda r: r.n))
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = mt + 16 + 18 * i
        parts.append(f'<line x1="{w - mr + 8}" y1="{ly - 4}" x2="{w - mr + 28}" y2="{ly - 4}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{w - mr + 34}" y="{ly}" font-size="12">{variant}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


# ---------------------------------------------------------------------------
# PCA feature visualization


@dataclass
class PcaImage:
    width: int
    height: int
    rgb: bytes  # row-major, 3 bytes per pixel

    def to_ppm(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(f"P6\n{self.width} {self.height}\n255\n".encode())
            fh.write(self.rgb)


def power_iteration(cov: np.ndarray, iters: int = 100, tol: float = 1e-7) -> tuple[float, np.ndarray]:
    """Dominant eigenpair of a symmetric PSD matrix; deterministic seeded start."""
    d = cov.shape[0]
    v = T.Rng(0x9CA1).normal((d,)).astype(np.float64)
    v /= np.linalg.norm(v)
    for _ in range(iters):
        nxt = cov @ v
        norm = np.linalg.norm(nxt)
        if norm == 0.0:
            return 0.0, v
        nxt /= norm
        if np.abs(nxt - v).max() < tol or np.abs(nxt + v).max() < tol:
            v = nxt
            break
        v = nxt
    return float(v @ cov @ v), v


def pca_rgb(features, grid_w: int, grid_h: int) -> PcaImage:
    """Project token features onto their top-3 principal axes as an RGB patch grid."""
    feats = features.data if isinstance(features, Tensor) else np.asarray(features)
    if feats.ndim != 2:
        raise ShapeError(f"pca_rgb expects [N_patch, D] features, got shape {feats.shape}")
    n, d = feats.shape
    if n != grid_w * grid_h:
        raise ShapeError(f"{n} patch tokens do not fill a {grid_w}x{grid_h} grid")
    x = feats.astype(np.float64)
    x = x - x.mean(axis=0, keepdims=True)
    cov = (x.T @ x) / max(n - 1, 1)
    trace0 = float(np.trace(cov))
    channels = []
    for c in range(3):
        lam, vec = power_iteration(cov)
        if trace0 <= 0.0 or lam <= 1e-12 * max(trace0, 1.0):
            log.warning("PCA channel %d has no variance left; rendering gray", c)
            channels.append(np.full(n, 128, dtype=np.uint8))
            continue
        if vec[np.argmax(np.abs(vec))] < 0:  # canonical sign: largest loading positive
            vec = -vec
        proj = x @ vec
        lo, hi = proj.min(), proj.max()
        if hi - lo < 1e-12:
            log.warning("PCA channel %d projection is constant; rendering gray", c)
            channels.append(np.full(n, 128, dtype=np.uint8))
        else:
            channels.append(np.round((proj - lo) / (hi - lo) * 255.0).astype(np.uint8))
        cov = cov - lam * np.outer(vec, vec)
    rgb = np.stack(channels, axis=-1).reshape(grid_h, grid_w, 3)
    return PcaImage(width=grid_w, height=grid_h, rgb=rgb.tobytes())
