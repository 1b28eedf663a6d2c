"""Attention kernels: reordering identity, oracles, invariances, cost ratios."""
import numpy as np
import pytest

from linvit import tensor as T
from linvit.attention import (
    EXPLICIT_FORMS,
    LINEAR_VARIANTS,
    VARIANTS,
    AttentionSpec,
    attend,
    attend_explicit,
    init_attention_params,
    iterative_pinv,
    performer_features,
    softmax_attention,
)
from linvit.tensor import ContractError, NumericError, ShapeError


@pytest.fixture(autouse=True)
def _f32_default():
    T.set_default_dtype("f32")
    yield
    T.set_default_dtype("f32")


def make(variant, n, d_model=8, heads=2, seed=0, **kw):
    if variant == "linformer":
        kw.setdefault("seq_len_fixed", n)
        kw.setdefault("proj_rank", min(4, n))
    if variant == "performer":
        kw.setdefault("rand_features", 8)
    spec = AttentionSpec(variant, d_model, heads, seed=seed + 50, **kw)
    params = init_attention_params(spec, T.Rng(seed))
    x = T.leaf(T.Rng(seed + 1000).normal((n, d_model)))
    return x, params, spec


# ---------------------------------------------------------------------------
# reordering identity (full acceptance grid lives in test_acceptance)


@pytest.mark.parametrize("variant", EXPLICIT_FORMS)
@pytest.mark.parametrize("dtype,tol", [("f32", 1e-4), ("f64", 1e-10)])
def test_reordered_equals_explicit_quadratic(variant, dtype, tol):
    with T.using_dtype(dtype):
        for seed in range(3):
            x, params, spec = make(variant, n=9, seed=seed)
            with T.no_grad():
                fast = attend(x, params, spec).data
                slow = attend_explicit(x, params, spec).data
            assert np.abs(fast - slow).max() < tol


def test_explicit_form_only_for_reordering_family():
    x, params, spec = make("nystrom", n=6)
    with pytest.raises(ContractError):
        attend_explicit(x, params, spec)


# ---------------------------------------------------------------------------
# permutation equivariance (and its deliberate absence)


def _perm_gap(variant, n=10, seed=3, **kw):
    x, params, spec = make(variant, n=n, seed=seed, **kw)
    for w in (params.w_q, params.w_k):  # lift logits out of the near-uniform regime
        w.data *= 40.0
    perm = T.Rng(99).permutation(n)
    with T.no_grad():
        base = attend(x, params, spec).data
        shuffled = attend(T.leaf(x.data[perm]), params, spec).data
    return float(np.abs(shuffled - base[perm]).max())


@pytest.mark.parametrize("variant", ["softmax", "vanilla_linear", "hedgehog", "performer"])
def test_position_free_variants_are_permutation_equivariant(variant):
    assert _perm_gap(variant) < 1e-5


@pytest.mark.parametrize("variant,kw", [
    ("cosformer", {}),            # position-dependent cosine reweighting
    ("nystrom", {"landmarks": 3}),  # contiguous segment landmarks
    ("linformer", {}),            # fixed projections mix token positions
])
def test_position_dependent_variants_are_not_equivariant(variant, kw):
    assert _perm_gap(variant, **kw) > 1e-3


# ---------------------------------------------------------------------------
# closed-form identities


@pytest.mark.parametrize("variant,tol", [
    ("softmax", 1e-10), ("nystrom", 1e-10),        # exact single-token reduction
    ("vanilla_linear", 1e-5), ("hedgehog", 1e-5),  # bounded by the denominator epsilon
    ("performer", 1e-5), ("cosformer", 1e-5),
])
def test_single_token_attends_to_itself(variant, tol):
    with T.using_dtype("f64"):
        x, params, spec = make(variant, n=1)
        x = T.leaf(np.abs(x.data) + 0.1)
        for w in (params.w_q, params.w_k):  # nonneg features keep relu maps awake
            w.data = np.abs(w.data)
        with T.no_grad():
            out = attend(x, params, spec).data
            v = (x.data @ params.w_v.data) @ params.w_o.data
        assert np.abs(out - v).max() < tol


@pytest.mark.parametrize("variant", ["softmax", "vanilla_linear"])
def test_zero_keys_give_uniform_attention(variant):
    with T.using_dtype("f64"):
        x, params, spec = make(variant, n=7)  # vanilla uses elu_plus_one: phi(0) = 1
        params.w_k.data[:] = 0.0
        with T.no_grad():
            out = attend(x, params, spec).data
        mean_v = (x.data @ params.w_v.data).mean(axis=0, keepdims=True)
        want = np.repeat(mean_v, 7, axis=0) @ params.w_o.data
        assert np.abs(out - want).max() < 1e-9


def test_hedgehog_zero_maps_give_uniform_attention():
    with T.using_dtype("f64"):
        x, params, spec = make("hedgehog", n=6)
        for m in params.extras["maps"]:
            m.data[:] = 0.0
        with T.no_grad():
            out = attend(x, params, spec).data
        mean_v = (x.data @ params.w_v.data).mean(axis=0, keepdims=True)
        want = np.repeat(mean_v, 6, axis=0) @ params.w_o.data
        assert np.abs(out - want).max() < 1e-9


def test_performer_features_at_zero_are_inverse_sqrt_r():
    with T.using_dtype("f64"):
        omega = T.leaf(T.Rng(3).normal((16, 4)))
        phi = performer_features(T.leaf(np.zeros((5, 4))), omega).data
    assert np.abs(phi - 1.0 / 4.0).max() < 1e-12  # 1/sqrt(16)


def test_hedgehog_uses_one_map_per_head_shared_by_q_and_k():
    _, params, spec = make("hedgehog", n=4, d_model=8, heads=2)
    maps = params.extras["maps"]
    assert len(maps) == spec.heads
    for m in maps:
        assert m.shape == (spec.d_head, spec.d_head)
        assert np.array_equal(m.data, np.eye(spec.d_head, dtype=m.data.dtype))


def test_performer_omega_is_frozen():
    _, params, _ = make("performer", n=4)
    assert not params.extras["omega"].requires_grad
    assert all(t is not params.extras["omega"] for t in params.extra_trainables())


def test_performer_omega_depends_on_spec_seed_only():
    _, p1, _ = make("performer", n=4, seed=0)
    _, p2, _ = make("performer", n=4, seed=0)
    assert np.array_equal(p1.extras["omega"].data, p2.extras["omega"].data)


# ---------------------------------------------------------------------------
# softmax-recovery oracles


def test_nystrom_with_all_landmarks_matches_softmax():
    with T.using_dtype("f64"):
        x, params, spec = make("nystrom", n=8, landmarks=8)
        soft_spec = AttentionSpec("softmax", spec.d_model, spec.heads, seed=spec.seed)
        with T.no_grad():
            ny = attend(x, params, spec).data
            soft = softmax_attention(x, params, soft_spec).data
        assert np.abs(ny - soft).max() < 1e-2


def test_linformer_with_identity_projections_matches_softmax():
    with T.using_dtype("f64"):
        x, params, spec = make("linformer", n=6, proj_rank=6, seq_len_fixed=6)
        for key in ("e", "f"):
            params.extras[key].data[:] = np.eye(6)
        soft_spec = AttentionSpec("softmax", spec.d_model, spec.heads, seed=spec.seed)
        with T.no_grad():
            lin = attend(x, params, spec).data
            soft = softmax_attention(x, params, soft_spec).data
        assert np.abs(lin - soft).max() < 1e-5


# ---------------------------------------------------------------------------
# iterative pseudoinverse


def test_pinv_identity_is_exact_fixed_point():
    with T.no_grad():
        z = iterative_pinv(T.leaf(np.eye(5, dtype=np.float32)), iters=3).data
    assert np.array_equal(z, np.eye(5, dtype=np.float32))


def test_pinv_scaled_identity_converges_to_closed_form():
    with T.using_dtype("f64"), T.no_grad():
        z = iterative_pinv(T.leaf(2.0 * np.eye(4)), iters=6).data
    assert np.abs(z - 0.5 * np.eye(4)).max() < 1e-6


def test_pinv_residual_levels_on_random_row_stochastic():
    with T.using_dtype("f64"):
        for seed in range(5):
            u = T.Rng(seed + 70).uniform((8, 8))
            a = u / u.sum(axis=-1, keepdims=True)
            norm = np.linalg.norm(a)
            with T.no_grad():
                r6 = np.linalg.norm(a @ iterative_pinv(T.leaf(a), 6).data @ a - a) / norm
                r12 = np.linalg.norm(a @ iterative_pinv(T.leaf(a), 12).data @ a - a) / norm
            assert r6 < 2.5e-2    # documented 6-iteration level
            assert r12 < 1e-3     # converged
            assert r12 <= r6 + 1e-12


def test_pinv_rejects_bad_iteration_count_and_nonsquare():
    a = T.leaf(np.eye(3, dtype=np.float32))
    with pytest.raises(ContractError):
        iterative_pinv(a, iters=0)
    with pytest.raises(ShapeError):
        iterative_pinv(T.leaf(np.ones((2, 3), np.float32)), iters=2)


def test_pinv_overflow_raises_numeric_error():
    tiny = np.full((3, 3), 1e-30, dtype=np.float32)  # norm product underflows to 0
    with pytest.raises(NumericError):
        with T.no_grad():
            iterative_pinv(T.leaf(tiny), iters=2)


# ---------------------------------------------------------------------------
# instrumented cost ratios (the analytic model is covered in test_bench)


def _measured_flops(variant, n, d_model=16, heads=1):
    x, params, spec = make(variant, n=n, d_model=d_model, heads=heads,
                           **({"landmarks": 8} if variant == "nystrom" else {}))
    with T.no_grad():
        T.flops.reset()
        attend(x, params, spec)
        return T.flops.count


def test_softmax_core_flops_scale_quadratically():
    ratio = _measured_flops("softmax", 1024) / _measured_flops("softmax", 512)
    assert 0.9 * 4.0 <= ratio / (1.0 - 0.0) <= 4.0  # projections drag the ratio below 4
    assert abs(ratio - 4.0) <= 0.4


@pytest.mark.parametrize("variant", ["vanilla_linear", "hedgehog", "performer", "cosformer"])
def test_linear_variant_flops_scale_linearly(variant):
    ratio = _measured_flops(variant, 1024) / _measured_flops(variant, 512)
    assert abs(ratio - 2.0) <= 0.2


def test_nystrom_and_linformer_flops_scale_linearly():
    for variant, kw in (("nystrom", {}), ("linformer", {})):
        ratio = _measured_flops(variant, 1024) / _measured_flops(variant, 512)
        assert abs(ratio - 2.0) <= 0.2


# ---------------------------------------------------------------------------
# batching and contracts


@pytest.mark.parametrize("variant", sorted(VARIANTS))
def test_batched_input_equals_per_sample_loop(variant):
    with T.using_dtype("f64"):
        n, b = 6, 3
        _, params, spec = make(variant, n=n)
        xs = T.Rng(77).normal((b, n, spec.d_model))
        with T.no_grad():
            batched = attend(T.leaf(xs), params, spec).data
            single = np.stack([attend(T.leaf(xs[i]), params, spec).data for i in range(b)])
        assert np.abs(batched - single).max() < 1e-12


def test_linformer_rejects_runtime_length_mismatch():
    x, params, spec = make("linformer", n=5, seq_len_fixed=5)
    wrong = T.leaf(T.Rng(0).normal((7, spec.d_model)))
    with pytest.raises(ShapeError, match=r"(?s)7.*5|5.*7"):
        with T.no_grad():
            attend(wrong, params, spec)


def test_linformer_requires_fixed_length_at_spec_time():
    with pytest.raises(ContractError):
        AttentionSpec("linformer", 8, 2, seed=0)


def test_nystrom_explicit_landmark_count_cannot_exceed_tokens():
    x, params, spec = make("nystrom", n=4, landmarks=9)
    with pytest.raises(ContractError):
        with T.no_grad():
            attend(x, params, spec)


def test_spec_validates_variant_and_head_divisibility():
    with pytest.raises(ContractError):
        AttentionSpec("fancy", 8, 2, seed=0)
    with pytest.raises(ContractError):
        AttentionSpec("softmax", 8, 3, seed=0)


def test_attend_rejects_feature_dim_mismatch():
    x, params, spec = make("vanilla_linear", n=4, d_model=8)
    bad = T.leaf(np.zeros((4, 6), np.float32))
    with pytest.raises(ShapeError):
        with T.no_grad():
            attend(bad, params, spec)
