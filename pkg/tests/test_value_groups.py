"""Tests for value-group partitioning, routing, reconstruction, budgets."""

import numpy as np
import pytest

from subtoken_kv.errors import ConfigError
from subtoken_kv.numerics import gelu_fwd, rel_err
from subtoken_kv.value_groups import (
    BudgetSpec,
    GroupRouter,
    Reconstructor,
    RetentionInfo,
    SelectionMask,
    floor_budget,
    kv_retention_fraction,
    partition_value,
    reconstruct_value,
    select_keep_groups,
)


def test_floor_budget_exact_integers() -> None:
    assert floor_budget(28.0) == 28
    assert floor_budget(0.0) == 0
    assert floor_budget(3.7) == 3


def test_floor_budget_guards_float_products() -> None:
    # 0.7 * 10 * 4 is 27.999... in binary floating point; the budget is 28.
    assert floor_budget(0.7 * 10 * 4) == 28
    assert floor_budget(0.25 * 80 * 4) == 80
    # A genuinely fractional value still floors down.
    assert floor_budget(27.5) == 27


def test_partition_value_slices() -> None:
    v = np.arange(12.0)
    parts = partition_value(v, 4)
    assert len(parts) == 4
    for g in range(4):
        assert np.array_equal(parts[g], v[3 * g : 3 * g + 3])
    # Slices are views into the original array.
    parts[0][0] = 99.0
    assert v[0] == 99.0


def test_partition_value_batched_and_errors() -> None:
    v = np.arange(24.0).reshape(2, 12)
    parts = partition_value(v, 3)
    assert parts[1].shape == (2, 4)
    assert np.array_equal(parts[2], v[:, 8:])
    with pytest.raises(ConfigError):
        partition_value(v, 5)
    with pytest.raises(ConfigError):
        partition_value(v, 0)


def test_group_router_scores_affine() -> None:
    rng = np.random.default_rng(0)
    router = GroupRouter(d_model=6, n_groups=4, rng=rng)
    x = rng.normal(size=(5, 6))
    scores = router.scores(x)
    assert scores.shape == (5, 4)
    for i in range(5):
        for g in range(4):
            want = float(router.router_w[g] @ x[i] + router.router_b[g])
            assert abs(scores[i, g] - want) < 1e-12
    assert np.array_equal(router.router_b, np.zeros(4))


def test_reconstructor_forward_oracle() -> None:
    rng = np.random.default_rng(1)
    recon = Reconstructor(d_head=8, n_groups=4, hidden=10, rng=rng)
    v_masked = rng.normal(size=(3, 8))
    indicator = (rng.random((3, 4)) < 0.5).astype(np.float64)
    v_hat, cache = recon.forward(v_masked, indicator)
    inp = np.concatenate([v_masked, indicator], axis=1)
    z1 = inp @ recon.rec_w1.T + recon.rec_b1
    want = np.asarray(gelu_fwd(z1)) @ recon.rec_w2.T + recon.rec_b2
    assert np.allclose(v_hat, want, atol=1e-12)
    assert np.array_equal(cache["inp"], inp)


def test_reconstructor_backward_finite_difference() -> None:
    rng = np.random.default_rng(2)
    recon = Reconstructor(d_head=6, n_groups=3, hidden=7, rng=rng)
    # Wider weights than init so gradients are not drowned in round-off.
    for name in recon.ARRAY_NAMES:
        getattr(recon, name)[...] = rng.normal(0.0, 0.5, size=getattr(recon, name).shape)
    v_masked = rng.normal(size=(4, 6))
    indicator = (rng.random((4, 3)) < 0.5).astype(np.float64)
    w = rng.normal(size=(4, 6))  # fixed probe so loss = sum(w * v_hat)

    def loss() -> tuple[float, dict, dict]:
        v_hat, cache = recon.forward(v_masked, indicator)
        grads: dict = {}
        dinp = recon.backward(w, cache, grads=grads, prefix="r")
        return float((w * v_hat).sum()), grads, {"dinp": dinp}

    base_loss, grads, extra = loss()
    eps = 1e-6
    for name in recon.ARRAY_NAMES:
        arr = getattr(recon, name)
        flat = arr.reshape(-1)
        for idx in rng.choice(flat.size, size=min(10, flat.size), replace=False):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = loss()[0]
            flat[idx] = orig - eps
            down = loss()[0]
            flat[idx] = orig
            fd = (up - down) / (2 * eps)
            assert rel_err(grads["r." + name].reshape(-1)[idx], fd) < 1e-6
    # Input gradient covers the masked-value part of the concatenated input.
    flat = v_masked.reshape(-1)
    for idx in rng.choice(flat.size, size=8, replace=False):
        orig = flat[idx]
        flat[idx] = orig + eps
        up = loss()[0]
        flat[idx] = orig - eps
        down = loss()[0]
        flat[idx] = orig
        fd = (up - down) / (2 * eps)
        got = extra["dinp"][idx // 6, idx % 6]
        assert rel_err(got, fd) < 1e-6


def test_reconstructor_backward_without_grads_dict() -> None:
    rng = np.random.default_rng(3)
    recon = Reconstructor(d_head=4, n_groups=2, hidden=5, rng=rng)
    v_hat, cache = recon.forward(rng.normal(size=(2, 4)), np.ones((2, 2)))
    dinp = recon.backward(np.ones_like(v_hat), cache)
    assert dinp.shape == (2, 6)


def test_select_keep_groups_matches_sort_oracle() -> None:
    rng = np.random.default_rng(4)
    router = GroupRouter(d_model=5, n_groups=6, rng=rng)
    router.router_w[...] = rng.normal(size=router.router_w.shape)
    for _ in range(200):
        x = rng.normal(size=5)
        keep = int(rng.integers(1, 7))
        got = select_keep_groups(x, router, keep)
        scores = router.scores(x[None, :])[0]
        order = sorted(range(6), key=lambda g: (-scores[g], g))
        want = np.sort(np.array(order[:keep]))
        assert np.array_equal(got, want)


def test_reconstruct_value_full_keep_is_bitexact() -> None:
    rng = np.random.default_rng(5)
    recon = Reconstructor(d_head=8, n_groups=4, hidden=6, rng=rng)
    v = rng.normal(size=8)
    out = reconstruct_value(v, np.arange(4), recon)
    assert np.array_equal(out, v)
    assert out is not v


def test_reconstruct_value_partial_keep() -> None:
    rng = np.random.default_rng(6)
    recon = Reconstructor(d_head=8, n_groups=4, hidden=6, rng=rng)
    for name in recon.ARRAY_NAMES:
        getattr(recon, name)[...] = rng.normal(0.0, 0.5, size=getattr(recon, name).shape)
    v = rng.normal(size=8)
    keep_idx = np.array([1, 3])
    out = reconstruct_value(v, keep_idx, recon)
    indicator = np.zeros(4)
    indicator[keep_idx] = 1.0
    dim_mask = np.repeat(indicator, 2)
    v_hat, _ = recon.forward((v * dim_mask)[None, :], indicator[None, :])
    # Kept dims are copied exactly; dropped dims come from the MLP.
    assert np.array_equal(out[2:4], v[2:4])
    assert np.array_equal(out[6:8], v[6:8])
    assert np.allclose(out[0:2], v_hat[0, 0:2], atol=1e-12)
    assert np.allclose(out[4:6], v_hat[0, 4:6], atol=1e-12)


def test_budget_spec_validation() -> None:
    ok = BudgetSpec(rho=0.5, groups=4, token_keep=1.0, n_context=10, n_query=2)
    assert ok.n_tokens == 12
    with pytest.raises(ConfigError):
        BudgetSpec(rho=0.0, groups=4, token_keep=1.0, n_context=10, n_query=2)
    with pytest.raises(ConfigError):
        BudgetSpec(rho=1.5, groups=4, token_keep=1.0, n_context=10, n_query=2)
    with pytest.raises(ConfigError):
        BudgetSpec(rho=0.5, groups=0, token_keep=1.0, n_context=10, n_query=2)
    with pytest.raises(ConfigError):
        BudgetSpec(rho=0.5, groups=4, token_keep=0.0, n_context=10, n_query=2)
    with pytest.raises(ConfigError):
        BudgetSpec(rho=0.5, groups=4, token_keep=1.0, n_context=0, n_query=2)


def test_budget_spec_pair_and_token_budgets() -> None:
    spec = BudgetSpec(rho=0.25, groups=4, token_keep=1.0, n_context=80, n_query=16)
    assert spec.pair_budget == 80  # 0.25 * 80 * 4
    assert spec.token_budget == 80
    spec = BudgetSpec(rho=0.7, groups=4, token_keep=0.75, n_context=10, n_query=0)
    assert spec.pair_budget == 28  # guarded against 27.999...
    assert spec.token_budget == 7
    spec = BudgetSpec(rho=0.33, groups=4, token_keep=1.0, n_context=10, n_query=0)
    assert spec.pair_budget == 13  # floor(13.2)


def test_kv_retention_canonical_values() -> None:
    cases = [
        ((1.0, 0.25), 0.625),
        ((1.0, 0.5), 0.750),
        ((0.75, 0.75), 0.656),
        ((0.75, 0.5), 0.562),
        ((0.5, 0.5), 0.375),
        ((1.0, 1.0), 1.000),
    ]
    for (token_keep, rho), want in cases:
        spec = BudgetSpec(rho=rho, groups=4, token_keep=token_keep, n_context=64, n_query=16)
        assert round(kv_retention_fraction(spec), 3) == want


def test_selection_mask_properties() -> None:
    m = np.zeros((6, 4), dtype=np.int64)
    m[0, :2] = 1
    m[1, 1:] = 1
    m[4:] = 1  # query region
    mask = SelectionMask(m, n_context=4, n_query=2)
    assert np.array_equal(mask.k_per_token, [2, 3, 0, 0, 4, 4])
    assert mask.kept_pairs == 5
    assert mask.n_groups == 4
    dm = mask.dim_mask(8)
    assert dm.shape == (6, 8)
    assert np.array_equal(dm[0], [1, 1, 1, 1, 0, 0, 0, 0])
    assert np.array_equal(dm[1], [0, 0, 1, 1, 1, 1, 1, 1])


def test_selection_mask_validation() -> None:
    with pytest.raises(ValueError):
        SelectionMask(np.ones(8), n_context=4, n_query=4)
    with pytest.raises(ValueError):
        SelectionMask(np.ones((7, 4)), n_context=4, n_query=4)
    bad = np.ones((8, 4))
    bad[0, 0] = 0.5
    with pytest.raises(ValueError):
        SelectionMask(bad, n_context=4, n_query=4)
    holes = np.ones((8, 4))
    holes[6, 2] = 0  # inside the query region
    with pytest.raises(ValueError):
        SelectionMask(holes, n_context=4, n_query=4)
    with pytest.raises(ConfigError):
        SelectionMask.all_ones(4, 2, 4).dim_mask(10)


def test_selection_mask_all_ones() -> None:
    mask = SelectionMask.all_ones(5, 3, 4)
    assert mask.kept_pairs == 20
    assert np.all(mask.m == 1)


def test_retention_info_uncompressed() -> None:
    info = RetentionInfo.uncompressed(48)
    assert info.total_kv == 1.0
    assert info.tokens_kept == 1.0
    assert info.rho == 1.0
    assert info.n_surviving == 48
    assert info.n_compressed_layers == 0
