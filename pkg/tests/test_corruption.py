import numpy as np
import pytest
from hypothesis import given, strategies as st

from cmpose.corruption import (apply_mask, apply_noise, batch_recon_loss, corruption_count, plan_corruption,
                               recon_loss, stack_plans)
from cmpose.embedder import ConfigError
from cmpose.tensor import ContractError, Tensor


def test_zero_ratio_is_empty():
    plan = plan_corruption(144, 0.0, "mask")
    assert plan.corrupted_indices.size == 0 and plan.flag.tolist() == [1] * 144


def test_exact_counts():
    assert plan_corruption(12, 0.25, "mask").corrupted_indices.size == 3
    assert plan_corruption(144, 0.45, "mask").corrupted_indices.size == 65


@pytest.mark.parametrize("ratio", [-0.1, 1.5])
def test_ratio_outside_unit_interval(ratio):
    with pytest.raises(ConfigError):
        plan_corruption(10, ratio, "mask")


def test_noise_needs_positive_sigma():
    with pytest.raises(ConfigError):
        plan_corruption(10, 0.5, "noise", sigma=0.0, dim=4)


def test_mask_empty_plan_is_identity():
    x = np.random.default_rng(0).normal(size=(6, 3))
    np.testing.assert_array_equal(apply_mask(Tensor(x), plan_corruption(6, 0.0, "mask")).data, x)


def test_mask_rows_example():
    plan = plan_corruption(4, 0.5, "mask", seed=0)
    plan = type(plan)("mask", 4, np.array([1, 3]), None, 0)
    out = apply_mask(Tensor(np.ones((4, 2))), plan).data
    assert out.tolist() == [[1, 1], [0, 0], [1, 1], [0, 0]]


def test_noise_zero_input_single_row():
    plan = plan_corruption(3, 1 / 3, "noise", sigma=0.5, seed=4, dim=2)
    out = apply_noise(Tensor(np.zeros((3, 2))), plan).data
    i = plan.corrupted_indices[0]
    np.testing.assert_array_equal(out[i], plan.noise_draws[0])
    assert np.count_nonzero(np.delete(out, i, axis=0)) == 0


def test_noise_empty_plan_is_identity():
    x = np.random.default_rng(0).normal(size=(6, 3))
    np.testing.assert_array_equal(apply_noise(Tensor(x), plan_corruption(6, 0.0, "noise", dim=3)).data, x)


def test_wrong_kind_or_rows_is_contract_error():
    with pytest.raises(ContractError):
        apply_noise(Tensor(np.zeros((4, 2))), plan_corruption(4, 0.5, "mask"))
    with pytest.raises(ContractError):
        apply_mask(Tensor(np.zeros((5, 2))), plan_corruption(4, 0.5, "mask"))


def test_recon_loss_examples():
    x = np.random.default_rng(0).normal(size=(4, 2))
    plan = type(plan_corruption(4, 0.25, "mask"))("mask", 4, np.array([0]), None, 0)
    assert recon_loss(Tensor(x), Tensor(x), plan).item() == 0.0
    rec = x.copy()
    rec[0] += [3.0, 4.0]
    assert recon_loss(Tensor(rec), Tensor(x), plan).item() == pytest.approx(25.0)
    assert recon_loss(Tensor(rec), Tensor(x), plan_corruption(4, 0.0, "mask")).item() == 0.0


def test_plans_are_seed_deterministic():
    a = plan_corruption(144, 0.45, "noise", 0.5, 9, 8)
    b = plan_corruption(144, 0.45, "noise", 0.5, 9, 8)
    assert np.array_equal(a.corrupted_indices, b.corrupted_indices)
    assert np.array_equal(a.noise_draws, b.noise_draws)


def test_noise_draw_scale():
    plan = plan_corruption(2000, 1.0, "noise", sigma=0.5, seed=0, dim=50)
    assert plan.noise_draws.std() == pytest.approx(0.5, rel=0.02)


@given(st.integers(1, 60), st.floats(0, 1), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_mask_properties(n, p, d, seed):
    x = np.random.default_rng(seed).normal(size=(n, d))
    plan = plan_corruption(n, p, "mask", seed=seed)
    idx = plan.corrupted_indices
    assert idx.size == round(n * p) == corruption_count(n, p)
    assert len(set(idx.tolist())) == idx.size and np.all(np.diff(idx) > 0)
    assert np.array_equal(plan.flag == 0, np.isin(np.arange(n), idx))
    out = apply_mask(Tensor(x), plan).data
    assert np.all(out[idx] == 0)
    keep = np.setdiff1d(np.arange(n), idx)
    np.testing.assert_array_equal(out[keep], x[keep])
    assert np.linalg.norm(out) <= np.linalg.norm(x)


@given(st.integers(1, 60), st.floats(0, 1), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_noise_properties(n, p, d, seed):
    x = np.random.default_rng(seed).normal(size=(n, d))
    plan = plan_corruption(n, p, "noise", 0.5, seed, d)
    out = apply_noise(Tensor(x), plan).data
    diff = out - x
    idx = plan.corrupted_indices
    np.testing.assert_allclose(diff[idx], plan.noise_draws, atol=1e-12)
    assert np.all(np.delete(diff, idx, axis=0) == 0)


@given(st.integers(2, 40), st.floats(0.05, 0.95), st.integers(0, 2**32 - 1))
def test_recon_loss_ignores_rows_outside_plan(n, p, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3))
    rec = rng.normal(size=(n, 3))
    plan = plan_corruption(n, p, "mask", seed=seed)
    outside = np.setdiff1d(np.arange(n), plan.corrupted_indices)
    base = recon_loss(Tensor(rec), Tensor(x), plan).item()
    assert base >= 0
    rec2 = rec.copy()
    rec2[outside] += rng.normal(size=(outside.size, 3))
    assert recon_loss(Tensor(rec2), Tensor(x), plan).item() == base
    r = Tensor(rec, requires_grad=True)
    recon_loss(r, Tensor(x), plan).backward()
    assert r.grad is None or np.all(r.grad[outside] == 0)  # empty plan: constant loss


def test_batch_recon_loss_is_mean_of_per_sample_losses():
    rng = np.random.default_rng(0)
    rec, orig = rng.normal(size=(3, 12, 4)), rng.normal(size=(3, 12, 4))
    plans = [plan_corruption(12, p, "mask", seed=i) for i, p in enumerate([0.25, 0.5, 0.0])]
    keep, _ = stack_plans(plans, 4)
    expected = np.mean([recon_loss(Tensor(rec[b]), Tensor(orig[b]), plans[b]).item() for b in range(3)])
    assert batch_recon_loss(Tensor(rec), orig, keep).item() == pytest.approx(expected, rel=1e-12)
