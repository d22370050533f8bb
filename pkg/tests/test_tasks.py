import numpy as np
import pytest

from circuit_seed.core_math import make_rng, singular_values
from circuit_seed.lora_mlp import merge_effective_weight
from circuit_seed.tasks import (
    DENSE, SPARSE, HELDOUT_SIZE, DegenerateTaskError, TargetSpec, make_task, relative_mse, sample_batch,
)


def loop_target(task, x):
    w1, w2 = task.target_w1, task.base.w2
    out = np.zeros((w2.shape[0], x.shape[1]))
    for n in range(x.shape[1]):
        h = [max(sum(w1[i, j] * x[j, n] for j in range(w1.shape[1])), 0.0) for i in range(w1.shape[0])]
        for o in range(w2.shape[0]):
            out[o, n] = sum(w2[o, i] * h[i] for i in range(len(h)))
    return out


def test_sparse_construction(sparse_task):
    t = sparse_task
    assert t.large_mask.sum() == 51
    np.testing.assert_allclose(t.target_w1, t.base.w1 + t.true_b @ t.base.a, atol=1e-12)
    assert t.heldout.size == HELDOUT_SIZE
    # large entries really come from the wide distribution
    assert np.abs(t.true_b[t.large_mask]).mean() > 10 * np.abs(t.true_b[~t.large_mask]).mean()


def test_dense_residual_has_rank_two(dense_task):
    s = singular_values(dense_task.target_w1 - dense_task.base.w1)
    assert s[1] > 1e-3
    assert np.all(s[2:] < 1e-10)


def test_dense_residual_reachable_through_adapter(dense_task):
    # the residual's rows lie in the span of A, so some B reproduces it exactly
    a = dense_task.base.a
    delta = dense_task.target_w1 - dense_task.base.w1
    b, *_ = np.linalg.lstsq(a.T, delta.T, rcond=None)
    np.testing.assert_allclose(b.T @ a, delta, atol=1e-10)


@pytest.mark.parametrize("kind", [DENSE, SPARSE])
def test_baseline_positive_over_seeds(kind):
    for seed in range(10):
        assert make_task(TargetSpec(kind=kind, seed=seed, heldout_size=256)).baseline_mse > 0


def test_relative_mse_anchors(sparse_task):
    t = sparse_task
    assert relative_mse(t, t.fresh_model()) == 1.0
    assert relative_mse(t, t.base.copy(b=t.true_b)) < 1e-6


def test_sample_batch(sparse_task):
    b = sample_batch(sparse_task, 1, make_rng(3))
    assert b.x.shape == (128, 1) and b.y.shape == (32, 1)
    b1 = sample_batch(sparse_task, 5, make_rng(9))
    b2 = sample_batch(sparse_task, 5, make_rng(9))
    assert np.array_equal(b1.x, b2.x) and np.array_equal(b1.y, b2.y)
    np.testing.assert_allclose(b1.y, loop_target(sparse_task, b1.x), atol=1e-12, rtol=0)
    with pytest.raises(ValueError):
        sample_batch(sparse_task, 0, make_rng(0))


def test_task_is_deterministic():
    a = make_task(TargetSpec(seed=5, heldout_size=64))
    b = make_task(TargetSpec(seed=5, heldout_size=64))
    assert np.array_equal(a.target_w1, b.target_w1)
    assert np.array_equal(a.heldout.x, b.heldout.x)
    assert a.baseline_mse == b.baseline_mse


def test_shared_base_seed():
    a = make_task(TargetSpec(seed=1, base_seed=7, heldout_size=64))
    b = make_task(TargetSpec(seed=2, base_seed=7, heldout_size=64))
    assert np.array_equal(a.base.w1, b.base.w1) and np.array_equal(a.base.a, b.base.a)
    assert not np.array_equal(a.true_b, b.true_b)


def test_degenerate_target_rejected():
    with pytest.raises(DegenerateTaskError):
        make_task(TargetSpec(large_std=0.0, small_std=0.0, heldout_size=16))


def test_bad_spec_rejected():
    with pytest.raises(ValueError):
        TargetSpec(kind="nope")
    with pytest.raises(ValueError):
        TargetSpec(sparse_fraction=0.0)


def test_manifest_fields(sparse_task, tmp_path):
    m = sparse_task.manifest()
    assert m["schema_version"] == 1 and m["n_large"] == 51
    sparse_task.write_manifest(tmp_path / "m.json")
    assert (tmp_path / "m.json").read_text().startswith("{")


def test_merged_target_matches_adapter_forward(sparse_task):
    m = sparse_task.base.copy(b=sparse_task.true_b)
    np.testing.assert_array_equal(merge_effective_weight(m), sparse_task.target_w1)
