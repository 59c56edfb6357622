import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpsgd.errors import ConfigurationError, NumericError, PartitionError, SensitivityError
from dpsgd.privatizer import (
    NoiseKey,
    PrivatizationConfig,
    clip_and_normalize,
    contribution_from_augmentations,
    privatize_step,
    to_geometry,
    welford_mean,
)


def unit_rows(rng, n, p):
    v = rng.standard_normal((n, p))
    return v / np.maximum(1.0, np.linalg.norm(v, axis=1, keepdims=True)) * rng.uniform(0, 1, (n, 1))


def closed_form_reference(flat, config, key):
    """(1/B) sum of contributions + (sigma/B) * xi, with xi the normalized sum of the per-step draws."""
    b, n_acc = config.total_batch, config.accumulation_steps
    xi = sum(key.at(s).normal(flat.shape[1]) for s in range(n_acc)) / np.sqrt(n_acc)
    return flat.sum(axis=0) / b + config.noise_multiplier / b * xi


# --- clip_and_normalize -----------------------------------------------------------


@pytest.mark.parametrize(
    "v,c,expected",
    [([3, 4], 1, [0.6, 0.8]), ([0.3, 0.4], 1, [0.3, 0.4]), ([3, 4], 2, [0.6, 0.8])],
)
def test_clip_examples(v, c, expected):
    np.testing.assert_allclose(clip_and_normalize(v, c), expected, rtol=1e-15)


def test_clip_of_zero_vector():
    np.testing.assert_array_equal(clip_and_normalize(np.zeros(3), 1.0), np.zeros(3))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20), st.floats(1e-3, 1e3))
def test_clip_norm_at_most_one(v, c):
    out = clip_and_normalize(v, c)
    assert np.linalg.norm(out) <= 1 + 1e-12


def test_clip_rejects_non_finite():
    with pytest.raises(NumericError):
        clip_and_normalize([1.0, np.nan], 1.0)
    with pytest.raises(NumericError):
        clip_and_normalize([np.inf, 0.0], 1.0)


def test_clip_rejects_bad_norm():
    with pytest.raises(ConfigurationError):
        clip_and_normalize([1.0], 0.0)


# --- contribution_from_augmentations -------------------------------------------------


def test_single_augmentation_is_plain_clip():
    v = np.array([[2.0, -1.0, 0.5]])
    np.testing.assert_array_equal(contribution_from_augmentations(v, 0.7), clip_and_normalize(v[0], 0.7))


def test_augmentations_cancel_before_clipping():
    np.testing.assert_array_equal(contribution_from_augmentations([[1.0, 0.0], [-1.0, 0.0]], 1.0), [0.0, 0.0])


def test_many_augmentations_bounded():
    rng = np.random.default_rng(0)
    for _ in range(500):
        out = contribution_from_augmentations(rng.standard_normal((16, 7)) * rng.uniform(0.01, 10), 0.5)
        assert np.linalg.norm(out) <= 1 + 1e-12


def test_batched_contributions():
    rng = np.random.default_rng(1)
    grads = rng.standard_normal((5, 3, 4))
    batched = contribution_from_augmentations(grads, 1.0)
    for i in range(5):
        np.testing.assert_array_equal(batched[i], contribution_from_augmentations(grads[i], 1.0))


def test_empty_augmentation_set():
    with pytest.raises(ValueError):
        contribution_from_augmentations(np.zeros((0, 3)), 1.0)


# --- welford_mean ------------------------------------------------------------------------


def test_welford_examples():
    assert welford_mean([1, 2, 3]) == 2
    v = np.array([1.5, -2.0])
    np.testing.assert_array_equal(welford_mean([v]), v)


def test_welford_matches_naive_mean():
    xs = np.random.default_rng(2).standard_normal((1000, 17)) * 100
    np.testing.assert_allclose(welford_mean(xs), xs.sum(axis=0) / len(xs), rtol=1e-12, atol=1e-12)


def test_welford_empty():
    with pytest.raises(ValueError):
        welford_mean([])


# --- PrivatizationConfig -------------------------------------------------------------------


def test_geometry_must_multiply_out():
    with pytest.raises(ConfigurationError):
        PrivatizationConfig(total_batch=10, local_batch=3, accumulation_steps=2, devices=2)


@pytest.mark.parametrize(
    "field,value", [("clip_norm", 0.0), ("noise_multiplier", -1.0), ("augmult", 0), ("devices", 0)]
)
def test_config_invariants(field, value):
    kwargs = dict(total_batch=4, local_batch=4)
    kwargs[field] = value
    with pytest.raises(ConfigurationError):
        PrivatizationConfig(**kwargs)


def test_with_devices_keeps_batch():
    cfg = PrivatizationConfig.single_device(64, 4, noise_multiplier=2.0).with_devices(4)
    assert (cfg.total_batch, cfg.devices, cfg.accumulation_steps, cfg.local_batch) == (64, 4, 4, 4)
    with pytest.raises(ConfigurationError):
        cfg.with_devices(3)


# --- privatize_step ------------------------------------------------------------------------


def test_noiseless_equal_contributions():
    g = np.array([0.25, -0.5, 0.125])
    cfg = PrivatizationConfig(total_batch=8, local_batch=2, accumulation_steps=2, devices=2)
    out = privatize_step(np.broadcast_to(g, (2, 2, 2, 3)), cfg, NoiseKey(1, 1))
    np.testing.assert_array_equal(out, g)


def test_noise_key_is_pure():
    a, b = NoiseKey(7, 3, 1).normal(5), NoiseKey(7, 3, 1).normal(5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, NoiseKey(7, 3, 2).normal(5))
    assert not np.array_equal(a, NoiseKey(7, 4, 1).normal(5))
    assert not np.array_equal(a, NoiseKey(8, 3, 1).normal(5))


def test_closed_form_equivalence_and_device_invariance():
    rng = np.random.default_rng(3)
    for trial in range(100):
        n_acc = int(rng.integers(1, 9))
        n_dev = int(rng.choice([1, 2, 4]))
        b_local = int(rng.integers(1, max(2, 256 // (n_acc * n_dev)) + 1))
        b = b_local * n_dev * n_acc
        p = int(rng.integers(1, 12))
        sigma = float(rng.uniform(0, 5))
        cfg = PrivatizationConfig(
            noise_multiplier=sigma, total_batch=b, local_batch=b_local, accumulation_steps=n_acc, devices=n_dev
        )
        flat = unit_rows(rng, b, p)
        key = NoiseKey(int(rng.integers(2**63)), trial)
        out = privatize_step(to_geometry(flat, cfg), cfg, key)
        ref = closed_form_reference(flat, cfg, key)
        np.testing.assert_allclose(out, ref, rtol=1e-10, atol=1e-14)
        single = cfg.with_devices(1)
        np.testing.assert_allclose(privatize_step(to_geometry(flat, single), single, key), out, rtol=1e-12, atol=1e-15)


def test_every_factorization_agrees():
    rng = np.random.default_rng(4)
    b, n_acc = 48, 2
    flat = unit_rows(rng, b, 6)
    key = NoiseKey(11, 5)
    outs = []
    for n_dev in (1, 2, 3, 4, 6, 8, 12, 24):
        cfg = PrivatizationConfig(
            noise_multiplier=1.3, total_batch=b, local_batch=b // (n_acc * n_dev), accumulation_steps=n_acc, devices=n_dev
        )
        outs.append(privatize_step(to_geometry(flat, cfg), cfg, key))
    for out in outs[1:]:
        np.testing.assert_allclose(out, outs[0], rtol=1e-12, atol=1e-15)


def test_canonical_batch_mapping():
    cfg = PrivatizationConfig(total_batch=12, local_batch=2, accumulation_steps=2, devices=3)
    flat = np.arange(12, dtype=float)[:, None]
    grouped = to_geometry(flat, cfg)
    # example b -> accumulation step b // 6, device (b % 6) // 2, slot b % 2
    for b in range(12):
        assert grouped[(b % 6) // 2, b // 6, b % 2, 0] == b


def test_partition_errors():
    cfg = PrivatizationConfig(total_batch=4, local_batch=2, accumulation_steps=2, devices=1)
    with pytest.raises(PartitionError):
        privatize_step(np.zeros((1, 2, 3, 5)), cfg, NoiseKey(0, 0))
    with pytest.raises(PartitionError):
        to_geometry(np.zeros((5, 3)), cfg)


def test_sensitivity_violation():
    cfg = PrivatizationConfig(total_batch=2, local_batch=2)
    c = np.zeros((1, 1, 2, 2))
    c[0, 0, 1] = [1.0, 1e-4]
    with pytest.raises(SensitivityError):
        privatize_step(c, cfg, NoiseKey(0, 0))
    c[0, 0, 1] = [1.0 + 5e-10, 0.0]  # inside the tolerance
    privatize_step(c, cfg, NoiseKey(0, 0))


def test_non_finite_contribution():
    cfg = PrivatizationConfig(total_batch=2, local_batch=2)
    c = np.zeros((1, 1, 2, 2))
    c[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        privatize_step(c, cfg, NoiseKey(0, 0))


def test_noise_std_matches_sigma_over_b():
    cfg = PrivatizationConfig(noise_multiplier=4.0, total_batch=256, local_batch=64, accumulation_steps=4)
    zeros = np.zeros((1, 4, 64, 8))
    samples = np.array([privatize_step(zeros, cfg, NoiseKey(99, k)) for k in range(10000)])
    std = samples.std(axis=0)
    assert np.all(np.abs(std / (4.0 / 256) - 1) < 0.05)


def test_sensitivity_bound_on_neighbors():
    rng = np.random.default_rng(5)
    for _ in range(300):
        b, k, p = int(rng.integers(1, 40)), int(rng.integers(1, 5)), int(rng.integers(1, 6))
        c_norm = float(rng.uniform(0.1, 3))
        cfg = PrivatizationConfig(clip_norm=c_norm, total_batch=b, local_batch=b)
        grads = rng.standard_normal((b, k, p)) * rng.uniform(0.1, 10)
        other = grads.copy()
        j = int(rng.integers(b))
        other[j] = rng.standard_normal((k, p)) * rng.uniform(0.1, 100)
        key = NoiseKey(0, 0)
        a = privatize_step(to_geometry(contribution_from_augmentations(grads, c_norm), cfg), cfg, key)
        o = privatize_step(to_geometry(contribution_from_augmentations(other, c_norm), cfg), cfg, key)
        assert np.linalg.norm(a - o) <= 2 / b + 1e-12


def test_clip_norm_invariance_below_min_norm():
    rng = np.random.default_rng(6)
    grads = rng.standard_normal((16, 1, 5)) * 3 + 1
    min_norm = np.linalg.norm(grads[:, 0], axis=1).min()
    outs = []
    for c in (min_norm, min_norm / 2, min_norm / 100):
        cfg = PrivatizationConfig(clip_norm=c, noise_multiplier=0.7, total_batch=16, local_batch=16)
        outs.append(privatize_step(to_geometry(contribution_from_augmentations(grads, c), cfg), cfg, NoiseKey(2, 9)))
    for out in outs[1:]:
        np.testing.assert_allclose(out, outs[0], rtol=1e-12, atol=1e-15)
