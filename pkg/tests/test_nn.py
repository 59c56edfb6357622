import math

import numpy as np
import pytest

from dpsgd.errors import ConfigurationError, NumericError, ShapeError
from dpsgd.nn import checkpoint, layers, models
from dpsgd.nn.models import ModelParams, ModelSpec

from oracles import finite_difference_grads, forward_reference, gn_reference, ws_reference

SPECS = {
    "linear": ModelSpec("linear", (5,), 3),
    "mlp": ModelSpec("mlp", (4,), 3, hidden=(6, 5)),
    "mlp_ws": ModelSpec("mlp", (4,), 3, hidden=(6,), use_weight_standardization=True),
    "tinyconv": ModelSpec("tinyconv", (2, 5, 4), 3, channels=(4, 6), group_count=2),
    "tinyconv_ws": ModelSpec(
        "tinyconv", (2, 5, 4), 3, channels=(4, 6), group_count=2, use_weight_standardization=True
    ),
}


def random_params(spec, seed=0):
    rng = np.random.default_rng(seed)
    params = models.init_params(spec, rng)
    # perturb scales, shifts and biases away from their neutral initial values
    return params.replace(params.vector + 0.3 * rng.standard_normal(params.size))


def random_batch(spec, n, seed=1):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, *spec.input_shape)), rng.integers(0, spec.num_classes, n)


# --- ModelSpec / ModelParams ---------------------------------------------------------


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        ModelSpec("resnet", (3,), 2)
    with pytest.raises(ConfigurationError):
        ModelSpec("mlp", (3,), 2)
    with pytest.raises(ConfigurationError):
        ModelSpec("linear", (3,), 2, hidden=(4,))
    with pytest.raises(ConfigurationError):
        ModelSpec("linear", (3,), 1)
    with pytest.raises(ConfigurationError):
        ModelSpec("tinyconv", (3, 8, 8), 2, channels=(16, 30), group_count=8)
    with pytest.raises(ConfigurationError):
        ModelSpec("tinyconv", (8,), 2)


@pytest.mark.parametrize("name", list(SPECS))
def test_layout_covers_vector_once(name):
    spec = SPECS[name]
    params = models.zero_params(spec)
    covered = np.zeros(params.size, dtype=int)
    for sl, _ in params.slices.values():
        covered[sl] += 1
    assert np.all(covered == 1)
    assert [n for n, _ in models.layout(spec)] == list(params.slices)


def test_tinyconv_is_desk_sized():
    spec = ModelSpec("tinyconv", (3, 32, 32), 10)
    assert models.param_count(spec) <= 50_000


def test_params_are_immutable_and_checked():
    spec = SPECS["linear"]
    params = models.zero_params(spec)
    with pytest.raises(ValueError):
        params.vector[0] = 1.0
    with pytest.raises(ShapeError):
        ModelParams(spec, np.zeros(3))
    bad = np.zeros(params.size)
    bad[0] = np.inf
    with pytest.raises(NumericError):
        ModelParams(spec, bad)


def test_init_variance_is_one_over_fan_in():
    spec = ModelSpec("linear", (400,), 50)
    w = models.init_params(spec, np.random.default_rng(0))["linear.weight"]
    assert w.var() == pytest.approx(1 / 400, rel=0.03)
    assert np.all(models.init_params(spec, np.random.default_rng(0)).vector == models.init_params(
        spec, np.random.default_rng(0)
    ).vector)


# --- forward --------------------------------------------------------------------------


def test_zero_linear_model_gives_zero_logits():
    spec = SPECS["linear"]
    x, _ = random_batch(spec, 4)
    np.testing.assert_array_equal(models.forward(models.zero_params(spec), x), np.zeros((4, 3)))


def test_linear_logits():
    spec = ModelSpec("linear", (2,), 2)
    params = models.zero_params(spec).replace(np.array([1.0, 0.0, 0.0, 1.0, 0.5, -0.5]))
    np.testing.assert_array_equal(models.forward(params, [[3.0, 4.0]]), [[3.5, 3.5]])


@pytest.mark.parametrize("name", list(SPECS))
def test_forward_matches_reference(name):
    spec = SPECS[name]
    params = random_params(spec)
    x, _ = random_batch(spec, 3)
    np.testing.assert_allclose(models.forward(params, x), forward_reference(params, x), rtol=1e-12, atol=1e-12)


def test_forward_shape_error():
    with pytest.raises(ShapeError):
        models.forward(models.zero_params(SPECS["linear"]), np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        models.forward(models.zero_params(SPECS["tinyconv"]), np.zeros((2, 40)))


def test_loss_non_negative_and_label_checks():
    spec = SPECS["mlp"]
    params = random_params(spec)
    x, y = random_batch(spec, 10)
    assert np.all(models.loss(params, x, y) >= 0)
    with pytest.raises(ShapeError):
        models.loss(params, x, y[:-1])
    with pytest.raises(ShapeError):
        models.loss(params, x, np.full(10, 3))


# --- per-example gradients ---------------------------------------------------------


@pytest.mark.parametrize("name", list(SPECS))
def test_per_example_grads_match_finite_differences(name):
    spec = SPECS[name]
    params = random_params(spec, seed=2)
    x, y = random_batch(spec, 2, seed=3)
    got = models.per_example_grads(params, x, y)
    ref = finite_difference_grads(params, x, y)
    rel = np.linalg.norm(got - ref) / np.linalg.norm(ref)
    assert rel < 1e-4


def test_batch_of_one_and_duplicates():
    spec = SPECS["tinyconv_ws"]
    params = random_params(spec)
    x, y = random_batch(spec, 3)
    full = models.per_example_grads(params, x, y)
    single = models.per_example_grads(params, x[1:2], y[1:2])
    np.testing.assert_allclose(single[0], full[1], rtol=1e-12, atol=1e-14)
    dup = models.per_example_grads(params, np.stack([x[0], x[0]]), [y[0], y[0]])
    np.testing.assert_array_equal(dup[0], dup[1])


@pytest.mark.parametrize("name", ["mlp", "tinyconv_ws"])
def test_per_example_independence(name):
    spec = SPECS[name]
    params = random_params(spec)
    x, y = random_batch(spec, 4)
    before = models.per_example_grads(params, x, y)
    x2 = x.copy()
    x2[2] += 1.0
    after = models.per_example_grads(params, x2, y)
    for i in (0, 1, 3):
        np.testing.assert_array_equal(before[i], after[i])
    assert not np.array_equal(before[2], after[2])


def test_losses_returned_with_grads():
    spec = SPECS["mlp_ws"]
    params = random_params(spec)
    x, y = random_batch(spec, 5)
    losses, _ = models.loss_and_per_example_grads(params, x, y)
    np.testing.assert_allclose(losses, models.loss(params, x, y), rtol=1e-14)


def test_empty_batch():
    with pytest.raises(ShapeError):
        models.per_example_grads(models.zero_params(SPECS["linear"]), np.zeros((0, 5)), [])


def test_accuracy():
    spec = ModelSpec("linear", (2,), 2)
    params = models.zero_params(spec).replace(np.array([1.0, 0.0, -1.0, 0.0, 0.0, 0.0]))
    x = np.array([[1.0, 0.0], [-1.0, 0.0], [2.0, 5.0]])
    assert models.accuracy(params, x, [0, 1, 1], batch_size=2) == pytest.approx(2 / 3)


# --- weight standardization ------------------------------------------------------------


def test_ws_examples():
    np.testing.assert_array_equal(layers.weight_standardize([[1.0, 3.0]], 2), [[-1 / math.sqrt(2), 1 / math.sqrt(2)]])
    np.testing.assert_array_equal(layers.weight_standardize([[5.0, 5.0]], 2), [[0.0, 0.0]])


def test_ws_postcondition():
    w = np.random.default_rng(0).standard_normal((8, 16)) * 3 + 1
    scaled = layers.weight_standardize(w, 16) * 4
    np.testing.assert_allclose(scaled.mean(axis=1), 0, atol=1e-10)
    np.testing.assert_allclose(scaled.std(axis=1), 1, atol=1e-10)
    np.testing.assert_allclose(layers.weight_standardize(w, 16), ws_reference(w), rtol=1e-12, atol=1e-14)


def test_ws_conv_weights_reduce_over_fan_in():
    w = np.random.default_rng(1).standard_normal((4, 3, 3, 3))
    out = layers.weight_standardize(w, 27)
    assert out.shape == w.shape
    np.testing.assert_allclose(out.reshape(4, -1).std(axis=1) * math.sqrt(27), 1, atol=1e-10)


def test_ws_fan_in_mismatch():
    with pytest.raises(ShapeError):
        layers.weight_standardize(np.zeros((2, 3)), 4)


def test_ws_backward_matches_finite_differences():
    rng = np.random.default_rng(2)
    w = rng.standard_normal((3, 5))
    upstream = rng.standard_normal((2, 3, 5))
    got = layers.weight_standardize_backward(w, upstream)
    h = 1e-6
    for n in range(2):
        fd = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            up, down = w.copy(), w.copy()
            up[idx] += h
            down[idx] -= h
            fd[idx] = ((layers.weight_standardize(up, 5) - layers.weight_standardize(down, 5)) * upstream[n]).sum() / (2 * h)
        np.testing.assert_allclose(got[n], fd, rtol=1e-6, atol=1e-8)


# --- group norm ---------------------------------------------------------------------


def test_gn_example():
    x = np.array([1.0, 3.0, 1.0, 3.0]).reshape(1, 4, 1, 1)
    y = layers.group_norm_forward(x, 2)
    np.testing.assert_allclose(y.ravel(), [-1, 1, -1, 1], atol=1e-5)


def test_gn_idempotent_on_normalized_input():
    x = np.random.default_rng(3).standard_normal((2, 4, 3, 3))
    y = layers.group_norm_forward(x, 2)
    np.testing.assert_allclose(layers.group_norm_forward(y, 2, np.ones(4), np.zeros(4)), y, atol=1e-4)


def test_gn_statistics_are_per_example():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((2, 6, 3, 3))
    y = layers.group_norm_forward(np.stack([a, a, b * 10]), 3)
    np.testing.assert_array_equal(y[0], y[1])
    alone = layers.group_norm_forward(a[None], 3)
    np.testing.assert_array_equal(y[0], alone[0])


def test_gn_matches_reference():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 6, 4, 2)) * 2 + 1
    scale, shift = rng.standard_normal(6), rng.standard_normal(6)
    np.testing.assert_allclose(
        layers.group_norm_forward(x, 3, scale, shift), gn_reference(x, 3, scale, shift), rtol=1e-12, atol=1e-12
    )


def test_gn_indivisible_channels():
    with pytest.raises(ConfigurationError):
        layers.group_norm_forward(np.zeros((1, 5, 2, 2)), 2)


# --- checkpoints ----------------------------------------------------------------------


@pytest.mark.parametrize("name", list(SPECS))
def test_checkpoint_round_trip(name, tmp_path):
    params = random_params(SPECS[name])
    path = tmp_path / "model.ckpt"
    checkpoint.save_checkpoint(path, params)
    loaded = checkpoint.load_checkpoint(path)
    assert loaded.spec == params.spec
    np.testing.assert_array_equal(loaded.vector, params.vector)


def test_checkpoint_layout():
    params = random_params(SPECS["linear"])
    data = checkpoint.to_bytes(params)
    assert data[:8] == b"DPSGDCK1"
    length = int.from_bytes(data[8:12], "little")
    count = int.from_bytes(data[12 + length : 20 + length], "little")
    assert count == params.size
    np.testing.assert_array_equal(np.frombuffer(data[20 + length :], "<f8"), params.vector)


def test_checkpoint_rejects_garbage():
    data = checkpoint.to_bytes(random_params(SPECS["linear"]))
    with pytest.raises(ValueError):
        checkpoint.from_bytes(b"NOTACKPT" + data[8:])
    with pytest.raises(ValueError):
        checkpoint.from_bytes(data[:-8])
