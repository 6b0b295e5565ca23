import hypothesis.extra.numpy as npst
import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given

from conftest import avgpool_conv_model
from denoise import (ConvParams, HookMode, RollSet, SurrogatePath, SurrogateTrainConfig, attach, backward_hook,
                     check_geometry, forward_hook, init_surrogate, load_surrogates, save_surrogates,
                     surrogate_forward, surrogate_l1, train_surrogates)
from errors import ConfigError, DimensionError
from metrics import phase_spread
from nn_models import ModelView, conv_layer
from run_demo_checkerboard import checkerboard_gradients
from seeding import stream
from shapes_dataset import DatasetHandle, NormalizationStats
from spatial_ops import conv2d
from tensor_core import Tape, backward, mul, tensor_sum

CHECKERBOARD = np.tile([[1.0, 1.0], [1.0, -1.0]], (4, 4))


def input_gradient(fn, x, upstream):
    tape = Tape()
    watched = tape.watch(x)
    return backward(tensor_sum(mul(fn(watched), upstream)), tape).grad(watched).data


def hidden_gradient(view, images, layer, target=0):
    tape = Tape()
    logits, captured = view.forward(images, tape=tape, capture=(layer,))
    mask = np.zeros(logits.shape)
    mask[:, target] = 1
    return backward(tensor_sum(mul(logits, mask)), tape).grad(captured[layer]).data


def test_backward_hook_nulls_the_checkerboard():
    hooked = backward_hook(CHECKERBOARD).data
    np.testing.assert_array_equal(hooked, np.full(CHECKERBOARD.shape, 0.5))
    assert phase_spread(CHECKERBOARD) == pytest.approx(2.0)
    assert phase_spread(hooked) == 0.0


def test_forward_hook_gradient_nulls_the_checkerboard():
    fields = checkerboard_gradients(8)
    np.testing.assert_array_equal(fields["gradient"], CHECKERBOARD)
    np.testing.assert_array_equal(fields["backward_hook"], np.full((8, 8), 0.5))
    np.testing.assert_array_equal(fields["forward_hook"], np.full((8, 8), 0.5))


def test_constant_gradient_is_unchanged():
    constant = np.full((2, 3, 6, 6), 1.7)
    np.testing.assert_array_equal(backward_hook(constant).data, constant)


@given(npst.arrays(np.float64, st.tuples(st.integers(1, 3), st.sampled_from([2, 4, 6]), st.sampled_from([2, 4, 6])),
                   elements=st.floats(-10, 10)))
def test_backward_hook_keeps_the_mean_and_removes_phase(field):
    hooked = backward_hook(field).data
    assert hooked.mean() == pytest.approx(field.mean(), abs=1e-9)
    means = [hooked[..., i::2, j::2].mean() for i in (0, 1) for j in (0, 1)]
    assert max(means) - min(means) == pytest.approx(0.0, abs=1e-9)


def test_forward_hook_gradient_equals_backward_hook():
    rng = np.random.default_rng(0)
    for _ in range(60):
        n, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        size = int(rng.choice([4, 6, 8]))
        kernel = int(rng.integers(1, 4))
        padding = int(rng.integers(0, 2))
        conv = ConvParams(rng.normal(size=(o, c, kernel, kernel)), rng.normal(size=o), 2, padding)
        x = rng.normal(size=(n, c, size, size))
        upstream = rng.normal(size=conv2d(x, conv.weight, conv.bias, 2, padding).shape)

        hooked = input_gradient(lambda t: forward_hook(conv, t), x, upstream)
        plain = input_gradient(lambda t: conv2d(t, conv.weight, conv.bias, 2, padding), x, upstream)
        assert np.abs(hooked - backward_hook(plain).data).max() < 1e-10


def test_literal_rolls_agree_on_period_two_fields():
    field = np.tile(np.random.default_rng(1).normal(size=(2, 3, 2, 2)), (1, 1, 3, 4))
    np.testing.assert_array_equal(backward_hook(field, RollSet.literal()).data, backward_hook(field).data)


def test_literal_rolls_differ_in_general():
    field = np.random.default_rng(2).normal(size=(1, 1, 6, 6))
    assert not np.allclose(backward_hook(field, RollSet.literal()).data, backward_hook(field).data)


def test_roll_set_defaults_to_inverse_offsets():
    rolls = RollSet()
    assert [(d.dh, d.dw) for d in rolls.backward] == [(0, 0), (0, -1), (-1, 0), (-1, -1)]


@pytest.mark.parametrize("offsets", [((0, 0), (0, 1), (1, 0)), ((1, 1), (0, 1), (1, 0), (2, 2))])
def test_invalid_roll_sets(offsets):
    with pytest.raises(ConfigError):
        RollSet(offsets)


def test_forward_hook_rejects_odd_extents():
    with pytest.raises(DimensionError):
        forward_hook(ConvParams(np.ones((1, 1, 3, 3)), None, 2, 1), np.ones((1, 1, 5, 6)))


def test_hook_mode_parsing():
    assert HookMode.parse("backward") is HookMode.BACKWARD_HOOK
    assert HookMode.parse("forward_hook") is HookMode.FORWARD_HOOK
    assert HookMode.SURROGATE.short_name == "surrogate"
    with pytest.raises(ConfigError):
        HookMode.parse("sideways")


# ---------------------------------------------------------------- surrogate

def test_geometry_rule():
    check_geometry(conv_layer("a", "input", 2, 2, 3, stride=2, padding=1))
    check_geometry(conv_layer("b", "input", 2, 2, 2, stride=2))
    with pytest.raises(ConfigError):
        check_geometry(conv_layer("c", "input", 2, 2, 3, stride=2))
    with pytest.raises(ConfigError):
        check_geometry(conv_layer("d", "input", 2, 2, 3, stride=1, padding=1))


def _layer_and_weight(rng, c=3, o=4):
    layer = conv_layer("conv", "input", c, o, 3, stride=2, padding=1)
    return layer, {"weight": rng.normal(size=(o, c, 3, 3))}


def test_init_copies_the_replaced_kernel(rng):
    layer, params = _layer_and_weight(rng)
    path = init_surrogate(layer, params, rng, noise=0.0)
    np.testing.assert_array_equal(path.post_weight, params["weight"])
    dirac = np.zeros((3, 3, 3, 3))
    dirac[np.arange(3), np.arange(3), 1, 1] = 1
    np.testing.assert_array_equal(path.pre_weight, dirac)


def test_init_of_an_even_kernel_uses_its_sum(rng):
    layer = conv_layer("conv", "input", 2, 2, 2, stride=2)
    weight = rng.normal(size=(2, 2, 2, 2))
    path = init_surrogate(layer, {"weight": weight}, rng, noise=0.0)
    np.testing.assert_allclose(path.post_weight[:, :, 1, 1], weight.sum(axis=(2, 3)))
    assert np.count_nonzero(path.post_weight) == 4


def test_surrogate_halves_the_resolution(rng):
    layer, params = _layer_and_weight(rng)
    path = init_surrogate(layer, params, rng)
    out = surrogate_forward(path, rng.normal(size=(2, 3, 8, 8)))
    assert out.shape == (2, 4, 4, 4)


def test_surrogate_rejects_wrong_channels(rng):
    layer, params = _layer_and_weight(rng)
    with pytest.raises(DimensionError):
        surrogate_forward(init_surrogate(layer, params, rng), np.ones((1, 2, 8, 8)))


def test_identity_surrogate_keeps_constants():
    dirac = np.zeros((2, 2, 3, 3))
    dirac[[0, 1], [0, 1], 1, 1] = 1
    path = SurrogatePath("conv", dirac, np.zeros(2), dirac, np.zeros(2))
    out = surrogate_forward(path, np.full((1, 2, 6, 6), 3.0))
    np.testing.assert_array_equal(out.data, np.full((1, 2, 3, 3), 3.0))


def test_surrogate_gradient_is_phase_free(rng):
    layer, params = _layer_and_weight(rng)
    path = init_surrogate(layer, params, rng, noise=0.0)
    x = rng.normal(size=(1, 3, 8, 8))
    surrogate = input_gradient(lambda t: surrogate_forward(path, t), x, np.ones((1, 4, 4, 4)))
    original = input_gradient(lambda t: conv2d(t, params["weight"], None, 2, 1), x, np.ones((1, 4, 4, 4)))
    assert phase_spread(surrogate) < 1e-6
    assert phase_spread(original) > 1e-3


# ---------------------------------------------------------------- attach

def test_attach_original_and_backward_hook_keep_the_forward_pass(tiny_resnet, tiny_images):
    reference = ModelView(tiny_resnet).logits(tiny_images)
    np.testing.assert_array_equal(attach(tiny_resnet, "original").logits(tiny_images), reference)
    np.testing.assert_array_equal(attach(tiny_resnet, HookMode.BACKWARD_HOOK).logits(tiny_images), reference)


def test_attach_leaves_the_model_untouched(tiny_resnet, tiny_images):
    before = {key: value.copy() for key, value in tiny_resnet.parameters.items()}
    view = attach(tiny_resnet, "forward")
    assert view.mode == "forward_hook"
    assert set(view.overrides) == {"stage1.block1.conv1", "stage2.block1.conv1", "stage3.block1.conv1"}
    view.logits(tiny_images)
    for key, value in before.items():
        np.testing.assert_array_equal(tiny_resnet.parameters[key], value)


@pytest.mark.parametrize("mode", ["backward", "forward"])
def test_hooked_hidden_gradients_are_phase_free(tiny_resnet, tiny_images, mode):
    original = hidden_gradient(ModelView(tiny_resnet), tiny_images, "stage1.out")
    hooked = hidden_gradient(attach(tiny_resnet, mode), tiny_images, "stage1.out")
    assert phase_spread(original) > 1e-3
    assert phase_spread(hooked) < 1e-9


def test_hooked_gradients_change(tiny_resnet, tiny_images):
    original = hidden_gradient(ModelView(tiny_resnet), tiny_images, "stage1.out")
    hooked = hidden_gradient(attach(tiny_resnet, "backward"), tiny_images, "stage1.out")
    assert not np.allclose(original, hooked)


def test_surrogate_mode_needs_every_surrogate(tiny_resnet):
    with pytest.raises(ConfigError):
        attach(tiny_resnet, "surrogate", {})


def test_exact_surrogate_reproduces_an_average_pool(rng):
    model = avgpool_conv_model()
    layer = model.layer("down")
    path = init_surrogate(layer, model.layer_parameters(layer), rng, noise=0.0)
    images = rng.normal(size=(4, 1, 8, 8))
    np.testing.assert_allclose(attach(model, "surrogate", {"down": path}).logits(images),
                               ModelView(model).logits(images), atol=1e-12)
    assert surrogate_l1(path, model, images) < 1e-12


# ---------------------------------------------------------------- training

def _pool_dataset(count=32, seed=0):
    images = np.random.default_rng(seed).normal(size=(count, 1, 8, 8))
    return DatasetHandle(images, np.arange(count) % 2, ("a", "b"), NormalizationStats((0.0,), (1.0,)))


def test_surrogate_training_is_deterministic():
    model, data = avgpool_conv_model(), _pool_dataset(16)
    cfg = SurrogateTrainConfig(epochs=2, batch_size=4, seed=9)
    a = train_surrogates(model, data, cfg)["down"]
    b = train_surrogates(model, data, cfg)["down"]
    assert a.log == b.log
    for name in SurrogatePath.PARAMETER_NAMES:
        np.testing.assert_array_equal(a.parameters[name], b.parameters[name])


def test_surrogate_training_reduces_the_error():
    model, data = avgpool_conv_model(), _pool_dataset()
    cfg = SurrogateTrainConfig(epochs=5, batch_size=4, seed=1)
    layer = model.layer("down")
    initial = init_surrogate(layer, model.layer_parameters(layer), stream(1, "surrogate-init/down"))
    trained = train_surrogates(model, data, cfg)["down"]
    assert [entry["epoch"] for entry in trained.log] == [1, 2, 3, 4, 5]
    assert trained.final_l1 == trained.log[-1]["l1"]
    assert surrogate_l1(trained, model, data.images) < surrogate_l1(initial, model, data.images)


def test_only_eligible_convs_get_surrogates():
    with pytest.raises(ConfigError):
        train_surrogates(avgpool_conv_model(), _pool_dataset(4), SurrogateTrainConfig(epochs=1, layers=("stem",)))


def test_save_and_load_surrogates(tmp_path):
    model, data = avgpool_conv_model(), _pool_dataset(8)
    paths = train_surrogates(model, data, SurrogateTrainConfig(epochs=1, batch_size=4))
    save_surrogates(paths, tmp_path)
    loaded = load_surrogates(tmp_path)
    assert set(loaded) == {"down"}
    assert loaded["down"].log == paths["down"].log
    np.testing.assert_array_equal(attach(model, "surrogate", loaded).logits(data.images),
                                  attach(model, "surrogate", paths).logits(data.images))


def test_no_surrogates_saved(tmp_path):
    assert load_surrogates(tmp_path) == {}
