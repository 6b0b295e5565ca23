import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

import numpy as np
import pytest

from nn_models import LayerSpec, ModelGraph, ResNetConfig, build_mini_resnet, conv_layer
from tensor_core import Tape, backward, mul, tensor_sum

TINY_RESNET = ResNetConfig(in_channels=3, image_size=16, classes=3, widths=(4, 6, 8), blocks=1)


def finite_difference(fn, x, h=1e-5):
    """Central differences of the scalar fn at every entry of the float64 array x."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        original = x[index]
        x[index] = original + h
        plus = fn(x)
        x[index] = original - h
        minus = fn(x)
        x[index] = original
        grad[index] = (plus - minus) / (2 * h)
    return grad


def relative_error(actual, expected):
    actual, expected = np.asarray(actual), np.asarray(expected)
    scale = max(np.abs(expected).max(), 1e-8)
    return float(np.abs(actual - expected).max() / scale)


def tape_gradients(op, arrays, seed=0):
    """Gradients of sum(op(*arrays) * R) for a fixed random R, one per argument."""
    tape = Tape()
    watched = [tape.watch(a) for a in arrays]
    out = op(*watched)
    weight = np.random.default_rng(seed).normal(size=out.shape)
    store = backward(tensor_sum(mul(out, weight)), tape)
    return [store.grad(w).data for w in watched], weight


def assert_gradients(op, *arrays, tol=1e-5):
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    grads, weight = tape_gradients(op, arrays)
    for i in range(len(arrays)):
        def objective(xi, i=i):
            args = arrays[:i] + [xi] + arrays[i + 1:]
            return float((op(*args).data * weight).sum())

        numeric = finite_difference(objective, arrays[i])
        assert relative_error(grads[i], numeric) < tol, f"argument {i}"


def to_float64(model):
    return model.with_parameters({key: value.astype(np.float64) for key, value in model.parameters.items()})


def with_offsets(model, seed=0):
    """Non-trivial batchnorm affines and head bias, so the network is not positively homogeneous."""
    rng = np.random.default_rng(seed)
    updates = {}
    for key, value in model.parameters.items():
        if key.endswith(".scale"):
            updates[key] = rng.uniform(0.5, 1.5, size=value.shape)
        elif key.endswith(".shift") or key == "fc.bias":
            updates[key] = rng.normal(0.0, 0.3, size=value.shape)
    return model.with_parameters(updates)


def linear_model(weights):
    """logits[k] = sum(weights[k] * x): one full-image conv read through a 1x1 average pool."""
    weights = np.asarray(weights, dtype=np.float64)
    classes, channels, size, _ = weights.shape
    layers = [
        conv_layer("score", "input", channels, classes, size),
        LayerSpec("pool", "global_avg_pool", ("score",)),
    ]
    return ModelGraph(layers, {"score.weight": weights}, classes, output="pool",
                      config={"in_channels": channels, "image_size": size})


def avgpool_conv_model(seed=0, channels=2, size=8, classes=2):
    """Stem conv, then a stride-2 conv that is exactly a 2x2 average pool, then the head."""
    rng = np.random.default_rng(seed)
    pool = np.zeros((channels, channels, 2, 2))
    pool[np.arange(channels), np.arange(channels)] = 0.25
    layers = [
        conv_layer("stem", "input", 1, channels, 3, stride=2, padding=1, replaceable=False),
        LayerSpec("stem.relu", "relu", ("stem",)),
        conv_layer("down", "stem.relu", channels, channels, 2, stride=2),
        LayerSpec("pool", "global_avg_pool", ("down",)),
        LayerSpec("fc", "linear", ("pool",), {"in_features": channels, "out_features": classes}),
    ]
    parameters = {
        "stem.weight": rng.normal(0.0, 0.5, size=(channels, 1, 3, 3)),
        "down.weight": pool,
        "fc.weight": rng.normal(0.0, 1.0, size=(classes, channels)),
        "fc.bias": np.zeros(classes),
    }
    return ModelGraph(layers, parameters, classes, config={"in_channels": 1, "image_size": size})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_resnet():
    return with_offsets(to_float64(build_mini_resnet(TINY_RESNET, seed=7)), seed=7)


@pytest.fixture(scope="session")
def tiny_images():
    return np.random.default_rng(99).normal(size=(3, 3, 16, 16))
