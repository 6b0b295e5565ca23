"""Checkerboard-noise removal for stride-2 convs.

Three ways to treat every eligible downsampling conv (all but the first):

* backward hook - the conv's input-gradient is replaced by the mean of four
  spatially rolled copies of itself; the forward pass is untouched.
* forward hook  - the conv runs four times on rolled inputs and the outputs are
  averaged; autodiff through it yields the backward-hook gradient.
* surrogate     - the conv is swapped for conv3x3 -> bilinear down 2x -> conv3x3,
  trained with an L1 loss to mimic it while the backbone stays frozen.
"""
import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

import settings
from checkpoint import FORMAT, VERSION, load_parameters, read_manifest, save_parameters, write_manifest
from errors import ConfigError, DimensionError
from nn_models import ModelView, eligible_downsampling_convs
from seeding import stream
from spatial_ops import RollOffset, bilinear_down2x, conv2d, roll2d
from tensor_core import Tape, add, as_tensor, backward, gradient_hook, mean, scale, sub, tensor_abs
from training import Adam

logger = logging.getLogger(__name__)

SURROGATE_DIR = "surrogates"


class HookMode(enum.Enum):
    ORIGINAL = "original"
    BACKWARD_HOOK = "backward_hook"
    FORWARD_HOOK = "forward_hook"
    SURROGATE = "surrogate"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        aliases = {"backward": cls.BACKWARD_HOOK, "forward": cls.FORWARD_HOOK}
        try:
            return aliases.get(value) or cls(value)
        except ValueError:
            raise ConfigError(f"unknown hook mode {value!r}") from None

    @property
    def short_name(self):
        return {"backward_hook": "backward", "forward_hook": "forward"}.get(self.value, self.value)


@dataclass(frozen=True)
class RollSet:
    forward: tuple = tuple(RollOffset.of(d) for d in settings.FORWARD_ROLLS)
    backward: tuple = None

    def __post_init__(self):
        offsets = tuple(RollOffset.of(d) for d in self.forward)
        if len(offsets) != 4 or RollOffset(0, 0) not in offsets:
            raise ConfigError("a roll set needs exactly four offsets including (0, 0)")
        object.__setattr__(self, "forward", offsets)
        if self.backward is None:
            object.__setattr__(self, "backward", tuple(-d for d in offsets))
        else:
            object.__setattr__(self, "backward", tuple(RollOffset.of(d) for d in self.backward))

    @classmethod
    def literal(cls):
        """Backward hook rolls with the forward offsets instead of their inverses."""
        offsets = tuple(RollOffset.of(d) for d in settings.FORWARD_ROLLS)
        return cls(offsets, offsets)

    @classmethod
    def configured(cls, literal_rolls=False):
        return cls.literal() if literal_rolls else cls()


DEFAULT_ROLLS = RollSet()


def _mean_of_four(a, b, c, d):
    # pairwise so that equal inputs stay exact
    return scale(add(add(a, b), add(c, d)), 0.25)


def backward_hook(grad_input, rolls=DEFAULT_ROLLS):
    grad = as_tensor(grad_input)
    return _mean_of_four(*(roll2d(grad, offset) for offset in rolls.backward))


class ConvParams(NamedTuple):
    weight: object
    bias: object
    stride: int
    padding: int

    @classmethod
    def of(cls, layer, params):
        return cls(params["weight"], params.get("bias"), layer.stride, layer.params["padding"])


def forward_hook(conv, input, rolls=DEFAULT_ROLLS):
    """Mean of the conv applied to four rolled copies of `input`."""
    input = as_tensor(input)
    if input.ndim != 4 or input.shape[2] % 2 or input.shape[3] % 2:
        raise DimensionError(f"forward_hook needs even spatial extents, got {input.shape}")
    outputs = [conv2d(roll2d(input, offset), conv.weight, conv.bias, conv.stride, conv.padding)
               for offset in rolls.forward]
    return _mean_of_four(*outputs)


# ---------------------------------------------------------------- surrogate

@dataclass
class SurrogatePath:
    layer_id: str
    pre_weight: np.ndarray
    pre_bias: np.ndarray
    post_weight: np.ndarray
    post_bias: np.ndarray
    log: list = field(default_factory=list)
    final_l1: float = float("nan")

    PARAMETER_NAMES = ("pre.weight", "pre.bias", "post.weight", "post.bias")

    @property
    def parameters(self):
        return dict(zip(self.PARAMETER_NAMES, (self.pre_weight, self.pre_bias, self.post_weight, self.post_bias)))

    def with_parameters(self, params, log=None, final_l1=None):
        return SurrogatePath(self.layer_id, *(np.array(params[name]) for name in self.PARAMETER_NAMES),
                             log=list(self.log if log is None else log),
                             final_l1=self.final_l1 if final_l1 is None else final_l1)


def surrogate_forward(path, input, params=None):
    """conv_post(bilinear_down2x(conv_pre(input))), both convs 3x3 stride 1 padding 1."""
    input = as_tensor(input)
    p = params if params is not None else path.parameters
    if input.ndim != 4 or input.shape[1] != p["pre.weight"].shape[1]:
        raise DimensionError(f"surrogate for {path.layer_id} expects {p['pre.weight'].shape[1]} channels, "
                             f"got input {input.shape}")
    hidden = conv2d(input, p["pre.weight"], p["pre.bias"], stride=1, padding=1)
    return conv2d(bilinear_down2x(hidden), p["post.weight"], p["post.bias"], stride=1, padding=1)


def check_geometry(layer):
    """A stride-2 conv whose output is exactly half its even input."""
    kernel, padding = layer.params["kernel"], layer.params["padding"]
    if layer.stride != 2 or 2 * padding - kernel not in (-1, -2):
        raise ConfigError(f"{layer.id}: no surrogate geometry for kernel {kernel}, stride {layer.stride}, "
                          f"padding {padding}")


def init_surrogate(layer, params, rng, noise=settings.SURROGATE_INIT_NOISE):
    check_geometry(layer)
    weight = np.asarray(params["weight"])
    out_channels, in_channels, k, _ = weight.shape
    dtype = weight.dtype

    pre = np.zeros((in_channels, in_channels, 3, 3), dtype=dtype)
    pre[np.arange(in_channels), np.arange(in_channels), 1, 1] = 1
    pre = (pre + rng.normal(0.0, noise, size=pre.shape)).astype(dtype)

    post = np.zeros((out_channels, in_channels, 3, 3), dtype=dtype)
    if k >= 3 and k % 2:
        c = k // 2
        post[:] = weight[:, :, c - 1:c + 2, c - 1:c + 2]
    else:
        post[:, :, 1, 1] = weight.sum(axis=(2, 3))
    bias = params.get("bias")
    post_bias = np.array(bias, dtype=dtype) if bias is not None else np.zeros(out_channels, dtype=dtype)
    return SurrogatePath(layer.id, pre, np.zeros(in_channels, dtype=dtype), post, post_bias)


# ---------------------------------------------------------------- attach

def _backward_hooked_conv(rolls):
    def run(layer, inputs, params):
        hooked = gradient_hook(inputs[0], lambda g: backward_hook(g, rolls).data)
        conv = ConvParams.of(layer, params)
        return conv2d(hooked, conv.weight, conv.bias, conv.stride, conv.padding)
    return run


def _forward_hooked_conv(rolls):
    def run(layer, inputs, params):
        return forward_hook(ConvParams.of(layer, params), inputs[0], rolls)
    return run


def _surrogate_conv(path):
    def run(layer, inputs, params):
        return surrogate_forward(path, inputs[0])
    return run


def attach(model, mode, surrogates=None, rolls=DEFAULT_ROLLS):
    """A ModelView applying `mode` to every eligible downsampling conv; the model is untouched."""
    mode = HookMode.parse(mode)
    targets = eligible_downsampling_convs(model)
    overrides = {}
    if mode is HookMode.BACKWARD_HOOK:
        overrides = {layer_id: _backward_hooked_conv(rolls) for layer_id in targets}
    elif mode is HookMode.FORWARD_HOOK:
        overrides = {layer_id: _forward_hooked_conv(rolls) for layer_id in targets}
    elif mode is HookMode.SURROGATE:
        surrogates = surrogates or {}
        missing = [layer_id for layer_id in targets if layer_id not in surrogates]
        if missing:
            raise ConfigError(f"no trained surrogate for {', '.join(missing)}")
        for layer_id in targets:
            check_geometry(model.layer(layer_id))
            overrides[layer_id] = _surrogate_conv(surrogates[layer_id])
    return ModelView(model, mode.value, overrides)


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class SurrogateTrainConfig:
    epochs: int = settings.SURROGATE_EPOCHS
    lr: float = settings.SURROGATE_LR
    batch_size: int = settings.SURROGATE_BATCH_SIZE
    seed: int = settings.DEFAULT_SEED
    layers: tuple = None

    def __post_init__(self):
        if self.epochs < 1 or self.lr <= 0 or self.batch_size < 1:
            raise ConfigError(f"invalid surrogate training config {self}")


def l1_loss(prediction, target):
    return mean(tensor_abs(sub(prediction, target)))


def _surrogate_step(path, optimizer, inputs, targets):
    tape = Tape()
    watched = {name: tape.watch(value) for name, value in optimizer.params.items()}
    loss = l1_loss(surrogate_forward(path, inputs, watched), targets)
    store = backward(loss, tape)
    optimizer.step({name: store.grad(tensor).data for name, tensor in watched.items()})
    return loss.item()


def train_surrogates(model, dataset, cfg=None):
    """Fit one surrogate per eligible conv on (conv input, conv output) pairs of the frozen model."""
    cfg = cfg or SurrogateTrainConfig()
    layer_ids = list(cfg.layers) if cfg.layers else eligible_downsampling_convs(model)
    eligible = set(eligible_downsampling_convs(model))
    for layer_id in layer_ids:
        if layer_id not in eligible:
            raise ConfigError(f"{layer_id} is not an eligible downsampling conv")

    paths, optimizers = {}, {}
    for layer_id in layer_ids:
        layer = model.layer(layer_id)
        path = init_surrogate(layer, model.layer_parameters(layer), stream(cfg.seed, f"surrogate-init/{layer_id}"))
        paths[layer_id] = path
        optimizers[layer_id] = Adam(path.parameters, cfg.lr)
    sources = {layer_id: model.layer(layer_id).inputs[0] for layer_id in layer_ids}
    capture = sorted(set(sources.values()) | set(layer_ids))
    view = ModelView(model)

    rng = stream(cfg.seed, "surrogate")
    history = {layer_id: [] for layer_id in layer_ids}
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(dataset))
        batch_losses = {layer_id: [] for layer_id in layer_ids}
        for images, _ in dataset.batches(cfg.batch_size, order):
            _, captured = view.forward(images, capture=capture)
            for layer_id in layer_ids:
                loss = _surrogate_step(paths[layer_id], optimizers[layer_id],
                                       captured[sources[layer_id]].data, captured[layer_id].data)
                batch_losses[layer_id].append(loss)
        for layer_id in layer_ids:
            losses = batch_losses[layer_id]
            if epoch == 1 and len(losses) > 1 and losses[-1] >= losses[0]:
                logger.warning("%s: surrogate loss did not decrease during the first epoch (%.5f -> %.5f)",
                               layer_id, losses[0], losses[-1])
            history[layer_id].append({"epoch": epoch, "l1": float(np.mean(losses))})
            logger.info("epoch %d/%d %s: mean L1 %.6f", epoch, cfg.epochs, layer_id, history[layer_id][-1]["l1"])

    return {layer_id: paths[layer_id].with_parameters(optimizers[layer_id].params, history[layer_id],
                                                      history[layer_id][-1]["l1"])
            for layer_id in layer_ids}


def surrogate_l1(path, model, images):
    """Mean L1 between the surrogate and the conv it replaces on `images`."""
    source = model.layer(path.layer_id).inputs[0]
    _, captured = ModelView(model).forward(images, capture=(source, path.layer_id))
    return l1_loss(surrogate_forward(path, captured[source]), captured[path.layer_id]).item()


# ---------------------------------------------------------------- persistence

def save_surrogates(paths, model_dir):
    root = Path(model_dir) / SURROGATE_DIR
    for layer_id, path in sorted(paths.items()):
        directory = root / layer_id
        write_manifest(directory / "manifest.json", {
            "format": FORMAT,
            "kind": "surrogate",
            "version": VERSION,
            "layer_id": layer_id,
            "final_l1": path.final_l1,
            "log": path.log,
            "parameters": save_parameters(directory, path.parameters),
        })
    logger.info("saved %d surrogates under %s", len(paths), root)
    return root


def load_surrogates(model_dir):
    root = Path(model_dir) / SURROGATE_DIR
    paths = {}
    if not root.is_dir():
        return paths
    for directory in sorted(p for p in root.iterdir() if (p / "manifest.json").exists()):
        manifest = read_manifest(directory, "surrogate")
        params = load_parameters(directory, manifest["parameters"])
        layer_id = manifest["layer_id"]
        paths[layer_id] = SurrogatePath(layer_id, *(params[name] for name in SurrogatePath.PARAMETER_NAMES),
                                        log=manifest.get("log", []), final_l1=manifest.get("final_l1"))
    return paths
