"""Layer graphs, the desk-scale mini-ResNet and eval-mode forward passes."""
import copy
import logging
import re
from dataclasses import dataclass, field
from typing import Callable, Mapping, NamedTuple, Optional

import numpy as np

import settings
from errors import ConfigError, DimensionError, UsageError
from seeding import stream
from spatial_ops import avg_pool_2x, conv2d, max_pool_2x
from tensor_core import (Tensor, add, as_tensor, channel_affine, global_average_pool, linear, relu,
                         sigmoid, softmax)

logger = logging.getLogger(__name__)

INPUT = settings.INPUT_LAYER

KINDS = ("conv", "relu", "residual_add", "maxpool2x", "avgpool2x", "global_avg_pool", "linear",
         "frozen_batchnorm")

PARAM_NAMES = {
    "linear": ("weight", "bias"),
    "frozen_batchnorm": ("scale", "shift"),
}

_BLOCK_OUT = re.compile(r"^stage(\d+)\.block(\d+)\.out$")


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str
    inputs: tuple
    params: dict = field(default_factory=dict)
    replaceable: bool = True

    @property
    def stride(self):
        return self.params.get("stride", 1)

    @property
    def is_downsampling_conv(self):
        return self.kind == "conv" and self.stride == 2

    @property
    def param_names(self):
        if self.kind == "conv":
            return ("weight", "bias") if self.params.get("bias") else ("weight",)
        return PARAM_NAMES.get(self.kind, ())

    def to_dict(self):
        return {
            "id": self.id,
            "kind": self.kind,
            "inputs": list(self.inputs),
            "params": dict(self.params),
            "replaceable": self.replaceable,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(data["id"], data["kind"], tuple(data["inputs"]), dict(data.get("params", {})),
                   bool(data.get("replaceable", True)))


def conv_layer(layer_id, source, in_channels, out_channels, kernel, stride=1, padding=0, bias=False,
               replaceable=True):
    return LayerSpec(layer_id, "conv", (source,), {
        "in_channels": in_channels, "out_channels": out_channels, "kernel": kernel,
        "stride": stride, "padding": padding, "bias": bias,
    }, replaceable)


class ModelGraph:
    """Topologically ordered layers plus their parameters; eval mode only.

    Parameters are keyed "<layer id>.<name>" and stored as read-only arrays.
    """

    mode = "eval"

    def __init__(self, layers, parameters, classes, output="fc", config=None, aliases=None,
                 metadata=None):
        self.layers = tuple(layers)
        self.classes = int(classes)
        self.output = output
        self.config = dict(config or {})
        self.aliases = dict(aliases or {})
        self.metadata = dict(metadata or {})
        self._index = {}
        for position, layer in enumerate(self.layers):
            self._validate_layer(layer)
            self._index[layer.id] = position
        if output not in self._index:
            raise ConfigError(f"output layer {output!r} is not in the graph")
        self.parameters = {}
        for layer in self.layers:
            for name in layer.param_names:
                key = f"{layer.id}.{name}"
                if key not in parameters:
                    raise ConfigError(f"missing parameter {key}")
                array = np.array(parameters[key])
                array.flags.writeable = False
                self.parameters[key] = array

    def _validate_layer(self, layer):
        if layer.id in self._index or layer.id == INPUT:
            raise ConfigError(f"duplicate layer id {layer.id!r}")
        if layer.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {layer.kind!r}")
        if layer.stride not in (1, 2):
            raise ConfigError(f"{layer.id}: stride must be 1 or 2")
        for source in layer.inputs:
            if source != INPUT and source not in self._index:
                raise ConfigError(f"{layer.id}: input {source!r} is not defined before it")
        expected = 2 if layer.kind == "residual_add" else 1
        if len(layer.inputs) != expected:
            raise ConfigError(f"{layer.id}: {layer.kind} takes {expected} input(s)")

    def __contains__(self, layer_id):
        return self.resolve(layer_id, strict=False) is not None

    def resolve(self, layer_id, strict=True):
        layer_id = self.aliases.get(layer_id, layer_id)
        if layer_id == INPUT or layer_id in self._index:
            return layer_id
        if strict:
            raise UsageError(f"unknown layer id {layer_id!r}")
        return None

    def layer(self, layer_id):
        resolved = self.resolve(layer_id)
        if resolved == INPUT:
            raise UsageError("the input is not a layer")
        return self.layers[self._index[resolved]]

    def position(self, layer_id):
        resolved = self.resolve(layer_id)
        return -1 if resolved == INPUT else self._index[resolved]

    def layer_parameters(self, layer):
        return {name: self.parameters[f"{layer.id}.{name}"] for name in layer.param_names}

    def parameterized_layers(self):
        return [layer for layer in self.layers if layer.param_names]

    def with_parameters(self, updates, metadata=None):
        parameters = dict(self.parameters)
        parameters.update(updates)
        merged = dict(self.metadata)
        merged.update(metadata or {})
        return ModelGraph(self.layers, parameters, self.classes, self.output, copy.deepcopy(self.config),
                          self.aliases, merged)

    def __repr__(self):
        return f"ModelGraph({len(self.layers)} layers, {self.classes} classes)"


# ---------------------------------------------------------------- forward

LayerFn = Callable[[LayerSpec, list, dict], Tensor]


def apply_layer(layer, inputs, params):
    kind = layer.kind
    x = inputs[0]
    if kind == "conv":
        return conv2d(x, params["weight"], params.get("bias"), layer.stride, layer.params["padding"])
    if kind == "relu":
        return relu(x)
    if kind == "residual_add":
        if inputs[0].shape != inputs[1].shape:
            raise DimensionError(f"{layer.id}: residual shapes {inputs[0].shape} and {inputs[1].shape}")
        return add(inputs[0], inputs[1])
    if kind == "maxpool2x":
        return max_pool_2x(x)
    if kind == "avgpool2x":
        return avg_pool_2x(x)
    if kind == "global_avg_pool":
        return global_average_pool(x)
    if kind == "linear":
        return linear(x, params["weight"], params["bias"])
    if kind == "frozen_batchnorm":
        return channel_affine(x, params["scale"], params["shift"])
    raise ConfigError(f"unknown layer kind {kind!r}")


def forward(model, batch, tape=None, capture=(), overrides=None, inject=None, params=None):
    """Run the graph on `batch`.

    capture  -- layer ids (aliases and "input" allowed) whose outputs are returned
    overrides -- layer id -> fn(layer, inputs, params) replacing that layer
    inject   -- layer id -> Tensor replacing that layer's output
    params   -- parameter key -> Tensor (e.g. tape-watched leaves for training)
    """
    batch = as_tensor(batch)
    overrides = overrides or {}
    inject = {model.resolve(k): v for k, v in (inject or {}).items()}
    wanted = {name: model.resolve(name) for name in capture}

    expected = model.config.get("in_channels")
    if batch.ndim != 4 or (expected is not None and batch.shape[1] != expected):
        raise DimensionError(f"batch shape {batch.shape} does not match the model input")
    size = model.config.get("image_size")
    if size is not None and batch.shape[2:] != (size, size):
        raise DimensionError(f"batch spatial size {batch.shape[2:]} does not match {size}x{size}")
    if tape is not None and batch.tape is None:
        batch = tape.watch(batch)

    values = {INPUT: inject.get(INPUT, batch)}
    for layer in model.layers:
        inputs = [values[source] for source in layer.inputs]
        if params is not None:
            layer_params = {name: params[f"{layer.id}.{name}"] for name in layer.param_names}
        else:
            layer_params = model.layer_parameters(layer)
        fn = overrides.get(layer.id)
        out = fn(layer, inputs, layer_params) if fn is not None else apply_layer(layer, inputs, layer_params)
        values[layer.id] = inject.get(layer.id, out)

    captured = {name: values[resolved] for name, resolved in wanted.items()}
    return values[model.output], captured


@dataclass(frozen=True)
class ModelView:
    """A model seen through per-layer overrides; the model itself is never changed."""

    model: ModelGraph
    mode: str = "original"
    overrides: Mapping = field(default_factory=dict)

    def forward(self, batch, tape=None, capture=(), inject=None, extra_overrides=None, params=None):
        overrides = dict(self.overrides)
        overrides.update(extra_overrides or {})
        return forward(self.model, batch, tape, capture, overrides, inject, params)

    def logits(self, images, batch_size=settings.EVAL_BATCH):
        images = images.data if isinstance(images, Tensor) else np.asarray(images)
        chunks = []
        for start in range(0, len(images), batch_size):
            logits, _ = self.forward(images[start:start + batch_size])
            chunks.append(logits.data)
        return np.concatenate(chunks, axis=0)

    def probabilities(self, images, batch_size=settings.EVAL_BATCH):
        """Softmax over classes, or sigmoid for a single-logit head."""
        logits = self.logits(images, batch_size)
        if self.model.classes == 1:
            return sigmoid(Tensor(logits)).data
        return softmax(Tensor(logits)).data


# ---------------------------------------------------------------- initialisation

def kaiming_uniform(shape, rng, dtype=np.float32):
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_layer(layer, rng, dtype=np.float32):
    """Framework-default fresh parameters for one layer."""
    p = layer.params
    if layer.kind == "conv":
        shape = (p["out_channels"], p["in_channels"], p["kernel"], p["kernel"])
        out = {"weight": kaiming_uniform(shape, rng, dtype)}
        if p.get("bias"):
            out["bias"] = np.zeros(p["out_channels"], dtype=dtype)
        return out
    if layer.kind == "linear":
        shape = (p["out_features"], p["in_features"])
        return {"weight": kaiming_uniform(shape, rng, dtype), "bias": np.zeros(shape[0], dtype=dtype)}
    if layer.kind == "frozen_batchnorm":
        return {"scale": np.ones(p["channels"], dtype=dtype), "shift": np.zeros(p["channels"], dtype=dtype)}
    return {}


def init_parameters(layers, seed, dtype=np.float32):
    parameters = {}
    for layer in layers:
        rng = stream(seed, f"init/{layer.id}")
        for name, value in init_layer(layer, rng, dtype).items():
            parameters[f"{layer.id}.{name}"] = value
    return parameters


# ---------------------------------------------------------------- mini-ResNet

@dataclass(frozen=True)
class ResNetConfig:
    in_channels: int = settings.IN_CHANNELS
    image_size: int = settings.IMAGE_SIZE
    classes: int = 4
    widths: tuple = settings.STAGE_WIDTHS
    blocks: int = settings.BLOCKS_PER_STAGE

    def to_dict(self):
        return {"in_channels": self.in_channels, "image_size": self.image_size, "classes": self.classes,
                "widths": list(self.widths), "blocks": self.blocks}

    @classmethod
    def from_dict(cls, data):
        return cls(int(data["in_channels"]), int(data["image_size"]), int(data["classes"]),
                   tuple(int(w) for w in data["widths"]), int(data["blocks"]))


def _batchnorm(layer_id, source, channels):
    return LayerSpec(layer_id, "frozen_batchnorm", (source,), {"channels": channels})


def build_mini_resnet(cfg=None, seed=settings.DEFAULT_SEED):
    """Stem stride-2 conv followed by one stride-2 entry conv per stage.

    Shortcuts downsample with a 2x2 average pool (plus a 1x1 conv when the
    width changes) so the only downsampling convs are the stem and the stage
    entries.
    """
    cfg = cfg or ResNetConfig()
    stages = len(cfg.widths)
    if stages < 1 or cfg.blocks < 1:
        raise ConfigError("need at least one stage with one block")
    if cfg.classes < 1:
        raise ConfigError(f"classes must be >= 1, got {cfg.classes}")
    factor = 2 ** (1 + stages)
    if cfg.image_size % factor:
        raise ConfigError(f"image size {cfg.image_size} is not divisible by {factor}")

    layers = [
        conv_layer("stem", INPUT, cfg.in_channels, cfg.widths[0], 3, stride=2, padding=1, replaceable=False),
        _batchnorm("stem.bn", "stem", cfg.widths[0]),
        LayerSpec("stem.relu", "relu", ("stem.bn",)),
    ]
    aliases = {"stem.out": "stem.relu"}
    previous, channels = "stem.relu", cfg.widths[0]
    for s, width in enumerate(cfg.widths, 1):
        for b in range(1, cfg.blocks + 1):
            prefix = f"stage{s}.block{b}"
            stride = 2 if b == 1 else 1
            layers += [
                conv_layer(f"{prefix}.conv1", previous, channels, width, 3, stride=stride, padding=1),
                _batchnorm(f"{prefix}.bn1", f"{prefix}.conv1", width),
                LayerSpec(f"{prefix}.relu1", "relu", (f"{prefix}.bn1",)),
                conv_layer(f"{prefix}.conv2", f"{prefix}.relu1", width, width, 3, padding=1),
                _batchnorm(f"{prefix}.bn2", f"{prefix}.conv2", width),
            ]
            skip = previous
            if stride == 2:
                layers.append(LayerSpec(f"{prefix}.shortcut.pool", "avgpool2x", (skip,)))
                skip = f"{prefix}.shortcut.pool"
            if channels != width:
                layers += [
                    conv_layer(f"{prefix}.shortcut.conv", skip, channels, width, 1),
                    _batchnorm(f"{prefix}.shortcut.bn", f"{prefix}.shortcut.conv", width),
                ]
                skip = f"{prefix}.shortcut.bn"
            layers += [
                LayerSpec(f"{prefix}.add", "residual_add", (f"{prefix}.bn2", skip)),
                LayerSpec(f"{prefix}.out", "relu", (f"{prefix}.add",)),
            ]
            previous, channels = f"{prefix}.out", width
        aliases[f"stage{s}.out"] = previous
    layers += [
        LayerSpec("pool", "global_avg_pool", (previous,)),
        LayerSpec("fc", "linear", ("pool",), {"in_features": channels, "out_features": cfg.classes}),
    ]
    parameters = init_parameters(layers, seed)
    logger.info("built mini-ResNet: %d layers, %d parameters", len(layers),
                sum(v.size for v in parameters.values()))
    return ModelGraph(layers, parameters, cfg.classes, "fc", cfg.to_dict(), aliases,
                      {"init_seed": int(seed)})


# ---------------------------------------------------------------- queries

class DownsamplingConv(NamedTuple):
    layer_id: str
    excluded: bool


def list_downsampling_convs(model):
    """Stride-2 convs in forward order; the first one is always excluded."""
    convs = [layer for layer in model.layers if layer.is_downsampling_conv]
    return [DownsamplingConv(layer.id, index == 0 or not layer.replaceable)
            for index, layer in enumerate(convs)]


def eligible_downsampling_convs(model):
    return [conv.layer_id for conv in list_downsampling_convs(model) if not conv.excluded]


def block_outputs(model):
    return [layer.id for layer in model.layers if _BLOCK_OUT.match(layer.id)]


def hidden_layers(model):
    """Activations that feed an eligible downsampling conv (excluding the stem output)."""
    out = []
    for conv_id in eligible_downsampling_convs(model):
        source = model.layer(conv_id).inputs[0]
        if _BLOCK_OUT.match(source) and source not in out:
            out.append(source)
    return out


def last_conv_layer(model):
    """The activation read by the global average pool."""
    for layer in model.layers:
        if layer.kind == "global_avg_pool":
            return layer.inputs[0]
    raise UsageError("model has no global average pool, so no last convolutional layer")


def default_cut_points(model):
    """Head first: the output layer, each block's first conv from the last block back, then the stem."""
    points = [model.output]
    for layer in reversed(model.layers):
        if layer.kind == "conv" and layer.id.endswith(".conv1"):
            points.append(layer.id)
    first = model.parameterized_layers()[0].id
    if first not in points:
        points.append(first)
    return points


def display_name(layer_id):
    if layer_id == INPUT:
        return "Input"
    match = _BLOCK_OUT.match(layer_id)
    if match:
        return f"{match.group(1)}_{match.group(2)}"
    return layer_id


def randomize_from_end(model, upto, seed):
    """Copy of `model` with `upto` and every later parameterized layer re-initialized."""
    resolved = model.resolve(upto)
    layers = model.parameterized_layers()
    ids = [layer.id for layer in layers]
    if resolved not in ids:
        raise UsageError(f"{upto!r} is not a parameterized layer")
    fresh = init_parameters(layers[ids.index(resolved):], seed,
                            dtype=next(iter(model.parameters.values())).dtype)
    return model.with_parameters(fresh, {"randomized_from": resolved, "randomize_seed": int(seed)})
