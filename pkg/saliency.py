"""Attribution at the input or any hidden layer: gradient, IG, DeepLift (rescale), GradCAM.

Every method works on a batch internally. A single C x H x W image gives a
SaliencyMap without the leading batch axis; a batch keeps it.
"""
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

import settings
from errors import UsageError
from nn_models import last_conv_layer
from seeding import stream
from spatial_ops import bilinear_upsample
from tensor_core import Tape, Tensor, backward, mul, rescale_nonlinearity, tensor_sum


INPUT = settings.INPUT_LAYER
REDUCE_MODES = ("mean_abs", "mean", "sum")


@dataclass(frozen=True)
class SmoothGradConfig:
    n: int = settings.SMOOTHGRAD_N
    sigma: float = settings.SMOOTHGRAD_SIGMA
    seed: int = settings.DEFAULT_SEED

    def __post_init__(self):
        if self.n < 1 or self.sigma < 0:
            raise UsageError(f"SmoothGrad needs n >= 1 and sigma >= 0, got n={self.n}, sigma={self.sigma}")


@dataclass(frozen=True)
class AttributionRequest:
    method: str = "grad"
    layer: str = INPUT
    target: Optional[int] = None
    ig_steps: int = settings.IG_STEPS
    smoothgrad: Optional[SmoothGradConfig] = None
    reduce_mode: str = settings.REDUCE_MODE

    def __post_init__(self):
        if self.method not in settings.METHODS:
            raise UsageError(f"unknown attribution method {self.method!r}")
        if self.ig_steps < 1:
            raise UsageError(f"ig_steps must be >= 1, got {self.ig_steps}")
        if self.reduce_mode not in REDUCE_MODES:
            raise UsageError(f"unknown channel reduction {self.reduce_mode!r}")

    def for_model(self, model):
        """Resolve the GradCAM layer and reject any other layer for it."""
        if self.method != "gradcam":
            model.resolve(self.layer)
            return self
        last = last_conv_layer(model)
        if self.layer in (None, INPUT, "auto"):
            return replace(self, layer=last)
        if model.resolve(self.layer) != model.resolve(last):
            raise UsageError(f"GradCAM is only defined at the last convolutional layer ({last})")
        return self


@dataclass(frozen=True)
class Baseline:
    kind: str = "black"

    def tensor_for(self, images):
        """A black image is zeros in normalized space."""
        if self.kind != "black":
            raise UsageError(f"unknown baseline {self.kind!r}")
        return np.zeros_like(images)


BLACK = Baseline()


@dataclass(frozen=True)
class SaliencyMap:
    layer: str
    method: str
    raw: Tensor
    reduced: Tensor
    rendered: Tensor
    target: object = None

    def sample(self, index):
        target = self.target[index] if np.ndim(self.target) else self.target
        return SaliencyMap(self.layer, self.method, Tensor(self.raw.data[index]), Tensor(self.reduced.data[index]),
                           Tensor(self.rendered.data[index]), int(target))


def reduce_channels(raw, mode=settings.REDUCE_MODE):
    """Collapse the channel axis (third from the end) of C x h x w or N x C x h x w."""
    data = raw.data if isinstance(raw, Tensor) else np.asarray(raw)
    if mode == "mean_abs":
        return Tensor(np.abs(data).mean(axis=-3))
    if mode == "mean":
        return Tensor(data.mean(axis=-3))
    if mode == "sum":
        return Tensor(data.sum(axis=-3))
    raise UsageError(f"unknown channel reduction {mode!r}")


def upscale_map(reduced, size):
    return bilinear_upsample(reduced, size)


# ---------------------------------------------------------------- batched cores

def _as_batch(images):
    images = images.data if isinstance(images, Tensor) else np.asarray(images)
    if images.ndim == 3:
        return images[None], True
    return images, False


def _targets(view, req, count, targets=None):
    if targets is None:
        if req.target is None:
            raise UsageError("no attribution target given")
        targets = np.full(count, req.target)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if len(targets) != count:
        raise UsageError(f"{len(targets)} targets for {count} images")
    if targets.min() < 0 or targets.max() >= view.model.classes:
        raise UsageError(f"target out of range for a {view.model.classes}-logit model")
    return targets


def target_objective(logits, targets):
    """Sum over the batch of each sample's target logit."""
    mask = np.zeros(logits.shape, dtype=logits.dtype)
    mask[np.arange(len(targets)), targets] = 1
    return tensor_sum(mul(logits, mask))


def layer_gradients(view, images, layers, targets, inject=None, extra_overrides=None):
    """d(target logit)/d(activation) for each layer, plus the activations themselves."""
    tape = Tape()
    if inject:
        inject = {name: tape.watch(value) for name, value in inject.items()}
    logits, captured = view.forward(images, tape=tape, capture=layers, inject=inject,
                                    extra_overrides=extra_overrides)
    store = backward(target_objective(logits, targets), tape)
    grads = {layer: store.grad(captured[layer]).data for layer in layers}
    activations = {layer: captured[layer].data for layer in layers}
    return grads, activations


def _grad_raw(view, images, req, targets, baseline):
    grads, _ = layer_gradients(view, images, (req.layer,), targets)
    return grads[req.layer]


def _activations(view, images, layer):
    _, captured = view.forward(images, capture=(layer,))
    return captured[layer].data


def _ig_raw(view, images, req, targets, baseline, batch_size=settings.IG_BATCH):
    layer, steps = req.layer, req.ig_steps
    a = _activations(view, images, layer)
    a0 = _activations(view, baseline.tensor_for(images), layer)
    delta = a - a0
    total = np.zeros(a.shape, dtype=np.float64)
    rows = np.arange(len(images) * steps)
    for start in range(0, len(rows), batch_size):
        chunk = rows[start:start + batch_size]
        sample = chunk // steps
        step = chunk % steps + 1
        alpha = (step / steps).astype(a.dtype).reshape((-1,) + (1,) * (a.ndim - 1))
        # the right endpoint is the activation itself, not a0 + 1 * delta
        point = np.where(alpha == 1, a[sample], a0[sample] + alpha * delta[sample])
        grads, _ = layer_gradients(view, images[sample], (layer,), targets[sample], inject={layer: point})
        np.add.at(total, sample, grads[layer])
    return (delta * (total / steps)).astype(a.dtype)


def _nonlinear_layers(model):
    return [layer for layer in model.layers if layer.kind == "relu"]


def _rescale_override(reference, kind, eps):
    def run(layer, inputs, params):
        return rescale_nonlinearity(inputs[0], reference, kind, eps)
    return run


def _deeplift_raw(view, images, req, targets, baseline, eps=settings.DEEPLIFT_EPS):
    layer = req.layer
    nonlinear = _nonlinear_layers(view.model)
    sources = sorted({nl.inputs[0] for nl in nonlinear} | {layer})
    _, reference = view.forward(baseline.tensor_for(images), capture=sources)
    overrides = {nl.id: _rescale_override(reference[nl.inputs[0]].data, "relu", eps) for nl in nonlinear}
    grads, activations = layer_gradients(view, images, (layer,), targets, extra_overrides=overrides)
    return (activations[layer] - reference[layer].data) * grads[layer]


def _gradcam_raw(view, images, req, targets, baseline):
    grads, activations = layer_gradients(view, images, (req.layer,), targets)
    weights = grads[req.layer].mean(axis=(2, 3), keepdims=True)
    return weights * activations[req.layer]


RAW_METHODS = {
    "grad": _grad_raw,
    "ig": _ig_raw,
    "deeplift": _deeplift_raw,
    "gradcam": _gradcam_raw,
}


def _reduce(req, raw):
    if req.method == "gradcam":
        return np.maximum(raw.sum(axis=-3), 0)
    return reduce_channels(raw, req.reduce_mode).data


def _compute(view, images, req, targets, baseline):
    """(raw, reduced) for a batch, SmoothGrad-averaged when requested."""
    method = RAW_METHODS[req.method]
    if req.smoothgrad is None:
        raw = method(view, images, req, targets, baseline)
        return raw, _reduce(req, raw)
    cfg = req.smoothgrad
    rng = stream(cfg.seed, "smoothgrad")
    raw_sum = reduced_sum = None
    for _ in range(cfg.n):
        noise = rng.normal(0.0, cfg.sigma, size=images.shape).astype(images.dtype)
        raw = method(view, images + noise, req, targets, baseline)
        reduced = _reduce(req, raw)
        raw_sum = raw if raw_sum is None else raw_sum + raw
        reduced_sum = reduced if reduced_sum is None else reduced_sum + reduced
    return raw_sum / cfg.n, reduced_sum / cfg.n


def attribute(view, input, req, baseline=BLACK, targets=None):
    """Dispatch on req.method; `targets` overrides req.target per sample."""
    images, single = _as_batch(input)
    req = req.for_model(view.model)
    targets = _targets(view, req, len(images), targets)
    raw, reduced = _compute(view, images, req, targets, baseline)
    rendered = upscale_map(Tensor(reduced), images.shape[2:]).data
    if single:
        return SaliencyMap(req.layer, req.method, Tensor(raw[0]), Tensor(reduced[0]), Tensor(rendered[0]),
                           int(targets[0]))
    return SaliencyMap(req.layer, req.method, Tensor(raw), Tensor(reduced), Tensor(rendered), targets)


def attribute_in_batches(view, images, req, targets, baseline=BLACK, batch_size=settings.EVAL_BATCH):
    """Batched `attribute` over a whole array; returns one batched SaliencyMap."""
    parts = [attribute(view, images[start:start + batch_size], req, baseline, targets[start:start + batch_size])
             for start in range(0, len(images), batch_size)]
    first = parts[0]
    return SaliencyMap(first.layer, first.method,
                       Tensor(np.concatenate([p.raw.data for p in parts])),
                       Tensor(np.concatenate([p.reduced.data for p in parts])),
                       Tensor(np.concatenate([p.rendered.data for p in parts])),
                       np.concatenate([p.target for p in parts]))


def grad_attr(view, input, req):
    return attribute(view, input, replace(req, method="grad", smoothgrad=None))


def integrated_gradients(view, input, req, baseline=BLACK):
    return attribute(view, input, replace(req, method="ig", smoothgrad=None), baseline)


def deeplift_rescale(view, input, req, baseline=BLACK):
    return attribute(view, input, replace(req, method="deeplift", smoothgrad=None), baseline)


def gradcam(view, input, target):
    return attribute(view, input, AttributionRequest(method="gradcam", layer="auto", target=target))


def smoothgrad(method, view, input, req, cfg=None, baseline=BLACK):
    cfg = cfg or SmoothGradConfig()
    return attribute(view, input, replace(req, method=method, smoothgrad=cfg), baseline)
