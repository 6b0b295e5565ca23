"""Noise and faithfulness measures for saliency maps, plus model-level comparisons."""
import logging
from dataclasses import dataclass, field, replace

import numpy as np

import settings
from errors import DimensionError, UsageError
from nn_models import ModelView, randomize_from_end
from saliency import BLACK, attribute_in_batches, upscale_map
from seeding import stream
from spatial_ops import gaussian_blur2d
from tensor_core import Tensor
from training import predictions

logger = logging.getLogger(__name__)


def _array(value):
    if hasattr(value, "raw"):
        value = value.raw
    return np.asarray(value.data if isinstance(value, Tensor) else value, dtype=np.float64)


# ---------------------------------------------------------------- total variation

def zero_mean(z):
    """Subtract each channel's spatial mean (last two axes)."""
    z = np.asarray(z, dtype=np.float64)
    return z - z.mean(axis=(-2, -1), keepdims=True)


def _tv_channels(z, eps):
    if z.shape[-2] < 2 or z.shape[-1] < 2:
        raise DimensionError(f"total variation needs h, w >= 2, got {z.shape[-2:]}")
    centred = zero_mean(z)
    scale = np.maximum(np.abs(centred).mean(axis=(-2, -1), keepdims=True), eps)
    normalized = centred / scale
    h, w = z.shape[-2:]
    vertical = np.abs(np.diff(normalized, axis=-2)).sum(axis=(-2, -1))
    horizontal = np.abs(np.diff(normalized, axis=-1)).sum(axis=(-2, -1))
    pairs = (h - 1) * w + h * (w - 1)
    return (vertical + horizontal) / pairs


def total_variation(raw, eps=settings.TV_EPS):
    """Channel-averaged TV of the zero-meaned, magnitude-normalized map (C x h x w or h x w)."""
    z = _array(raw)
    if z.ndim == 2:
        z = z[None]
    if z.ndim != 3:
        raise DimensionError(f"total_variation expects C x h x w, got {z.shape}")
    return float(_tv_channels(z, eps).mean())


def total_variation_batch(raw, eps=settings.TV_EPS):
    """One TV value per sample of an N x C x h x w batch."""
    z = _array(raw)
    if z.ndim != 4:
        raise DimensionError(f"total_variation_batch expects N x C x h x w, got {z.shape}")
    return _tv_channels(z, eps).mean(axis=1)


def phase_spread(map, eps=settings.PHASE_EPS):
    """Spread of the four period-2 grid means relative to the mean magnitude."""
    z = _array(map)
    h, w = z.shape[-2:]
    if h % 2 or w % 2:
        raise DimensionError(f"phase_spread needs even extents, got {h}x{w}")
    means = [z[..., i::2, j::2].mean() for i in (0, 1) for j in (0, 1)]
    return float((max(means) - min(means)) / (np.abs(z).mean() + eps))


# ---------------------------------------------------------------- insertion / deletion

@dataclass(frozen=True)
class CurveConfig:
    steps: int = settings.INSDEL_STEPS
    blur_kernel: int = settings.BLUR_KERNEL
    blur_sigma: float = settings.BLUR_SIGMA
    baseline: str = "black"
    batch_size: int = settings.CURVE_BATCH

    def __post_init__(self):
        if self.steps < 1:
            raise UsageError(f"steps must be >= 1, got {self.steps}")

    def to_dict(self):
        return {"steps": self.steps, "blur_kernel": self.blur_kernel, "blur_sigma": self.blur_sigma,
                "baseline": self.baseline}


@dataclass(frozen=True)
class CurveResult:
    auc: float
    fractions: np.ndarray
    probabilities: np.ndarray


def step_counts(total, steps):
    """Pixels changed after each step; the last step takes the remainder."""
    per_step = total // steps
    return np.append(np.arange(steps) * per_step, total)


def pixel_ranks(saliency):
    """Rank of every pixel by descending saliency, ties in row-major order."""
    flat = np.asarray(saliency, dtype=np.float64).ravel()
    order = np.argsort(-flat, kind="stable")
    ranks = np.empty_like(order)
    ranks[order] = np.arange(len(order))
    return ranks.reshape(np.shape(saliency))


def trapezoid_auc(x, y):
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    return float(np.sum((y[1:] + y[:-1]) * np.diff(x)) / 2.0)


def _curve(view, start, finish, rendered, target, cfg):
    """Probability of `target` as pixels move from `start` to `finish` in saliency order."""
    if rendered.shape != start.shape[-2:]:
        raise DimensionError(f"saliency {rendered.shape} does not match input {start.shape[-2:]}")
    ranks = pixel_ranks(rendered)
    counts = step_counts(ranks.size, cfg.steps)
    probabilities = np.empty(len(counts))
    for offset in range(0, len(counts), cfg.batch_size):
        chunk = counts[offset:offset + cfg.batch_size]
        moved = ranks[None, :, :] < chunk[:, None, None]
        images = np.where(moved[:, None, :, :], finish[None], start[None])
        probabilities[offset:offset + len(chunk)] = view.probabilities(images)[:, target]
    fractions = counts / ranks.size
    return CurveResult(trapezoid_auc(fractions, probabilities), fractions, probabilities)


def _image(value):
    return np.asarray(value.data if isinstance(value, Tensor) else value)


def _rendered(saliency):
    return _array(saliency.rendered if hasattr(saliency, "rendered") else saliency)


def deletion_score(view, input, saliency, target, cfg=None):
    """Most salient pixels first are set to the baseline (zeros, normalized space). Lower is better."""
    cfg = cfg or CurveConfig()
    image = _image(input)
    return _curve(view, image, BLACK.tensor_for(image), _rendered(saliency), target, cfg)


def insertion_score(view, input, saliency, target, cfg=None):
    """Most salient pixels first are copied into a blurred version of the input. Higher is better."""
    cfg = cfg or CurveConfig()
    image = _image(input)
    blurred = gaussian_blur2d(image, cfg.blur_kernel, cfg.blur_sigma).data
    return _curve(view, blurred, image, _rendered(saliency), target, cfg)


# ---------------------------------------------------------------- reports

def _stats(values):
    values = np.asarray(values, dtype=np.float64)
    return {"mean": float(values.mean()) if values.size else float("nan"),
            "std": float(values.std()) if values.size else float("nan")}


@dataclass
class TVReport:
    values: np.ndarray
    layer: str
    method: str
    mode: str
    smoothgrad: bool = False

    @property
    def mean(self):
        return _stats(self.values)["mean"]

    @property
    def std(self):
        return _stats(self.values)["std"]


@dataclass
class AUCReport:
    insertion: np.ndarray
    deletion: np.ndarray
    config: dict
    insertion_curves: list = field(default_factory=list)
    deletion_curves: list = field(default_factory=list)

    def summary(self):
        return {"insertion": _stats(self.insertion), "deletion": _stats(self.deletion)}


@dataclass
class PredDiffReport:
    all_classes: np.ndarray
    target_class: np.ndarray

    def summary(self):
        return {"all_classes": _stats(self.all_classes), "target_class": _stats(self.target_class)}


def percentage_reduction(original_mean, variant_mean):
    if original_mean == 0:
        return float("nan")
    return 100.0 * (original_mean - variant_mean) / original_mean


# ---------------------------------------------------------------- model comparisons

def prediction_difference_from_probabilities(original, variant, targets):
    original, variant = np.asarray(original, np.float64), np.asarray(variant, np.float64)
    if original.shape != variant.shape:
        raise DimensionError(f"class spaces differ: {original.shape} vs {variant.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    rows = np.arange(len(targets))
    diff = np.abs(variant - original)
    return PredDiffReport(diff.sum(axis=1) * 100.0, diff[rows, targets] * 100.0)


def prediction_difference(original_view, variant_view, images, targets):
    """Softmax (or sigmoid) differences x 100, summed over classes and for the target only."""
    return prediction_difference_from_probabilities(original_view.probabilities(images),
                                                    variant_view.probabilities(images), targets)


def accuracy(view, images, labels):
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        return float("nan")
    return float((predictions(view.logits(images)) == labels).mean())


# ---------------------------------------------------------------- evaluation helpers

def evaluate_tv(view, images, targets, req, layers, batch_size=settings.EVAL_BATCH):
    reports = []
    for layer in layers:
        maps = attribute_in_batches(view, images, replace(req, layer=layer), targets, batch_size=batch_size)
        reports.append(TVReport(total_variation_batch(maps.raw), layer, req.method, view.mode,
                                req.smoothgrad is not None))
    return reports


def curve_scores(view, images, rendered, targets, cfg=None, keep_curves=False):
    cfg = cfg or CurveConfig()
    insertion, deletion, ins_curves, del_curves = [], [], [], []
    for image, saliency, target in zip(images, rendered, targets):
        ins = insertion_score(view, image, saliency, int(target), cfg)
        dele = deletion_score(view, image, saliency, int(target), cfg)
        insertion.append(ins.auc)
        deletion.append(dele.auc)
        if keep_curves:
            ins_curves.append(ins)
            del_curves.append(dele)
    return AUCReport(np.asarray(insertion), np.asarray(deletion), cfg.to_dict(), ins_curves, del_curves)


def evaluate_insdel(view, images, targets, req, cfg=None, keep_curves=False):
    maps = attribute_in_batches(view, images, req, targets)
    return curve_scores(view, images, maps.rendered.data, targets, cfg, keep_curves)


def noise_saliency(layer_shape, input_size, rng):
    """Gaussian noise at the layer's spatial size, upscaled to the input."""
    return upscale_map(Tensor(rng.standard_normal(tuple(layer_shape))), tuple(input_size)).data


def noise_saliency_batch(count, layer_shape, input_size, rng):
    return np.stack([noise_saliency(layer_shape, input_size, rng) for _ in range(count)])


@dataclass
class RandomizationRow:
    cut: str
    report: AUCReport


@dataclass
class RandomizationReport:
    rows: list
    noise: AUCReport
    layer: str
    method: str


def randomization_suite(model, req, cut_points, images, targets, seed, cfg=None, view_factory=ModelView):
    """Re-initialize from each cut point towards the head and re-run the curves.

    The first row ("none") is the trained model; the noise baseline uses the
    trained model with Gaussian-noise saliency at the layer's resolution.
    """
    cfg = cfg or CurveConfig()
    req = req.for_model(model)
    positions = [model.position(cut) for cut in cut_points]
    if positions != sorted(positions, reverse=True):
        raise UsageError("cut points must be ordered from the head towards the stem")
    rows = []
    for index, cut in enumerate([None] + list(cut_points)):
        variant = model if cut is None else randomize_from_end(model, cut, seed)
        logger.info("[%d/%d] randomized from %s", index + 1, len(cut_points) + 1, cut or "nothing")
        rows.append(RandomizationRow(cut or "none", evaluate_insdel(view_factory(variant), images, targets, req, cfg)))

    trained = view_factory(model)
    _, captured = trained.forward(images[:1], capture=(req.layer,))
    layer_shape = captured[req.layer].shape[2:]
    noise = noise_saliency_batch(len(images), layer_shape, images.shape[2:], stream(seed, "noise-baseline"))
    return RandomizationReport(rows, curve_scores(trained, images, noise, targets, cfg), req.layer, req.method)
