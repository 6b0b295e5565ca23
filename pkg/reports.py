"""Everything a command writes: CSV rows, JSON summaries, PGM/PNG maps and overlays."""
import csv
import logging
import subprocess
from pathlib import Path

import numpy as np
from PIL import Image

import settings
from checkpoint import write_manifest
from nn_models import display_name
from tensor_core import Tensor

logger = logging.getLogger(__name__)

REPO_ROOT = Path(__file__).resolve().parent


def git_describe(cwd=REPO_ROOT):
    """`git describe` of the code that produced a report, or "unknown" outside a checkout."""
    try:
        result = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=cwd, check=True,
                                text=True, stdout=subprocess.PIPE, stderr=subprocess.PIPE)
    except (OSError, subprocess.CalledProcessError):
        return "unknown"
    return result.stdout.strip() or "unknown"


def _cell(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return int(value)
    return value


def write_rows(path, rows, fieldnames=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fieldnames = fieldnames or (list(rows[0]) if rows else [])
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({key: _cell(value) for key, value in row.items()})
    return path


def write_curves(path, curves):
    """curves: iterable of (labels dict, CurveResult)."""
    rows = []
    for labels, curve in curves:
        for step, (fraction, probability) in enumerate(zip(curve.fractions, curve.probabilities)):
            rows.append(dict(labels, step=step, fraction=fraction, probability=probability))
    return write_rows(path, rows)


def layer_mapping(layers):
    return {layer: display_name(layer) for layer in layers}


def write_summary(path, summary, seed, config=None, layers=(), reduce_mode=settings.REDUCE_MODE,
                  smoothgrad=False):
    document = {
        "code": git_describe(),
        "seed": int(seed),
        "config": config or {},
        "layers": layer_mapping(layers),
        "reduce_mode": reduce_mode,
        "smoothgrad": bool(smoothgrad),
        "results": summary,
    }
    return write_manifest(path, _plain(document))


def _plain(value):
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    return value


# ---------------------------------------------------------------- images

def _map_array(value):
    return np.asarray(value.data if isinstance(value, Tensor) else value, dtype=np.float64)


def to_gray(value):
    """Min-max normalize to 0..255; a constant map becomes mid gray."""
    z = _map_array(value)
    low, high = z.min(), z.max()
    if high == low:
        return np.full(z.shape, 128, dtype=np.uint8)
    return np.round((z - low) / (high - low) * 255).astype(np.uint8)


def save_pgm(value, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_gray(value)).save(path, format="PPM")
    return path


def signed_colormap(value):
    """Blue (negative) through white (zero) to red (positive), symmetric around 0; H x W x 3 in [0, 1]."""
    z = _map_array(value)
    peak = np.abs(z).max()
    v = z / peak if peak > 0 else np.zeros_like(z)
    red = np.where(v > 0, 1.0, 1.0 + v)
    green = 1.0 - np.abs(v)
    blue = np.where(v < 0, 1.0, 1.0 - v)
    return np.stack([red, green, blue], axis=-1)


def _to_uint8(rgb):
    return np.round(np.clip(rgb, 0.0, 1.0) * 255).astype(np.uint8)


def save_signed_png(value, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_uint8(signed_colormap(value))).save(path, format="PNG")
    return path


def overlay(image, value, alpha=settings.OVERLAY_ALPHA):
    """Blend the signed colormap of a rendered map onto a C x H x W image in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    return (1.0 - alpha) * image.transpose(1, 2, 0) + alpha * signed_colormap(value)


def save_overlay(image, value, path, alpha=settings.OVERLAY_ALPHA):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_uint8(overlay(image, value, alpha))).save(path, format="PNG")
    return path
