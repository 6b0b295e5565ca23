"""Checkpoints on disk: <dir>/manifest.json plus one .stns blob per parameter."""
import json
import logging
from pathlib import Path

import numpy as np

from errors import CheckpointError
from nn_models import LayerSpec, ModelGraph
from tensor_io import load_tensor, save_tensor

logger = logging.getLogger(__name__)

FORMAT = "smooth-saliency-checkpoint"
VERSION = 1
MANIFEST = "manifest.json"
TENSOR_DIR = "tensors"


def canonical_json(data):
    return json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_manifest(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(data), encoding="utf-8")
    return path


def read_manifest(directory, kind):
    manifest_path = Path(directory) / MANIFEST
    if not manifest_path.exists():
        raise CheckpointError(f"no {MANIFEST} in {directory}")
    try:
        data = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{manifest_path}: invalid JSON ({e})") from e
    if data.get("format") != FORMAT or data.get("kind") != kind:
        raise CheckpointError(f"{manifest_path}: not a {kind} checkpoint")
    if data.get("version") != VERSION:
        raise CheckpointError(f"{manifest_path}: unsupported version {data.get('version')}")
    return data


def save_parameters(directory, parameters):
    """Write every array as tensors/<name>.stns; returns the name -> relative path index."""
    index = {}
    for name in sorted(parameters):
        relative = f"{TENSOR_DIR}/{name}.stns"
        save_tensor(np.asarray(parameters[name]), Path(directory) / relative)
        index[name] = relative
    return index


def load_parameters(directory, index):
    parameters = {}
    for name, relative in index.items():
        blob = Path(directory) / relative
        if not blob.exists():
            raise CheckpointError(f"missing parameter blob {blob}")
        parameters[name] = load_tensor(blob).data
    return parameters


def save_checkpoint(model, path):
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    dtypes = {str(value.dtype) for value in model.parameters.values()}
    manifest = {
        "format": FORMAT,
        "kind": "model",
        "version": VERSION,
        "config": model.config,
        "layers": [layer.to_dict() for layer in model.layers],
        "aliases": model.aliases,
        "output": model.output,
        "classes": model.classes,
        "dtype": dtypes.pop() if len(dtypes) == 1 else "mixed",
        "parameters": save_parameters(directory, model.parameters),
        "metadata": model.metadata,
    }
    write_manifest(directory / MANIFEST, manifest)
    logger.info("saved checkpoint %s (%d parameter tensors)", directory, len(model.parameters))
    return directory


def load_checkpoint(path):
    directory = Path(path)
    manifest = read_manifest(directory, "model")
    try:
        parameters = load_parameters(directory, manifest["parameters"])
        layers = [LayerSpec.from_dict(entry) for entry in manifest["layers"]]
    except KeyError as e:
        raise CheckpointError(f"{directory}: manifest is missing {e}") from e
    return ModelGraph(layers, parameters, manifest["classes"], manifest["output"], manifest["config"],
                      manifest.get("aliases"), manifest.get("metadata"))
