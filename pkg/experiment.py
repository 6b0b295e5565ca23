"""Experiment configuration and the plumbing shared by the run_* commands.

A command's configuration is read from --config (JSON), overridden by any
flag given explicitly, validated and written to <out>/config.json before
the command does any work. Re-running with that file reproduces the outputs.
"""
import dataclasses
import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import click
import numpy as np

import settings
from checkpoint import load_checkpoint, write_manifest
from denoise import HookMode, RollSet, attach, load_surrogates
from errors import ConfigError, SmoothSaliencyError
from saliency import REDUCE_MODES, AttributionRequest, SmoothGradConfig
from seeding import stream
from shapes_dataset import load_dataset

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.json"


class CommandFailure(click.ClickException):
    exit_code = 2


@dataclass(frozen=True)
class ExperimentConfig:
    model: Optional[str] = None
    dataset: Optional[str] = None
    mode: str = "original"
    method: str = "grad"
    layers: tuple = ()
    target: Optional[int] = None
    ig_steps: int = settings.IG_STEPS
    smoothgrad_n: int = 0
    smoothgrad_sigma: float = settings.SMOOTHGRAD_SIGMA
    steps: int = settings.INSDEL_STEPS
    seed: int = settings.DEFAULT_SEED
    out: str = "out"
    literal_rolls: bool = False
    samples: int = 100
    reduce_mode: str = settings.REDUCE_MODE
    modes: tuple = settings.MODES
    methods: tuple = ("grad", "ig", "deeplift")
    cut_points: tuple = ()
    epochs: Optional[int] = None
    lr: Optional[float] = None
    batch_size: Optional[int] = None
    classes: Optional[int] = None
    count: Optional[int] = None
    image_size: int = settings.IMAGE_SIZE
    stats_from: Optional[str] = None

    @classmethod
    def field_names(cls):
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(cls.field_names())
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        data = dict(data)
        for key in ("layers", "modes", "methods", "cut_points"):
            if key in data and data[key] is not None:
                data[key] = tuple(data[key])
        return cls(**data)

    @classmethod
    def from_json(cls, path):
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e

    def to_dict(self):
        data = dataclasses.asdict(self)
        for key in ("layers", "modes", "methods", "cut_points"):
            data[key] = list(data[key])
        return data

    def merged(self, overrides):
        """Copy with every override that is not None (or an empty tuple) applied."""
        changes = {k: v for k, v in overrides.items() if v is not None and v != ()}
        for key in ("layers", "modes", "methods", "cut_points"):
            if key in changes:
                changes[key] = tuple(changes[key])
        return dataclasses.replace(self, **changes)

    def validate(self, require=()):
        for name in require:
            if getattr(self, name) is None:
                raise ConfigError(f"--{name.replace('_', '-')} is required")
        HookMode.parse(self.mode)
        for mode in self.modes:
            HookMode.parse(mode)
        for method in (self.method,) + tuple(self.methods):
            if method not in settings.METHODS:
                raise ConfigError(f"unknown method {method!r}")
        if self.reduce_mode not in REDUCE_MODES:
            raise ConfigError(f"unknown reduce mode {self.reduce_mode!r}")
        if self.ig_steps < 1 or self.steps < 1 or self.samples < 1 or self.smoothgrad_n < 0:
            raise ConfigError("ig-steps, steps and samples must be positive, smoothgrad-n non-negative")
        return self

    def save(self):
        return write_manifest(Path(self.out) / CONFIG_FILE, self.to_dict())

    @property
    def rolls(self):
        return RollSet.configured(self.literal_rolls)

    @property
    def smoothgrad(self):
        if self.smoothgrad_n < 1:
            return None
        return SmoothGradConfig(self.smoothgrad_n, self.smoothgrad_sigma, self.seed)

    def request(self, layer=None, method=None):
        return AttributionRequest(method=method or self.method, layer=layer or settings.INPUT_LAYER,
                                  target=self.target, ig_steps=self.ig_steps, smoothgrad=self.smoothgrad,
                                  reduce_mode=self.reduce_mode)


def load_config(config_path, require=(), **overrides):
    """--config file (if any) < explicit flags; validated and saved to <out>/config.json."""
    try:
        base = ExperimentConfig.from_json(config_path) if config_path else ExperimentConfig()
        cfg = base.merged(overrides).validate(require)
        cfg.save()
    except SmoothSaliencyError as e:
        raise CommandFailure(str(e)) from e
    return cfg


# ---------------------------------------------------------------- click options

def common_options(*names):
    """Attach the named stable long-form flags to a click command."""
    options = {
        "config": click.option("--config", "config_path", type=click.Path(dir_okay=False),
                               help="JSON ExperimentConfig; explicit flags override it."),
        "model": click.option("--model", type=click.Path(), help="Checkpoint directory."),
        "dataset": click.option("--dataset", type=click.Path(), help="Dataset directory."),
        "mode": click.option("--mode", type=click.Choice(settings.MODES + ("backward_hook", "forward_hook"))),
        "modes": click.option("--modes", multiple=True, type=click.Choice(settings.MODES),
                              help="Hook modes to compare (repeatable)."),
        "method": click.option("--method", type=click.Choice(settings.METHODS)),
        "methods": click.option("--methods", multiple=True, type=click.Choice(settings.METHODS),
                                help="Attribution methods to compare (repeatable)."),
        "layer": click.option("--layer", "layers", multiple=True, help="Layer id (repeatable)."),
        "target": click.option("--target", type=int, help="Class index; defaults to each sample's label."),
        "ig_steps": click.option("--ig-steps", type=int),
        "smoothgrad_n": click.option("--smoothgrad-n", type=int, help="0 disables SmoothGrad."),
        "smoothgrad_sigma": click.option("--smoothgrad-sigma", type=float),
        "steps": click.option("--steps", type=int, help="Insertion/deletion steps."),
        "seed": click.option("--seed", type=int),
        "out": click.option("--out", type=click.Path(file_okay=False)),
        "literal_rolls": click.option("--literal-paper-rolls", "literal_rolls", is_flag=True, default=None,
                                    help="Backward hook rolls with the forward offsets."),
        "samples": click.option("--samples", type=int, help="Number of dataset samples to evaluate."),
        "reduce_mode": click.option("--reduce-mode", type=click.Choice(REDUCE_MODES)),
        "cut_points": click.option("--cut-point", "cut_points", multiple=True,
                                   help="Parameterized layer to randomize from, head first (repeatable)."),
        "epochs": click.option("--epochs", type=int),
        "lr": click.option("--lr", type=float),
        "batch_size": click.option("--batch-size", type=int),
        "verbose": click.option("--verbose", "-v", is_flag=True, help="Log progress at INFO level."),
    }

    def decorate(command):
        for name in reversed(names):
            command = options[name](command)
        return command

    return decorate


@contextmanager
def command_errors():
    """Library errors and missing files end the command with exit code 2."""
    try:
        yield
    except (SmoothSaliencyError, FileNotFoundError) as e:
        raise CommandFailure(str(e)) from e


def configure_logging(verbose):
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------- shared loading

def open_model(path):
    try:
        return load_checkpoint(path)
    except (OSError, SmoothSaliencyError) as e:
        raise CommandFailure(f"cannot load model {path}: {e}") from e


def open_dataset(path):
    try:
        return load_dataset(path)
    except (OSError, SmoothSaliencyError) as e:
        raise CommandFailure(f"cannot load dataset {path}: {e}") from e


def make_view(model, mode, cfg):
    """attach() with surrogates read from the checkpoint directory when needed."""
    mode = HookMode.parse(mode)
    surrogates = load_surrogates(cfg.model) if mode is HookMode.SURROGATE else None
    try:
        return attach(model, mode, surrogates, cfg.rolls)
    except SmoothSaliencyError as e:
        raise CommandFailure(str(e)) from e


def select_samples(dataset, count, seed):
    """Up to `count` sample indices drawn from the "sample" stream, in ascending order."""
    count = min(count, len(dataset))
    return np.sort(stream(seed, "sample").permutation(len(dataset))[:count])


def targets_for(model, labels, target=None):
    """Explicit target, else the label; a single-logit head always explains its one logit."""
    if model.classes == 1:
        return np.zeros(len(labels), dtype=np.int64)
    if target is not None:
        return np.full(len(labels), target, dtype=np.int64)
    return np.asarray(labels, dtype=np.int64)


def progress(index, total, message):
    click.echo(f"[{index}/{total}] {message}")
