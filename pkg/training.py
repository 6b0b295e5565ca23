"""Classifier training: Adam over tape-computed gradients, eval-mode graph."""
import logging
from dataclasses import dataclass, field

import numpy as np

import settings
from errors import ConfigError, TrainingError
from nn_models import ModelView
from seeding import stream
from tensor_core import Tape, backward, binary_cross_entropy_with_logits, cross_entropy

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = settings.TRAIN_LR
    batch_size: int = settings.TRAIN_BATCH_SIZE
    epochs: int = settings.TRAIN_EPOCHS
    betas: tuple = settings.ADAM_BETAS
    eps: float = settings.ADAM_EPS
    seed: int = settings.DEFAULT_SEED

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError(f"invalid training config {self}")


@dataclass
class TrainingLog:
    epochs: list = field(default_factory=list)

    def record(self, epoch, loss, accuracy):
        self.epochs.append({"epoch": epoch, "loss": float(loss), "accuracy": float(accuracy)})

    @property
    def final_loss(self):
        return self.epochs[-1]["loss"] if self.epochs else float("nan")

    @property
    def final_accuracy(self):
        return self.epochs[-1]["accuracy"] if self.epochs else float("nan")


class Adam:
    """Adam with bias correction over a dict of named numpy parameters."""

    def __init__(self, parameters, lr, betas=settings.ADAM_BETAS, eps=settings.ADAM_EPS):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.params = {name: np.array(value) for name, value in parameters.items()}
        self.m = {name: np.zeros_like(value) for name, value in self.params.items()}
        self.v = {name: np.zeros_like(value) for name, value in self.params.items()}

    def step(self, grads):
        self.step_count += 1
        t = self.step_count
        for name, grad in grads.items():
            grad = np.asarray(grad, dtype=self.params[name].dtype)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * grad * grad
            m_hat = self.m[name] / (1 - self.beta1 ** t)
            v_hat = self.v[name] / (1 - self.beta2 ** t)
            update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            self.params[name] = (self.params[name] - update).astype(self.params[name].dtype)
        return self.params


def classification_loss(logits, labels, classes):
    if classes == 1:
        return binary_cross_entropy_with_logits(logits, labels)
    return cross_entropy(logits, labels)


def predictions(logits):
    """Argmax (lowest index on ties) or logit > 0 for a single-logit head."""
    logits = np.asarray(logits)
    if logits.shape[1] == 1:
        return (logits[:, 0] > 0).astype(np.int64)
    return logits.argmax(axis=1)


def loss_and_grads(model, params, images, labels):
    tape = Tape()
    watched = {name: tape.watch(value) for name, value in params.items()}
    logits, _ = ModelView(model).forward(images, tape=tape, params=watched)
    loss = classification_loss(logits, labels, model.classes)
    store = backward(loss, tape)
    grads = {name: store.grad(tensor).data for name, tensor in watched.items()}
    return loss.item(), logits.data, grads


def train(model, dataset, cfg=None):
    """Returns (trained model, TrainingLog); the input model is not modified."""
    cfg = cfg or TrainConfig()
    limit = 2 if model.classes == 1 else model.classes
    if len(dataset) == 0 or dataset.labels.min() < 0 or dataset.labels.max() >= limit:
        raise ConfigError(f"labels must lie in [0, {limit})")

    rng = stream(cfg.seed, "train")
    optimizer = Adam(model.parameters, cfg.lr, cfg.betas, cfg.eps)
    log = TrainingLog()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(dataset))
        total_loss = correct = 0.0
        for images, labels in dataset.batches(cfg.batch_size, order):
            loss, logits, grads = loss_and_grads(model, optimizer.params, images, labels)
            if not np.isfinite(loss):
                raise TrainingError("loss diverged", epoch)
            optimizer.step(grads)
            total_loss += loss * len(labels)
            correct += float((predictions(logits) == labels).sum())
        log.record(epoch, total_loss / len(dataset), correct / len(dataset))
        logger.info("epoch %d/%d: loss %.4f, train accuracy %.3f", epoch, cfg.epochs,
                    log.final_loss, log.final_accuracy)
    trained = model.with_parameters(optimizer.params, {
        "train": {"lr": cfg.lr, "batch_size": cfg.batch_size, "epochs": cfg.epochs, "seed": int(cfg.seed)},
        "final_loss": log.final_loss,
        "final_accuracy": log.final_accuracy,
    })
    return trained, log
