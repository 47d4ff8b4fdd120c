"""Training and evaluation driver: config parsing, the optimization loop,
periodic evaluation and bit-exact checkpoint/resume."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, restore_model, restore_rng, save_checkpoint
from .data import ImageDataset, augment, load_dataset
from .network import Model, VariantSpec, build, forward, preset
from .optim import AdamW
from .schedule import lr_at
from .tensor import Tensor, constant, cross_entropy


class ConfigError(ValueError):
    """Invalid or unknown training-config contents."""


CONFIG_KEYS = {
    "variant", "spec", "epochs", "warmup_epochs", "peak_lr", "weight_decay",
    "batch_size", "droppath_max", "seed", "data_path", "data_format",
    "checkpoint_dir", "eval_interval", "eval_data_path",
}


@dataclass
class TrainConfig:
    variant: str | None = None
    spec: VariantSpec | None = None
    epochs: int = 20
    warmup_epochs: int = 2
    peak_lr: float = 1e-3
    weight_decay: float = 0.03
    batch_size: int = 64
    droppath_max: float = 0.0
    seed: int = 0
    data_path: str = ""
    data_format: str = "synthetic"
    checkpoint_dir: str = "checkpoints"
    eval_interval: int = 1
    eval_data_path: str | None = None

    def validate(self):
        if (self.variant is None) == (self.spec is None):
            raise ConfigError("exactly one of 'variant' or 'spec' must be set")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(
                f"warmup_epochs ({self.warmup_epochs}) must be in [0, epochs)")
        if self.peak_lr < 0 or self.weight_decay < 0:
            raise ConfigError("rates must be non-negative")
        if not 0.0 <= self.droppath_max < 1.0:
            raise ConfigError(f"droppath_max must be in [0, 1), got {self.droppath_max}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.eval_interval < 1:
            raise ConfigError(f"eval_interval must be positive, got {self.eval_interval}")
        return self

    def model_spec(self) -> VariantSpec:
        return self.spec if self.spec is not None else preset(self.variant)


def config_from_dict(data: dict) -> TrainConfig:
    unknown = set(data) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    data = dict(data)
    if "spec" in data and data["spec"] is not None:
        data["spec"] = VariantSpec.from_dict(data["spec"])
    cfg = TrainConfig(**data)
    seed_override = os.environ.get("VIP_SEED")
    if seed_override is not None:
        cfg.seed = int(seed_override)
    return cfg.validate()


def load_config(path: str) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})")
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config root must be an object")
    return config_from_dict(data)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries step/lr/grad-norm diagnostics."""


def _grad_norm(params):
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return math.sqrt(total)


@dataclass
class TrainResult:
    checkpoint_path: str
    history: list = field(default_factory=list)  # (epoch, train_loss, eval_acc|None)


def train(config: TrainConfig, resume_from: str | None = None,
          log=None, max_steps: int | None = None) -> TrainResult:
    """Run the configured recipe; checkpoints are written at every eval point
    and the run can be resumed bit-exactly from any of them."""
    config.validate()
    dataset = load_dataset(config.data_path, config.data_format)
    eval_set = dataset
    if config.eval_data_path:
        eval_set = load_dataset(config.eval_data_path, config.data_format)

    spec = config.model_spec()
    if spec.classes < dataset.num_classes:
        raise ConfigError(
            f"model has {spec.classes} classes but data has {dataset.num_classes}")

    steps_per_epoch = max(1, math.ceil(len(dataset) / config.batch_size))
    total_steps = config.epochs * steps_per_epoch
    warmup_steps = config.warmup_epochs * steps_per_epoch

    start_epoch = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        model = restore_model(ckpt, dtype=np.float32)
        rng = restore_rng(ckpt)
        optimizer = AdamW(model.named_parameters(),
                          weight_decay=config.weight_decay)
        optimizer.load_state_arrays(ckpt.optim)
        start_epoch = ckpt.epoch
    else:
        model = build(spec, dtype=np.float32, seed=config.seed)
        rng = np.random.default_rng(config.seed)
        optimizer = AdamW(model.named_parameters(),
                          weight_decay=config.weight_decay)

    os.makedirs(config.checkpoint_dir, exist_ok=True)
    history = []
    last_path = os.path.join(config.checkpoint_dir, f"epoch{start_epoch:04d}.ckpt")
    step = optimizer.step_count
    done = False
    for epoch in range(start_epoch, config.epochs):
        order = rng.permutation(len(dataset))
        epoch_loss, n_batches = 0.0, 0
        for begin in range(0, len(order), config.batch_size):
            batch = order[begin:begin + config.batch_size]
            images = augment(dataset.images[batch], rng)
            loss = step_fn(model, images, dataset.labels[batch], optimizer,
                           lr_at(step, config.peak_lr, warmup_steps, total_steps),
                           config.droppath_max, rng)
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at step {step} "
                    f"(lr {lr_at(step, config.peak_lr, warmup_steps, total_steps):.3e}, "
                    f"grad-norm {_grad_norm(optimizer.params):.3e})")
            epoch_loss += loss
            n_batches += 1
            step += 1
            if max_steps is not None and step >= max_steps:
                done = True
                break
        mean_loss = epoch_loss / max(n_batches, 1)
        record = [epoch + 1, mean_loss, None]
        if (epoch + 1) % config.eval_interval == 0 or epoch + 1 == config.epochs or done:
            acc = evaluate(model, eval_set, batch_size=config.batch_size)
            record[2] = acc
            last_path = os.path.join(config.checkpoint_dir, f"epoch{epoch + 1:04d}.ckpt")
            save_checkpoint(last_path, model, epoch + 1, optimizer, rng)
        history.append(tuple(record))
        if log is not None:
            acc_text = f" eval_acc {record[2]:.4f}" if record[2] is not None else ""
            log(f"epoch {epoch + 1}/{config.epochs} loss {mean_loss:.4f}{acc_text}")
        if done:
            break
    return TrainResult(last_path, history)


def step_fn(model: Model, images, labels, optimizer: AdamW, lr, droppath_max, rng):
    """One optimizer step; returns the batch loss."""
    optimizer.zero_grad()
    logits, _ = forward(model, images, training=True, rng=rng,
                        droppath_max=droppath_max)
    loss = cross_entropy(logits, labels)
    loss.backward()
    value = loss.item()
    if math.isfinite(value):
        optimizer.step(lr)
    return value


def evaluate(model_or_ckpt, dataset: ImageDataset, batch_size=256) -> float:
    """Deterministic top-1 accuracy; no augmentation, eval-mode forward."""
    if isinstance(model_or_ckpt, (str, Checkpoint)):
        ckpt = (model_or_ckpt if isinstance(model_or_ckpt, Checkpoint)
                else load_checkpoint(model_or_ckpt))
        model = restore_model(ckpt, dtype=np.float32)
    else:
        model = model_or_ckpt
    h, w = dataset.image_size
    if h < 32 or w < 32:
        raise ConfigError(f"dataset geometry {h}x{w} too small for the stem")
    correct = 0
    for begin in range(0, len(dataset), batch_size):
        images = dataset.images[begin:begin + batch_size]
        logits, _ = forward(model, images, training=False)
        correct += int((logits.data.argmax(axis=1)
                        == dataset.labels[begin:begin + batch_size]).sum())
    return correct / len(dataset)
