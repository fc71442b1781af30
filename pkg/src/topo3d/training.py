"""Per-sample SGD-with-momentum training of the surrogate network."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .metrics import binary_accuracy, rms_accuracy
from .network import NetworkConfig, NetworkParameters, backward, init_params


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    beta: float = 1.0              # volume-penalty weight in the loss
    epochs: int = 30
    seed: int = 0
    clamp_eps: float = 1e-7

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 < self.clamp_eps <= 0.01:
            raise ValueError("clamp_eps must be in (0, 0.01]")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ValueError("bad optimizer constants")


class TrainingError(RuntimeError):
    pass


@dataclass
class Telemetry:
    """Per-step losses plus per-epoch averaged loss and accuracies."""

    step_losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    epoch_binary: list[float] = field(default_factory=list)
    epoch_rms: list[float] = field(default_factory=list)

    def steps_per_epoch(self) -> int:
        return len(self.step_losses) // max(len(self.epoch_losses), 1)

    def write_epoch_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "binary_accuracy", "rms_accuracy"])
            for e, (l, b, r) in enumerate(
                    zip(self.epoch_losses, self.epoch_binary, self.epoch_rms)):
                w.writerow([e, f"{l:.17g}", f"{b:.17g}", f"{r:.17g}"])

    def write_step_csv(self, path, first_epoch_only: bool = False):
        losses = self.step_losses
        if first_epoch_only:
            losses = losses[:self.steps_per_epoch()]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            for s, l in enumerate(losses):
                w.writerow([s, f"{l:.17g}"])


def sgd_momentum_step(params: NetworkParameters, grads: NetworkParameters,
                      velocity: NetworkParameters, lr: float, mu: float):
    """v' = mu v + g; w' = w - lr v'. Updates params and velocity in place."""
    for p, g, v in zip(params.tensors, grads.tensors, velocity.tensors):
        if p is None:
            continue
        for pt, gt, vt in zip(p, g, v):
            vt *= mu
            vt += gt
            pt -= lr * vt
    return params, velocity


def train(records, net_config: NetworkConfig, train_config: TrainConfig,
          channel_ids) -> tuple[NetworkParameters, Telemetry]:
    """Train on sample records with batch-size-1 updates in seeded order.

    The per-epoch accuracies average each sample's prediction at the moment
    it was visited, so the first epoch already reflects thousands of updates.
    """
    records = list(records)
    if not records:
        raise ValueError("training set is empty")
    channel_ids = list(channel_ids)
    if len(channel_ids) != net_config.in_channels:
        raise ValueError(
            f"network expects {net_config.in_channels} channels, "
            f"subset has {len(channel_ids)}")
    rng = np.random.default_rng(train_config.seed)
    params = init_params(net_config, rng)
    velocity = params.zeros_like()
    telemetry = Telemetry()

    for epoch in range(train_config.epochs):
        order = rng.permutation(len(records))
        loss_sum = bin_sum = rms_sum = 0.0
        for step, idx in enumerate(order):
            rec = records[idx]
            x = rec.channels.subset(channel_ids)
            y = rec.target.astype(float)
            loss, grads, pred = backward(net_config, params, x, y,
                                         train_config.beta,
                                         train_config.clamp_eps)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {step} "
                    f"(record seed {rec.seed}, m={rec.m}, n={rec.n})")
            sgd_momentum_step(params, grads, velocity,
                              train_config.learning_rate, train_config.momentum)
            telemetry.step_losses.append(loss)
            loss_sum += loss
            bin_sum += binary_accuracy(pred, y)
            rms_sum += rms_accuracy(pred, y)
        n = len(records)
        telemetry.epoch_losses.append(loss_sum / n)
        telemetry.epoch_binary.append(bin_sum / n)
        telemetry.epoch_rms.append(rms_sum / n)
    return params, telemetry
