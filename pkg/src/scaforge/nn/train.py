"""RMSprop training loop for the trace classifiers.

The update keeps a per-parameter running mean of squared gradients and
applies weight decay as a separate decoupled term:

    s <- rho * s + (1 - rho) * g^2
    w <- w - lr * g / (sqrt(s) + eps) - lr * wd * w
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import cross_entropy
from .model import NetModel, loss_and_grad


@dataclass
class TrainConfig:
    lr: float = 1e-5
    weight_decay: float = 1e-5
    decay_rate: float = 0.99
    eps: float = 1e-8
    batch_size: int = 100
    epochs: int = 150
    seed: int = 0
    validation_fraction: float = 0.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in [0, 1)")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)  # empty without a split


class RMSprop:
    def __init__(self, params: list[np.ndarray], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.square_avg = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        c = self.cfg
        for p, g, s in zip(self.params, grads, self.square_avg):
            s *= c.decay_rate
            s += (1.0 - c.decay_rate) * g * g
            p -= c.lr * g / (np.sqrt(s) + c.eps)
            p -= c.lr * c.weight_decay * p


def _eval_loss(model: NetModel, samples, labels, batch_size) -> float:
    total, n = 0.0, samples.shape[0]
    for start in range(0, n, batch_size):
        batch = samples[start:start + batch_size]
        loss, _ = cross_entropy(model.forward(batch, train=False), labels[start:start + batch_size])
        total += loss * batch.shape[0]
    return total / n


def train(model: NetModel, samples: np.ndarray, labels, cfg: TrainConfig):
    """Train in place; returns (model, per-epoch loss history).

    Shuffling, dropout masks, and the optional validation split all derive
    from cfg.seed, so a rerun reproduces the loss history exactly. The
    trailing short batch is kept.
    """
    samples = np.asarray(samples, dtype=np.float64)
    labels = np.asarray(labels)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise ValueError("samples must be a nonempty N x L matrix")
    if labels.shape != (samples.shape[0],):
        raise ValueError("labels must have shape (N,)")

    rng = np.random.default_rng(cfg.seed)
    n = samples.shape[0]
    indices = rng.permutation(n)
    n_val = int(round(cfg.validation_fraction * n))
    val_idx, fit_idx = indices[:n_val], indices[n_val:]
    if fit_idx.size == 0:
        raise ValueError("validation split leaves no training data")

    optimizer = RMSprop(model.parameters(), cfg)
    history = TrainHistory()
    for _ in range(cfg.epochs):
        order = fit_idx[rng.permutation(fit_idx.size)]
        epoch_loss = 0.0
        for start in range(0, order.size, cfg.batch_size):
            batch_idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grad(model, samples[batch_idx], labels[batch_idx], rng=rng)
            optimizer.step(grads)
            epoch_loss += loss * batch_idx.size
        history.train_loss.append(epoch_loss / order.size)
        if n_val:
            history.val_loss.append(_eval_loss(model, samples[val_idx],
                                               labels[val_idx], cfg.batch_size))
    return model, history
