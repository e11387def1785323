"""From-scratch 1D CNN and ResNet trace classifiers."""

from __future__ import annotations

import numpy as np

from .model import (ConvBlockSpec, NetConfig, NetModel, desk_config,
                    flatten_size, load_net, loss_and_grad, full_scale_config,
                    predict_log_proba, save_net)
from .train import RMSprop, TrainConfig, TrainHistory, train

__all__ = [
    "ConvBlockSpec", "NetConfig", "NetModel", "NetClassifier", "RMSprop",
    "TrainConfig", "TrainHistory", "desk_config", "flatten_size", "load_net",
    "loss_and_grad", "full_scale_config", "predict_log_proba", "save_net", "train",
]


class NetClassifier:
    """ProbClassifier adapter: builds, trains, and evaluates a NetModel."""

    def __init__(self, net_config: NetConfig, train_config: TrainConfig | None = None):
        self.net_config = net_config
        self.train_config = train_config or TrainConfig()
        self.model: NetModel | None = None
        self.history: TrainHistory | None = None

    def fit(self, samples: np.ndarray, labels) -> "NetClassifier":
        self.model = NetModel(self.net_config, seed=self.train_config.seed)
        self.model, self.history = train(self.model, samples, labels, self.train_config)
        return self

    def predict_log_proba(self, samples: np.ndarray) -> np.ndarray:
        if self.model is None:
            raise RuntimeError("classifier is not fitted")
        return predict_log_proba(self.model, samples)
