"""Small numpy CNN stack whose conv layers can train from probed activations."""
from .layers import (AvgPool, Conv2D, Dense, Dropout, Flatten, LogSoftmax, MaxPool, ReLU, Step,
                     Storage)
from .network import PRESETS, Network, NetworkSpec, build_network
from .optim import SGD, Adam, make_optimizer
from .train import (GradNoiseReport, TrainConfig, TrainLog, accuracy, cross_entropy,
                    grad_noise_study, loss_and_grad, train)

__all__ = [
    "AvgPool", "Conv2D", "Dense", "Dropout", "Flatten", "LogSoftmax", "MaxPool", "ReLU", "Step",
    "Storage", "PRESETS", "Network", "NetworkSpec", "build_network", "SGD", "Adam",
    "make_optimizer", "GradNoiseReport", "TrainConfig", "TrainLog", "accuracy", "cross_entropy",
    "grad_noise_study", "loss_and_grad", "train",
]
