"""Small numpy convolutional network engine."""

from .adam import AdamState, adam_step
from .layers import Conv, Dense, Dropout, Flatten, MaxPool, ReLU, Softmax
from .network import (
    ARCHITECTURES,
    Model,
    NetworkSpec,
    accuracy,
    backward,
    build_network,
    forward,
    logit_jacobian,
    logits,
    loss_cross_entropy,
    make_spec,
    predict,
    predict_batch,
    predict_proba,
    to_input,
)
from .training import TrainConfig, train

__all__ = [
    "ARCHITECTURES", "AdamState", "Conv", "Dense", "Dropout", "Flatten", "MaxPool", "Model",
    "NetworkSpec", "ReLU", "Softmax", "TrainConfig", "accuracy", "adam_step", "backward",
    "build_network", "forward", "logit_jacobian", "logits", "loss_cross_entropy", "make_spec",
    "predict", "predict_batch", "predict_proba", "to_input", "train",
]
