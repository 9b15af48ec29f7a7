"""Minimal dense-tensor network stack: layers with hand-derived backward
passes, a residual encoder-decoder model, Dice loss, heavy-ball SGD,
training loop and checkpoint I/O."""

from .ops import (
    conv2d, conv2d_backward,
    transposed_conv2d, transposed_conv2d_backward,
    batchnorm2d, batchnorm2d_backward,
    relu, relu_backward,
    sigmoid, sigmoid_backward,
    dropout, dropout_backward,
)
from .loss import dice_loss, DICE_EPS
from .model import ModelConfig, SegModel, NConvBlock, build_frame_stack, model_forward
from .optim import OptimizerState, sgd_step
from .train import TrainSample, sequence_to_samples, train
from .checkpoint import save_checkpoint, load_checkpoint, MAGIC

__all__ = [
    "conv2d", "conv2d_backward",
    "transposed_conv2d", "transposed_conv2d_backward",
    "batchnorm2d", "batchnorm2d_backward",
    "relu", "relu_backward",
    "sigmoid", "sigmoid_backward",
    "dropout", "dropout_backward",
    "dice_loss", "DICE_EPS",
    "ModelConfig", "SegModel", "NConvBlock", "build_frame_stack", "model_forward",
    "OptimizerState", "sgd_step",
    "TrainSample", "sequence_to_samples", "train",
    "save_checkpoint", "load_checkpoint", "MAGIC",
]
