"""Minimal CNN kernel: layers with explicit backward passes, the detection and
joint-localization architectures, Adam, and checkpoint I/O."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .layers import (BatchNorm, Conv2d, ConvTranspose2d, GlobalAvgPool, Linear, MaxPool2d, Module,
                     Parameter, ReLU, ResidualBlock, Sequential, Sigmoid, SpatialSoftmax)
from .nets import (ConfidenceNet, EncoderDecoder, HDN1DNet, HDN2DNet, Head, PoseNet,
                   build_confidence_net, build_hdn_1d, build_hdn_2d_backbone, build_pose_net)
from .optim import AdamState, TrainingError, adam_step


def forward(graph: Module, x, *, training: bool = False):
    graph.train(training)
    return graph(x)


def backward(graph: Module, *loss_grads):
    """Backpropagate; returns the input gradient. Parameter grads accumulate in ``.grad``."""
    return graph.backward(*loss_grads)
