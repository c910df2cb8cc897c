"""Conditional convolution layers and a small numpy GAN framework built around them."""
from .autograd import Node, Parameter, Tape
from .data import SynthSpec, generate_dataset
from .engine import Discriminator, Generator, TrainConfig, train
from .layers import BatchNorm2d, CConv2d, CondBatchNorm2d, Conv2d, count_conditioning_params

__all__ = ["Node", "Parameter", "Tape", "SynthSpec", "generate_dataset", "Discriminator", "Generator",
           "TrainConfig", "train", "BatchNorm2d", "CConv2d", "CondBatchNorm2d", "Conv2d",
           "count_conditioning_params"]
