"""
FlowAug - Flow Layers and Model
"""

from .layers import ActNorm, AffineCoupling, InvConv1x1, Squeeze, factor_out, merge, squeeze, unsqueeze
from .model import LatentCode, MultiScaleFlow
from .objective import Dequantizer, LossReport, TrainConfig, bits_per_dim, nll_loss
from .subnets import AttentionStack, ConvStack

__all__ = [
    'ActNorm',
    'InvConv1x1',
    'AffineCoupling',
    'Squeeze',
    'squeeze',
    'unsqueeze',
    'factor_out',
    'merge',
    'ConvStack',
    'AttentionStack',
    'MultiScaleFlow',
    'LatentCode',
    'Dequantizer',
    'LossReport',
    'TrainConfig',
    'bits_per_dim',
    'nll_loss',
]
