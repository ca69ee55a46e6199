"""
FlowAug - Numeric Engine
"""

from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DivergenceError,
    FlowAugError,
    LayerNotInitializedError,
    LeakageError,
    NonFiniteError,
    NonFiniteGradientError,
    ShapeError,
    SingularWeightError,
    VerificationError,
)
from .ops import (
    avg_pool2,
    concat,
    conv2d,
    cross_entropy,
    layer_norm,
    log_softmax,
    matmul,
    multi_head_self_attention,
    slogdet,
    softmax,
    standard_normal_log_prob,
)
from .optim import Adam, clip_grad_norm, warmup_polynomial_lr
from .rng import SeededRng
from .tensor import Parameter, Tensor, gradient, no_grad

__all__ = [
    'Tensor',
    'Parameter',
    'gradient',
    'no_grad',
    'SeededRng',
    'conv2d',
    'layer_norm',
    'softmax',
    'log_softmax',
    'multi_head_self_attention',
    'matmul',
    'concat',
    'slogdet',
    'avg_pool2',
    'standard_normal_log_prob',
    'cross_entropy',
    'Adam',
    'clip_grad_norm',
    'warmup_polynomial_lr',
    'FlowAugError',
    'ShapeError',
    'NonFiniteError',
    'NonFiniteGradientError',
    'SingularWeightError',
    'VerificationError',
    'LayerNotInitializedError',
    'ConfigError',
    'DataError',
    'DivergenceError',
    'LeakageError',
    'CheckpointError',
]
