"""
FlowAug - Error Types
Exception hierarchy shared by the engine, the flow layers and the services
"""


class FlowAugError(Exception):
    """Base class for every error raised by FlowAug"""


class ShapeError(FlowAugError, ValueError):
    """Tensor shapes are incompatible with the requested operation"""


class NonFiniteError(FlowAugError, ArithmeticError):
    """An operation produced NaN or Inf"""


class NonFiniteGradientError(NonFiniteError):
    """A parameter gradient is NaN or Inf; the optimizer step was aborted"""

    def __init__(self, parameter_name: str):
        self.parameter_name = parameter_name
        super().__init__(f"non-finite gradient for parameter '{parameter_name}'")


class SingularWeightError(FlowAugError, ArithmeticError):
    """An invertible 1x1 convolution weight became (numerically) singular"""


class LayerNotInitializedError(FlowAugError, RuntimeError):
    """A data-initialized layer was used before its initialization pass"""


class ConfigError(FlowAugError, ValueError):
    """Invalid configuration value, unknown key or bad argument"""


class DataError(FlowAugError, ValueError):
    """Dataset content does not satisfy an operation's preconditions"""


class DivergenceError(FlowAugError, RuntimeError):
    """Training loss stayed above the divergence threshold for too long"""

    def __init__(self, message: str, curve=None):
        self.curve = curve or []
        super().__init__(message)


class LeakageError(FlowAugError, AssertionError):
    """A training artifact was derived from test-fold data"""


class CheckpointError(FlowAugError, IOError):
    """Checkpoint file is malformed, corrupted or does not match the model"""


class VerificationError(FlowAugError, AssertionError):
    """A property check of the verify suite did not hold"""
