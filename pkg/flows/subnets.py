"""
FlowAug - Coupling Subnetworks
Networks that map the conditioning half of a coupling layer to (raw scale, shift)

Features:
- ConvStack: 3x3 conv -> ReLU -> 1x1 conv -> ReLU -> layer norm -> zero-init 3x3 conv
- AttentionStack: 1x1 embedding -> 4-headed self-attention (post-norm residual)
  -> 3x3 conv with ReLU -> zero-init 3x3 conv
- The final convolution starts at zero so a fresh coupling is the identity
"""

import logging
import math
from typing import List

import numpy as np

from engine.errors import ShapeError
from engine.ops import conv2d, layer_norm, multi_head_self_attention
from engine.rng import SeededRng
from engine.tensor import Parameter, Tensor

logger = logging.getLogger(__name__)


def _conv_filters(kernel: int, cin: int, cout: int, rng: SeededRng, name: str) -> Parameter:
    fan_in = kernel * kernel * cin
    return Parameter(rng.normal((kernel, kernel, cin, cout), scale=1.0 / math.sqrt(fan_in)), name)


class Subnet:
    """Common parameter bookkeeping for coupling subnetworks"""

    def __init__(self, name: str, out_channels: int):
        self.name = name
        self.out_channels = out_channels
        self._params: List[Parameter] = []

    def _add(self, parameter: Parameter) -> Parameter:
        self._params.append(parameter)
        return parameter

    def _output_layer(self, hidden: int) -> None:
        self.out_filters = self._add(Parameter(np.zeros((3, 3, hidden, self.out_channels)), f"{self.name}/out/filters"))
        self.out_bias = self._add(Parameter(np.zeros(self.out_channels), f"{self.name}/out/bias"))

    def parameters(self) -> List[Parameter]:
        return list(self._params)

    def __call__(self, x: Tensor) -> Tensor:
        raise NotImplementedError


class ConvStack(Subnet):
    def __init__(self, in_channels: int, out_channels: int, hidden: int, name: str, rng: SeededRng):
        super().__init__(name, out_channels)
        self.in_filters = self._add(_conv_filters(3, in_channels, hidden, rng.child("in"), f"{name}/in/filters"))
        self.in_bias = self._add(Parameter(np.zeros(hidden), f"{name}/in/bias"))
        self.mid_filters = self._add(_conv_filters(1, hidden, hidden, rng.child("mid"), f"{name}/mid/filters"))
        self.mid_bias = self._add(Parameter(np.zeros(hidden), f"{name}/mid/bias"))
        self.norm_gain = self._add(Parameter(np.ones(hidden), f"{name}/norm/gain"))
        self.norm_bias = self._add(Parameter(np.zeros(hidden), f"{name}/norm/bias"))
        self._output_layer(hidden)

    def __call__(self, x: Tensor) -> Tensor:
        h = conv2d(x, self.in_filters, self.in_bias).relu()
        h = conv2d(h, self.mid_filters, self.mid_bias).relu()
        h = layer_norm(h, self.norm_gain, self.norm_bias)
        return conv2d(h, self.out_filters, self.out_bias)


class AttentionStack(Subnet):
    """
    Self-attention subnetwork

    Spatial positions are flattened row-major into a sequence of length H*W;
    no positional encoding is added.
    """

    def __init__(self, in_channels: int, out_channels: int, hidden: int, name: str, rng: SeededRng, heads: int = 4):
        if hidden % heads:
            raise ShapeError(f"AttentionStack '{name}': hidden width {hidden} is not divisible by heads={heads}")
        super().__init__(name, out_channels)
        self.heads = heads
        embed = _conv_filters(1, in_channels, hidden, rng.child("embed"), f"{name}/embed/filters")
        self.embed_filters = self._add(embed)
        self.embed_bias = self._add(Parameter(np.zeros(hidden), f"{name}/embed/bias"))
        scale = 1.0 / math.sqrt(hidden)
        projections = []
        for role in ("query", "key", "value", "output"):
            values = rng.child(role).normal((hidden, hidden), scale)
            projections.append(self._add(Parameter(values, f"{name}/attention/{role}")))
        self.w_query, self.w_key, self.w_value, self.w_output = projections
        self.norm_gain = self._add(Parameter(np.ones(hidden), f"{name}/norm/gain"))
        self.norm_bias = self._add(Parameter(np.zeros(hidden), f"{name}/norm/bias"))
        self.conv_filters = self._add(_conv_filters(3, hidden, hidden, rng.child("conv"), f"{name}/conv/filters"))
        self.conv_bias = self._add(Parameter(np.zeros(hidden), f"{name}/conv/bias"))
        self._output_layer(hidden)

    def __call__(self, x: Tensor) -> Tensor:
        b, h, w, _ = x.shape
        embedded = conv2d(x, self.embed_filters, self.embed_bias)
        width = embedded.shape[3]
        sequence = embedded.reshape(b, h * w, width)
        attended = multi_head_self_attention(
            sequence, self.heads, self.w_query, self.w_key, self.w_value, self.w_output
        )
        normed = layer_norm(sequence + attended, self.norm_gain, self.norm_bias).reshape(b, h, w, width)
        hidden = conv2d(normed, self.conv_filters, self.conv_bias).relu()
        return conv2d(hidden, self.out_filters, self.out_bias)


def build_subnet(
    kind: str, in_channels: int, out_channels: int, hidden: int, name: str, rng: SeededRng, heads: int = 4
):
    if kind == "conv":
        return ConvStack(in_channels, out_channels, hidden, name, rng)
    if kind == "attention":
        return AttentionStack(in_channels, out_channels, hidden, name, rng, heads=heads)
    raise ValueError(f"unknown subnetwork kind '{kind}'")
