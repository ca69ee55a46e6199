"""
FlowAug - Multi-Scale Flow Model
Composition of invertible layers across scale levels with exact log-likelihood

Features:
- Per level: squeeze, K x [ActNorm -> InvConv1x1 -> AffineCoupling], factor-out
- LatentCode: one Gaussian latent per factor-out point plus the final output
- Progressive data-dependent ActNorm initialization
- log_prob = sum of standard-normal log-densities of all parts + total logdet
- Identity-initialized construction for rearrangement checks
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from engine.errors import NonFiniteError, ShapeError
from engine.ops import standard_normal_log_prob
from engine.rng import SeededRng
from engine.tensor import Parameter, Tensor, as_tensor, no_grad
from flows.layers import ActNorm, AffineCoupling, FlowLayer, InvConv1x1, factor_out, merge, squeeze, unsqueeze
from flows.subnets import build_subnet

logger = logging.getLogger(__name__)


@dataclass
class LatentCode:
    """Latent parts for a batch: emitted halves in level order, then the final output"""

    parts: List[Tensor]

    @property
    def shapes(self) -> List[Tuple[int, ...]]:
        return [tuple(p.shape) for p in self.parts]

    @property
    def batch_size(self) -> int:
        return self.parts[0].shape[0]

    @property
    def size(self) -> int:
        """Total number of scalars across all parts."""
        return int(sum(p.size for p in self.parts))

    def flatten(self) -> np.ndarray:
        """(B, M) array: each part flattened row-major, concatenated in part order."""
        b = self.batch_size
        return np.concatenate([p.data.reshape(b, -1) for p in self.parts], axis=1)

    def item(self, index: int) -> "LatentCode":
        return LatentCode([Tensor(p.data[index : index + 1]) for p in self.parts])

    def arrays(self) -> List[np.ndarray]:
        return [p.data for p in self.parts]

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "LatentCode":
        return cls([Tensor(np.asarray(a, dtype=np.float64)) for a in arrays])

    @classmethod
    def stack(cls, codes: Sequence["LatentCode"]) -> "LatentCode":
        if not codes:
            raise ShapeError("cannot stack an empty list of latent codes")
        count = len(codes[0].parts)
        return cls([Tensor(np.concatenate([c.parts[i].data for c in codes], axis=0)) for i in range(count)])


@dataclass
class FlowLevel:
    index: int
    squeeze: bool
    steps: List[Tuple[ActNorm, InvConv1x1, AffineCoupling]] = field(default_factory=list)
    factor: bool = True

    def layers(self) -> Iterator[FlowLayer]:
        for step in self.steps:
            yield from step


class MultiScaleFlow:
    """
    Glow-style multi-scale normalizing flow

    Args:
        input_shape: (H, W, C) of one image
        levels: number of scale levels L; H and W must be divisible by 2^L when squeezing
        steps: flow steps per level
        hidden: subnetwork width
        rng: seeded stream for weight initialization
        attention_levels: how many final levels use the attention subnetwork
        heads: attention heads
        squeeze: squeeze at the start of every level (off for 1x1 toy inputs)
        stabilizer: coupling scale stabilizer, 'sigmoid' or 'exp'
        identity_init: identity 1x1 convs and unit, already-initialized ActNorms
    """

    def __init__(
        self,
        input_shape: Tuple[int, int, int],
        levels: int,
        steps: int,
        hidden: int,
        rng: SeededRng,
        attention_levels: int = 1,
        heads: int = 4,
        squeeze: bool = True,
        stabilizer: str = "sigmoid",
        identity_init: bool = False,
    ):
        if levels < 1 or steps < 1 or hidden < 1:
            raise ShapeError(f"levels, steps and hidden must be positive, got {levels}, {steps}, {hidden}")
        height, width, channels = (int(v) for v in input_shape)
        if squeeze:
            factor = 2**levels
            if height % factor or width % factor:
                raise ShapeError(
                    f"input spatial dims ({height}, {width}) must be divisible by 2^L = {factor} for L={levels} levels"
                )
        elif channels % (2**levels):
            raise ShapeError(
                f"without squeezing, channel count {channels} must be divisible by 2^L = {2 ** levels}"
            )

        self.input_shape = (height, width, channels)
        self.num_levels = levels
        self.steps_per_level = steps
        self.hidden = hidden
        self.attention_levels = max(0, min(attention_levels, levels))
        self.heads = heads
        self.squeeze = squeeze
        self.stabilizer = stabilizer
        self.last_layer: Optional[str] = None

        logger.info(
            f"Building MultiScaleFlow: input={self.input_shape}, levels={levels}, steps={steps}, "
            f"hidden={hidden}, attention_levels={self.attention_levels}"
        )

        self.levels: List[FlowLevel] = []
        self._part_shapes: List[Tuple[int, int, int]] = []
        h, w, c = height, width, channels
        for level_index in range(levels):
            if squeeze:
                h, w, c = h // 2, w // 2, c * 4
            if c % 2:
                raise ShapeError(f"level {level_index} has odd channel count {c}; couplings need an even split")
            level = FlowLevel(index=level_index, squeeze=squeeze, factor=level_index < levels - 1)
            kind = "attention" if level_index >= levels - self.attention_levels else "conv"
            for step_index in range(steps):
                prefix = f"level{level_index}/step{step_index}"
                step_rng = rng.child(level_index, step_index)
                actnorm = ActNorm(c, f"{prefix}/actnorm")
                if identity_init:
                    actnorm.initialized = True
                invconv = InvConv1x1(c, f"{prefix}/invconv", rng=step_rng.child("invconv"), identity=identity_init)
                subnet = build_subnet(
                    kind, c // 2, c, hidden, f"{prefix}/coupling/{kind}", step_rng.child("subnet"), heads=heads
                )
                coupling = AffineCoupling(c, subnet, f"{prefix}/coupling", stabilizer=stabilizer)
                level.steps.append((actnorm, invconv, coupling))
            self.levels.append(level)
            if level.factor:
                c = c // 2
                self._part_shapes.append((h, w, c))
        self._part_shapes.append((h, w, c))

        names = [p.name for p in self.parameters()]
        if len(names) != len(set(names)):
            raise ShapeError("duplicate parameter names in model")

    # ---- bookkeeping ----------------------------------------------------------

    @property
    def dimension(self) -> int:
        h, w, c = self.input_shape
        return h * w * c

    @property
    def part_shapes(self) -> List[Tuple[int, int, int]]:
        return list(self._part_shapes)

    def layers(self) -> Iterator[FlowLayer]:
        for level in self.levels:
            yield from level.layers()

    def actnorms(self) -> List[ActNorm]:
        return [layer for layer in self.layers() if isinstance(layer, ActNorm)]

    def parameters(self) -> List[Parameter]:
        params: List[Parameter] = []
        for layer in self.layers():
            params.extend(layer.parameters())
        return params

    def named_parameters(self) -> Dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    @property
    def is_initialized(self) -> bool:
        return all(a.initialized for a in self.actnorms())

    def architecture(self) -> Dict[str, object]:
        return {
            "input_shape": "x".join(str(v) for v in self.input_shape),
            "flow_levels": self.num_levels,
            "flow_steps": self.steps_per_level,
            "flow_filters": self.hidden,
            "attention_levels": self.attention_levels,
            "attention_heads": self.heads,
            "squeeze": self.squeeze,
            "scale_stabilizer": self.stabilizer,
        }

    # ---- passes ---------------------------------------------------------------

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"model expects input (B, {', '.join(map(str, self.input_shape))}), got {x.shape}")

    def _run(self, x: Tensor, initialize: bool) -> Tuple[LatentCode, Tensor]:
        x = as_tensor(x)
        self._check_input(x)
        h = x
        logdet = Tensor(np.zeros(x.shape[0]))
        parts: List[Tensor] = []
        try:
            for level in self.levels:
                if level.squeeze:
                    h = squeeze(h)
                for layer in level.layers():
                    self.last_layer = layer.name
                    if initialize and isinstance(layer, ActNorm) and not layer.initialized:
                        layer.initialize(h)
                    h, layer_logdet = layer.forward(h)
                    logdet = logdet + layer_logdet
                if level.factor:
                    h, emitted = factor_out(h)
                    parts.append(emitted)
        except NonFiniteError as e:
            raise NonFiniteError(f"{e} [last layer reached: {self.last_layer}]") from e
        parts.append(h)
        return LatentCode(parts), logdet

    def forward(self, x) -> Tuple[LatentCode, Tensor]:
        """
        Map images to latents

        Returns:
            (latent code, total log-determinant of shape (B,))
        """
        return self._run(x, initialize=False)

    def initialize(self, batch) -> None:
        """Data-dependent ActNorm init, each layer seeing the activations of the ones before it."""
        with no_grad():
            self._run(batch, initialize=True)
        logger.info(f"Initialized {len(self.actnorms())} ActNorm layers on a batch of {as_tensor(batch).shape[0]}")

    def latent_shapes(self, batch: int) -> List[Tuple[int, ...]]:
        return [(batch,) + s for s in self._part_shapes]

    def inverse(self, latent: LatentCode) -> Tensor:
        """Map a latent code back to image space."""
        if len(latent.parts) != len(self._part_shapes):
            raise ShapeError(f"model expects {len(self._part_shapes)} latent parts, got {len(latent.parts)}")
        batch = latent.batch_size
        expected = self.latent_shapes(batch)
        if latent.shapes != expected:
            raise ShapeError(f"latent shapes {latent.shapes} do not match model shapes {expected}")

        h = latent.parts[-1]
        emitted = list(latent.parts[:-1])
        for level in reversed(self.levels):
            if level.factor:
                h = merge(h, emitted.pop())
            for layer in reversed(list(level.layers())):
                self.last_layer = layer.name
                h = layer.inverse(h)
            if level.squeeze:
                h = unsqueeze(h)
        return h

    def log_prob(self, x) -> Tensor:
        """Exact log-density of each item, shape (B,)."""
        latent, logdet = self.forward(x)
        total = logdet
        for part in latent.parts:
            total = total + standard_normal_log_prob(part)
        return total

    def __repr__(self) -> str:
        return (
            f"MultiScaleFlow(input_shape={self.input_shape}, levels={self.num_levels}, "
            f"steps={self.steps_per_level}, hidden={self.hidden})"
        )
