"""
FlowAug - Invertible Flow Layers
Bijective building blocks with exact log-determinants

Features:
- ActNorm: per-channel affine with data-dependent initialization
- InvConv1x1: learned channel mixing, rotation-initialized
- AffineCoupling: half-split affine transform driven by a subnetwork
- Squeeze / unsqueeze: 2x2 spatial blocks to channels
- factor_out / merge: emit half the channels as final latents

Every layer maps a (B, H, W, C) tensor to (y, logdet) where logdet has shape (B,).
"""

import logging
from typing import List, Tuple

import numpy as np
from scipy import linalg

from engine.errors import DataError, LayerNotInitializedError, NonFiniteError, ShapeError, SingularWeightError
from engine.ops import concat, matmul, slogdet
from engine.rng import SeededRng
from engine.tensor import Parameter, Tensor, as_tensor

logger = logging.getLogger(__name__)

ACTNORM_MIN_STD = 1e-6
SINGULAR_DET_THRESHOLD = 1e-12
SCALE_STABILIZERS = ("sigmoid", "exp")


def _per_item(scalar: Tensor, batch: int) -> Tensor:
    """Broadcast a scalar log-determinant to shape (batch,)."""
    return scalar + Tensor(np.zeros(batch))


def _zero_logdet(batch: int) -> Tensor:
    return Tensor(np.zeros(batch))


def _require_4d(x: Tensor, layer: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{layer} expects (B, H, W, C) input, got shape {x.shape}")


class FlowLayer:
    """Interface shared by all invertible layers"""

    name: str = "layer"

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        raise NotImplementedError

    def inverse(self, y: Tensor) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> List[Parameter]:
        return []


class ActNorm(FlowLayer):
    """
    Per-channel affine layer: y = s * x + b

    logdet = h * w * sum_c log|s_c|, identical for every item in the batch.
    The layer refuses forward passes until `initialize` has seen a batch
    (or `mark_initialized` is called after loading stored values).
    """

    def __init__(self, channels: int, name: str):
        self.name = name
        self.channels = channels
        self.scale = Parameter(np.ones(channels), f"{name}/scale")
        self.bias = Parameter(np.zeros(channels), f"{name}/bias")
        self.initialized = False

    def initialize(self, batch) -> None:
        """
        Data-dependent init: per-channel zero mean, unit variance on `batch`

        Args:
            batch: (B, H, W, C) array or tensor with B >= 2
        """
        data = as_tensor(batch).data
        if data.ndim != 4 or data.shape[3] != self.channels:
            raise ShapeError(f"ActNorm '{self.name}' init expects (B, H, W, {self.channels}), got {data.shape}")
        if data.shape[0] < 2:
            raise DataError(f"ActNorm '{self.name}' init needs at least 2 samples, got {data.shape[0]}")

        mean = data.mean(axis=(0, 1, 2))
        std = data.std(axis=(0, 1, 2))
        degenerate = std < ACTNORM_MIN_STD
        if np.any(degenerate):
            logger.warning(
                f"ActNorm '{self.name}': channels {np.flatnonzero(degenerate).tolist()} have ~zero variance, "
                f"adding epsilon {ACTNORM_MIN_STD}"
            )
            std = std + degenerate * ACTNORM_MIN_STD
        self.scale.assign(1.0 / std)
        self.bias.assign(-mean / std)
        self.initialized = True

    def mark_initialized(self) -> None:
        if not np.all(np.abs(self.scale.data) > 0):
            raise LayerNotInitializedError(f"ActNorm '{self.name}' has a zero scale entry")
        self.initialized = True

    def _check_ready(self, x: Tensor) -> None:
        if not self.initialized:
            raise LayerNotInitializedError(f"ActNorm '{self.name}' used before data-dependent initialization")
        _require_4d(x, f"ActNorm '{self.name}'")
        if x.shape[3] != self.channels:
            raise ShapeError(f"ActNorm '{self.name}' has {self.channels} channels, input shape {x.shape}")

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        x = as_tensor(x)
        self._check_ready(x)
        _, h, w, _ = x.shape
        y = x * self.scale + self.bias
        logdet = self.scale.abs().log().sum() * float(h * w)
        return y, _per_item(logdet, x.shape[0])

    def inverse(self, y: Tensor) -> Tensor:
        y = as_tensor(y)
        self._check_ready(y)
        return (y - self.bias) / self.scale

    def parameters(self) -> List[Parameter]:
        return [self.scale, self.bias]


def random_rotation(channels: int, rng: SeededRng) -> np.ndarray:
    """Orthogonal matrix with determinant +1 from the QR of a seeded Gaussian."""
    q, r = linalg.qr(rng.normal((channels, channels)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


class InvConv1x1(FlowLayer):
    """
    Invertible 1x1 convolution: y[b, i, j, :] = W @ x[b, i, j, :]

    W is stored densely; log|det W| is recomputed by LU each forward.
    """

    def __init__(self, channels: int, name: str, rng: SeededRng = None, identity: bool = False):
        self.name = name
        self.channels = channels
        if identity or rng is None:
            weight = np.eye(channels)
        else:
            weight = random_rotation(channels, rng)
        self.weight = Parameter(weight, f"{name}/weight")

    def _check(self, x: Tensor) -> None:
        _require_4d(x, f"InvConv1x1 '{self.name}'")
        if x.shape[3] != self.channels:
            raise ShapeError(f"InvConv1x1 '{self.name}' weight is {self.weight.shape}, input shape {x.shape}")
        det = np.linalg.det(self.weight.data)
        if not abs(det) > SINGULAR_DET_THRESHOLD:
            raise SingularWeightError(f"InvConv1x1 '{self.name}' is singular: |det W| = {abs(det):.3e}")

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        x = as_tensor(x)
        self._check(x)
        _, h, w, _ = x.shape
        y = matmul(x, self.weight.T)
        logdet = slogdet(self.weight) * float(h * w)
        return y, _per_item(logdet, x.shape[0])

    def inverse(self, y: Tensor) -> Tensor:
        y = as_tensor(y)
        self._check(y)
        return matmul(y, Tensor(np.linalg.inv(self.weight.data).T))

    def parameters(self) -> List[Parameter]:
        return [self.weight]


class AffineCoupling(FlowLayer):
    """
    Affine coupling on a channel split at d = C/2

    y[:d] = x[:d]
    y[d:] = x[d:] * exp(s) + t,   (s_raw, t) = subnet(x[:d])

    With the 'sigmoid' stabilizer s = log sigmoid(s_raw + 2) - log sigmoid(2),
    which is exactly 0 at s_raw = 0 and keeps exp(s) below 1/sigmoid(2).
    With 'exp' the raw output is used as s directly.
    """

    def __init__(self, channels: int, subnet, name: str, stabilizer: str = "sigmoid"):
        if channels % 2:
            raise ShapeError(f"AffineCoupling '{name}' needs an even channel count, got {channels}")
        if stabilizer not in SCALE_STABILIZERS:
            raise ValueError(f"unknown scale stabilizer '{stabilizer}', expected one of {SCALE_STABILIZERS}")
        self.name = name
        self.channels = channels
        self.split = channels // 2
        self.subnet = subnet
        self.stabilizer = stabilizer

    def _scale_and_shift(self, conditioner: Tensor) -> Tuple[Tensor, Tensor]:
        transformed = self.channels - self.split
        try:
            h = self.subnet(conditioner)
            raw, shift = h[..., :transformed], h[..., transformed:]
            if self.stabilizer == "sigmoid":
                # same elementwise path as raw, so raw == 0 maps to exactly 0
                offset = Tensor(np.full(raw.shape, 2.0)).log_sigmoid()
                scale = (raw + 2.0).log_sigmoid() - offset
            else:
                scale = raw
        except NonFiniteError as e:
            raise NonFiniteError(
                f"coupling '{self.name}': subnetwork '{self.subnet.name}' produced non-finite output ({e})"
            ) from e
        return scale, shift

    def _halves(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        _require_4d(x, f"AffineCoupling '{self.name}'")
        if x.shape[3] != self.channels:
            raise ShapeError(f"AffineCoupling '{self.name}' has {self.channels} channels, input shape {x.shape}")
        return x[..., : self.split], x[..., self.split :]

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        x = as_tensor(x)
        x_a, x_b = self._halves(x)
        scale, shift = self._scale_and_shift(x_a)
        y_b = x_b * scale.exp() + shift
        return concat([x_a, y_b], axis=-1), scale.sum(axis=(1, 2, 3))

    def inverse(self, y: Tensor) -> Tensor:
        y = as_tensor(y)
        y_a, y_b = self._halves(y)
        scale, shift = self._scale_and_shift(y_a)
        x_b = (y_b - shift) * (-scale).exp()
        return concat([y_a, x_b], axis=-1)

    def parameters(self) -> List[Parameter]:
        return self.subnet.parameters()


def squeeze(x: Tensor) -> Tensor:
    """
    (B, H, W, C) -> (B, H/2, W/2, 4C)

    Output channel k*C + c holds input channel c of sub-pixel k, with
    k = 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
    """
    x = as_tensor(x)
    _require_4d(x, "squeeze")
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"squeeze needs even spatial dims, got shape {x.shape}")
    return x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, h // 2, w // 2, 4 * c)


def unsqueeze(y: Tensor) -> Tensor:
    """Exact inverse of `squeeze`."""
    y = as_tensor(y)
    _require_4d(y, "unsqueeze")
    b, h, w, c4 = y.shape
    if c4 % 4:
        raise ShapeError(f"unsqueeze needs a channel count divisible by 4, got shape {y.shape}")
    c = c4 // 4
    return y.reshape(b, h, w, 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, 2 * h, 2 * w, c)


class Squeeze(FlowLayer):
    def __init__(self, name: str = "squeeze"):
        self.name = name

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        x = as_tensor(x)
        return squeeze(x), _zero_logdet(x.shape[0])

    def inverse(self, y: Tensor) -> Tensor:
        return unsqueeze(y)


def factor_out(x: Tensor) -> Tuple[Tensor, Tensor]:
    """Split channels in half: (kept = first half, emitted = second half)."""
    x = as_tensor(x)
    c = x.shape[-1]
    if c % 2:
        raise ShapeError(f"factor_out needs an even channel count, got shape {x.shape}")
    return x[..., : c // 2], x[..., c // 2 :]


def merge(kept: Tensor, emitted: Tensor) -> Tensor:
    kept, emitted = as_tensor(kept), as_tensor(emitted)
    if kept.shape != emitted.shape:
        raise ShapeError(f"merge needs equal halves, got {kept.shape} and {emitted.shape}")
    return concat([kept, emitted], axis=-1)
