"""
FlowAug - Verification Service
Programmatic property checks behind the `verify` command

Features:
- Round-trip invertibility of every layer kind and a full multi-scale model
- Analytic log-determinants against dense finite-difference Jacobians
- Zero-init identity and ActNorm initialization postconditions
- Finite-difference gradient checks of the training loss
- Squeeze multiset preservation, checkpoint bit-exactness and density normalization
"""

import logging
import tempfile
from pathlib import Path
from typing import Callable, Dict, List

import numpy as np

from engine.errors import VerificationError
from engine.rng import SeededRng
from engine.tensor import Tensor, no_grad
from flows.jacobian import gradient_check_all, layer_function, log_abs_det_jacobian, model_function
from flows.layers import ActNorm, AffineCoupling, InvConv1x1, Squeeze, factor_out, merge, squeeze, unsqueeze
from flows.model import MultiScaleFlow
from flows.objective import nll_loss
from flows.subnets import build_subnet
from flows.toy import build_toy_flow, grid_mass, two_moons
from utils.checkpoint import load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

ROUND_TRIP_TOLERANCE = 1e-6
MODEL_ROUND_TRIP_TOLERANCE = 1e-5
LOGDET_TOLERANCE = 1e-4
GRADIENT_TOLERANCE = 1e-3
MASS_TOLERANCE = 0.01
ACTNORM_MEAN_TOLERANCE = 1e-6


def require(condition, message: str) -> None:
    if not condition:
        raise VerificationError(message)


def jitter_parameters(parameters, rng: SeededRng, scale: float = 0.05) -> None:
    """Perturb parameters so zero-initialized layers compute non-trivial maps."""
    for p in parameters:
        p.data += rng.child(p.name).normal(p.shape, scale)


def build_layer_suite(channels: int, rng: SeededRng, hidden: int = 8, heads: int = 2) -> Dict[str, object]:
    """One instance of every layer kind, initialized and perturbed away from identity."""
    actnorm = ActNorm(channels, "actnorm")
    actnorm.initialize(rng.child("actnorm").normal((16, 4, 4, channels), 2.0) + 0.3)
    layers = {
        "actnorm": actnorm,
        "invconv": InvConv1x1(channels, "invconv", rng=rng.child("invconv")),
        "squeeze": Squeeze(),
    }
    for kind in ("conv", "attention"):
        subnet = build_subnet(
            kind, channels // 2, channels, hidden, f"coupling_{kind}/{kind}", rng.child(kind), heads=heads
        )
        coupling = AffineCoupling(channels, subnet, f"coupling_{kind}")
        jitter_parameters(coupling.parameters(), rng.child(kind, "jitter"))
        layers[f"coupling_{kind}"] = coupling
    return layers


def build_check_model(
    input_shape, levels: int, steps: int, rng: SeededRng, hidden: int = 8, heads: int = 2
) -> MultiScaleFlow:
    """Small model with data-initialized ActNorms and perturbed couplings."""
    model = MultiScaleFlow(input_shape, levels=levels, steps=steps, hidden=hidden, rng=rng.child("model"), heads=heads)
    model.initialize(rng.child("init").normal((16,) + tuple(input_shape)) * 0.5 + 0.5)
    jitter_parameters(model.parameters(), rng.child("jitter"), scale=0.02)
    return model


class VerificationService:
    """
    Runs the property-check suite and reports passed/total
    """

    def __init__(self, seed: int = 0, trials: int = 100):
        """
        Initialize the verification service

        Args:
            seed: master seed for every randomized check
            trials: randomized round-trips per layer kind
        """
        self.rng = SeededRng(seed)
        self.trials = trials
        logger.info("Initializing VerificationService")

    # ---- individual checks: return a detail string or raise VerificationError ----

    def check_layer_round_trips(self) -> str:
        rng = self.rng.child("round-trip")
        layers = build_layer_suite(4, rng.child("layers"))
        worst = {}
        with no_grad():
            for name, layer in layers.items():
                error = 0.0
                for trial in range(self.trials):
                    x = rng.child(name, trial).normal((1, 8, 8, 4))
                    y, _ = layer.forward(Tensor(x))
                    error = max(error, float(np.max(np.abs(layer.inverse(y).data - x))))
                worst[name] = error
            error = 0.0
            for trial in range(self.trials):
                x = rng.child("factor", trial).normal((1, 8, 8, 4))
                error = max(error, float(np.max(np.abs(merge(*factor_out(Tensor(x))).data - x))))
            worst["factor_out"] = error
        failing = {k: v for k, v in worst.items() if not v < ROUND_TRIP_TOLERANCE}
        require(not failing, f"round-trip error above {ROUND_TRIP_TOLERANCE}: {failing}")
        return f"max errors {', '.join(f'{k}={v:.2e}' for k, v in worst.items())}"

    def check_model_round_trip(self) -> str:
        rng = self.rng.child("model-round-trip")
        model = build_check_model((8, 8, 4), levels=2, steps=4, rng=rng)
        error = 0.0
        with no_grad():
            for trial in range(self.trials):
                x = rng.child("x", trial).normal((1, 8, 8, 4))
                latent, _ = model.forward(x)
                error = max(error, float(np.max(np.abs(model.inverse(latent).data - x))))
        require(error < MODEL_ROUND_TRIP_TOLERANCE, f"model round-trip error {error:.3e}")
        return f"max error {error:.2e} over {self.trials} inputs"

    def check_log_determinants(self) -> str:
        rng = self.rng.child("logdet")
        layers = build_layer_suite(2, rng.child("layers"))
        gaps = {}
        for name, layer in layers.items():
            x = rng.child(name).normal((1, 4, 4, 2))
            with no_grad():
                _, logdet = layer.forward(Tensor(x))
            gaps[name] = abs(float(logdet.data[0]) - log_abs_det_jacobian(layer_function(layer), x))
        model = build_check_model((8, 8, 1), levels=1, steps=2, rng=rng.child("model"))
        x = rng.child("model-x").normal((1, 8, 8, 1)) * 0.3 + 0.5
        with no_grad():
            _, logdet = model.forward(x)
        gaps["model"] = abs(float(logdet.data[0]) - log_abs_det_jacobian(model_function(model), x))
        failing = {k: v for k, v in gaps.items() if not v < LOGDET_TOLERANCE}
        require(not failing, f"log-det mismatch above {LOGDET_TOLERANCE}: {failing}")
        return f"max gap {max(gaps.values()):.2e}"

    def check_zero_init_identity(self) -> str:
        rng = self.rng.child("identity")
        model = MultiScaleFlow((8, 8, 4), levels=2, steps=4, hidden=8, rng=rng, heads=2, identity_init=True)
        x = rng.child("x").normal((2, 8, 8, 4))
        with no_grad():
            latent, logdet = model.forward(x)
        require(np.all(logdet.data == 0.0), f"identity model log-det is {logdet.data}, expected exactly 0")
        for i in range(x.shape[0]):
            rearranged = np.array_equal(np.sort(latent.item(i).flatten().ravel()), np.sort(x[i].ravel()))
            require(rearranged, f"identity model latent of item {i} is not a rearrangement of its input")
        return "latents are rearrangements, log-det exactly 0"

    def check_actnorm_init(self) -> str:
        rng = self.rng.child("actnorm")
        layer = ActNorm(3, "actnorm")
        batch = rng.normal((32, 4, 4, 3)) * np.array([0.5, 3.0, 10.0]) + np.array([1.0, -2.0, 7.0])
        layer.initialize(batch)
        with no_grad():
            y, _ = layer.forward(Tensor(batch))
        mean = np.abs(y.data.mean(axis=(0, 1, 2)))
        var = y.data.var(axis=(0, 1, 2))
        require(np.all(mean < ACTNORM_MEAN_TOLERANCE), f"post-init channel means {mean}")
        require(np.all((var >= 0.99) & (var <= 1.01)), f"post-init channel variances {var}")
        return f"max |mean| {mean.max():.1e}, variances {np.round(var, 6).tolist()}"

    def check_gradients(self) -> str:
        rng = self.rng.child("gradients")
        model = build_check_model((4, 4, 2), levels=2, steps=2, rng=rng)
        batch = rng.child("batch").normal((4, 4, 4, 2)) * 0.5 + 0.5

        def loss_fn():
            return nll_loss(model, batch).loss

        errors = gradient_check_all(loss_fn, model.parameters(), rng.child("projections"), projections=10)
        failing = {k: v for k, v in errors.items() if not v < GRADIENT_TOLERANCE}
        require(not failing, f"gradient relative error above {GRADIENT_TOLERANCE}: {failing}")
        return f"{len(errors)} parameters, max relative error {max(errors.values()):.2e}"

    def check_squeeze_multiset(self) -> str:
        x = self.rng.child("squeeze").normal((2, 8, 8, 3))
        with no_grad():
            y = squeeze(Tensor(x))
            back = unsqueeze(y)
        require(y.shape == (2, 4, 4, 12), f"squeeze shape {y.shape}")
        require(np.array_equal(np.sort(y.data.ravel()), np.sort(x.ravel())), "squeeze changed the value multiset")
        require(np.array_equal(back.data, x), "unsqueeze(squeeze(x)) != x")
        return "values preserved exactly"

    def check_checkpoint_round_trip(self) -> str:
        rng = self.rng.child("checkpoint")
        model = build_check_model((4, 4, 2), levels=1, steps=2, rng=rng)
        fresh = MultiScaleFlow((4, 4, 2), levels=1, steps=2, hidden=8, rng=rng.child("other"), heads=2)
        x = rng.child("x").normal((3, 4, 4, 2))
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(Path(tmp) / "model.ckpt", model)
            load_checkpoint(path, fresh)
        with no_grad():
            expected = model.log_prob(x).data
            actual = fresh.log_prob(x).data
        require(np.array_equal(expected, actual), f"log_prob differs after reload: {expected} vs {actual}")
        return "log_prob bit-identical after reload"

    def check_density_normalization(self) -> str:
        rng = self.rng.child("quadrature")
        model = build_toy_flow(rng.child("model"))
        model.initialize(two_moons(256, seed=rng.derive_seed("data")))
        mass = grid_mass(model)
        require(abs(mass - 1.0) <= MASS_TOLERANCE, f"density integrates to {mass:.5f}")
        return f"grid mass {mass:.5f}"

    # ---- suite ----------------------------------------------------------------

    def checks(self) -> Dict[str, Callable[[], str]]:
        return {
            "layer_round_trips": self.check_layer_round_trips,
            "model_round_trip": self.check_model_round_trip,
            "log_determinants": self.check_log_determinants,
            "zero_init_identity": self.check_zero_init_identity,
            "actnorm_init": self.check_actnorm_init,
            "gradients": self.check_gradients,
            "squeeze_multiset": self.check_squeeze_multiset,
            "checkpoint_round_trip": self.check_checkpoint_round_trip,
            "density_normalization": self.check_density_normalization,
        }

    def run(self) -> Dict:
        """
        Run every check

        Returns:
            Dict with success flag, passed/total counts, per-check records and failures
        """
        records: List[Dict[str, object]] = []
        for name, check in self.checks().items():
            try:
                detail = check()
                records.append({"name": name, "passed": True, "detail": detail})
                logger.info(f"verify {name}: passed ({detail})")
            except VerificationError as e:
                records.append({"name": name, "passed": False, "detail": str(e)})
                logger.error(f"verify {name}: FAILED: {str(e)}")
            except Exception as e:
                records.append({"name": name, "passed": False, "detail": f"{type(e).__name__}: {str(e)}"})
                logger.error(f"verify {name}: error: {str(e)}")

        passed = sum(1 for r in records if r["passed"])
        return {
            'success': passed == len(records),
            'passed': passed,
            'total': len(records),
            'checks': records,
            'failures': [r for r in records if not r["passed"]],
        }
