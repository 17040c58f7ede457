"""Finite-difference gradient verification.

The numeric side only ever calls the forward pass, so it is independent of
every hand-written backward rule it checks. Checks run at float64; central
differences with the default step are unreliable at float32.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import Sample
from .model import HsLiNetModel, ModelConfig, init_params, model_forward_batch
from .ops import softmax_cross_entropy
from .tensor import Parameter, Tape, Tensor, zero_grads

__all__ = [
    "central_difference_grad",
    "max_relative_error",
    "GradCheckResult",
    "check_model_gradients",
    "random_sample",
]

DEFAULT_STEP = 1e-5
# entries where both gradients are below this scale are compared absolutely
REL_ERR_FLOOR = 1e-6


def central_difference_grad(
    loss_fn: Callable[[], float], param: Parameter, step: float = DEFAULT_STEP
) -> np.ndarray:
    """d(loss)/d(param) by central differences, one entry at a time.

    `loss_fn` must rerun the forward pass from scratch and return the scalar
    loss; the parameter value is restored exactly after each probe.
    """
    flat = param.value.data.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = loss_fn()
        flat[i] = orig - step
        lo = loss_fn()
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * step)
    return grad.reshape(param.value.shape)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_ERR_FLOOR) -> float:
    """Max over entries of |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / scale).max())


def random_sample(config: ModelConfig, rng: np.random.Generator, dtype=np.float64) -> Sample:
    """A synthetic patch pair with standard-normal entries and a random label."""
    hsi = rng.standard_normal((config.p, config.p, config.ch)).astype(dtype)
    lidar = rng.standard_normal((config.p, config.p, 1)).astype(dtype)
    label = int(rng.integers(1, config.classes + 1))
    return Sample(hsi_patch=Tensor(hsi), lidar_patch=Tensor(lidar), label=label, center=(0, 0))


@dataclass
class GradCheckResult:
    max_rel_err: float
    per_param: dict[str, float]

    def worst(self) -> tuple[str, float]:
        name = max(self.per_param, key=self.per_param.get)
        return name, self.per_param[name]


def check_model_gradients(
    config: ModelConfig,
    seed: int,
    step: float = DEFAULT_STEP,
    batch: int = 2,
) -> GradCheckResult:
    """Compare every parameter's analytic gradient of the cross-entropy loss
    against central finite differences on a random batch.

    Both sides run the training-mode forward pass (batch statistics in the
    normalization layers), whose output is a pure function of inputs and
    parameters, so running-stat side effects cannot skew the comparison.
    """
    model = init_params(config, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    samples = [random_sample(config, rng) for _ in range(batch)]
    labels = np.array([s.label - 1 for s in samples], dtype=np.int64)

    def loss_fn() -> float:
        logits = model_forward_batch(samples, model, training=True)
        return softmax_cross_entropy(logits, labels).item()

    params = model.parameters()
    zero_grads(params)
    with Tape() as tape:
        logits = model_forward_batch(samples, model, training=True)
        loss = softmax_cross_entropy(logits, labels)
    tape.backward(loss)
    analytic = {name: p.grad.data.copy() for name, p in model.named_parameters()}

    per_param: dict[str, float] = {}
    for name, p in model.named_parameters():
        numeric = central_difference_grad(loss_fn, p, step)
        per_param[name] = max_relative_error(analytic[name], numeric)
    return GradCheckResult(max_rel_err=max(per_param.values()), per_param=per_param)
