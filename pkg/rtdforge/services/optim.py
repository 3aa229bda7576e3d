"""
AdamW with decoupled weight decay, the linear warmup/decay schedule and
layer-wise learning-rate multipliers.
"""
import logging
import re
from dataclasses import dataclass
from typing import Callable

import numpy as np

from rtdforge.services.tensor import Tensor

logger = logging.getLogger('rtdforge')

_LAYER_NAME = re.compile(r'^discriminator\.layers\.(\d+)\.')


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adamw_update(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
                 beta1: float, beta2: float, eps: float, weight_decay: float) -> tuple[np.ndarray, AdamState]:
    """
    One in-place AdamW step.

    Decay is applied first as ``param *= 1 - lr * weight_decay``, then the
    bias-corrected moment step.
    """
    if grad.shape != param.shape:
        raise ValueError(f"Gradient shape {grad.shape} does not match parameter shape {param.shape}")
    state.step += 1
    if weight_decay:
        param *= 1.0 - lr * weight_decay
    state.m *= beta1
    state.m += (1.0 - beta1) * grad
    state.v *= beta2
    state.v += (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1 ** state.step)
    v_hat = state.v / (1.0 - beta2 ** state.step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return param, state


def excluded_from_decay(name: str, param: Tensor) -> bool:
    """Embeddings, biases and layer-norm parameters are never decayed."""
    return name.startswith('embeddings.') or param.ndim <= 1


class AdamW:
    """
    AdamW over a named parameter set.

    ``lr_scales`` multiplies the scheduled learning rate per parameter
    (layer-wise decay); parameters whose ``grad`` is None are left untouched.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-6,
        weight_decay: float = 0.0,
        lr_scales: dict[str, float] | None = None,
        no_decay: Callable[[str, Tensor], bool] = excluded_from_decay,
    ):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.lr_scales = lr_scales or {}
        self.no_decay = no_decay
        self.state: dict[str, AdamState] = {
            name: AdamState(np.zeros_like(p.data), np.zeros_like(p.data)) for name, p in self.params.items()
        }

    def step(self, lr: float) -> None:
        for name, param in self.params.items():
            if param.grad is None:
                continue
            decay = 0.0 if self.no_decay(name, param) else self.weight_decay
            adamw_update(param.data, param.grad, self.state[name], lr * self.lr_scales.get(name, 1.0),
                         self.beta1, self.beta2, self.eps, decay)

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

    def state_dict(self) -> tuple[dict[str, np.ndarray], dict[str, int]]:
        """Moment tensors keyed ``m/<name>`` and ``v/<name>``, plus per-parameter step counts."""
        arrays: dict[str, np.ndarray] = {}
        steps: dict[str, int] = {}
        for name, state in self.state.items():
            arrays[f"m/{name}"] = state.m
            arrays[f"v/{name}"] = state.v
            steps[name] = state.step
        return arrays, steps

    def load_state_dict(self, arrays: dict[str, np.ndarray], steps: dict[str, int]) -> None:
        for name, state in self.state.items():
            if f"m/{name}" not in arrays or f"v/{name}" not in arrays:
                raise KeyError(f"Optimizer state missing moments for {name}")
            state.m[...] = arrays[f"m/{name}"]
            state.v[...] = arrays[f"v/{name}"]
            state.step = int(steps.get(name, 0))


def linear_schedule(step: int, peak_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear 0 -> peak over warmup, then linear peak -> 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"Step {step} outside schedule range [0, {total_steps}]")
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return peak_lr
    return peak_lr * (total_steps - step) / (total_steps - warmup_steps)


def lr_at(step: int, config) -> float:
    """Schedule value for a config carrying learning_rate/warmup_steps/total_steps."""
    return linear_schedule(step, config.learning_rate, config.warmup_steps, config.total_steps)


def layerwise_multiplier(depth: int, num_layers: int, decay: float) -> float:
    """decay ** (num_layers + 1 - depth); depth 0 = embeddings, num_layers + 1 = head."""
    if not 0 <= depth <= num_layers + 1:
        raise ValueError(f"Depth {depth} outside [0, {num_layers + 1}]")
    if not 0.0 < decay <= 1.0:
        raise ValueError(f"Layer-wise decay must be in (0, 1], got {decay}")
    return decay ** (num_layers + 1 - depth)


def parameter_depth(name: str, num_layers: int) -> int:
    if name.startswith('embeddings.') or name.startswith('discriminator.embedding_'):
        return 0
    match = _LAYER_NAME.match(name)
    if match:
        return int(match.group(1)) + 1
    return num_layers + 1
