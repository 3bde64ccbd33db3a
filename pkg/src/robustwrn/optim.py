"""SGD with momentum and coupled L2 weight decay, plus the step LR schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import BatchNorm2d, Network


class NonFiniteError(FloatingPointError):
    """A gradient or loss contained NaN or Inf."""


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @classmethod
    def for_network(cls, net: Network, seed: int = 0) -> "OptimizerState":
        return cls({p.name: np.zeros_like(p.data) for p in net.parameters()}, 0, np.random.default_rng(seed))


def lr_at(epoch: int, epochs: int, lr0: float, milestone_fractions=(0.75, 0.9), decay: float = 0.1) -> float:
    """Step schedule: lr0 * decay^(milestones passed), milestones at floor(f * epochs).

    Milestones are never placed before epoch 1, so very short runs still
    start at ``lr0``.
    """
    if not 0 <= epoch < epochs:
        raise ValueError(f"epoch {epoch} outside [0, {epochs})")
    milestones = [max(1, math.floor(f * epochs)) for f in milestone_fractions]
    passed = sum(1 for m in milestones if epoch >= m)
    return lr0 * decay ** passed


def decay_mask(net: Network) -> dict[str, bool]:
    """Weight decay applies to conv and linear weights, never to BN affine params."""
    bn_params = set()
    for layer in net.walk():
        if isinstance(layer, BatchNorm2d):
            bn_params.update(p.name for p in layer.parameters())
    return {p.name: (p.name not in bn_params and not p.name.endswith(".bias")) for p in net.parameters()}


def sgd_step(
    net: Network,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
    decay_params: dict[str, bool] | None = None,
) -> None:
    """In place: g' = g + wd * theta; v = momentum * v + g'; theta -= lr * v."""
    params = net.named_parameters()
    missing = set(params) - set(grads)
    if missing:
        raise KeyError(f"no gradient for parameters: {sorted(missing)[:3]}")
    if decay_params is None:
        decay_params = decay_mask(net)
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
        if weight_decay and decay_params.get(name, True):
            g = g + weight_decay * p.data
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = momentum * v + g
        state.velocity[name] = v.astype(p.dtype, copy=False)
        p.data = (p.data - lr * v).astype(p.dtype, copy=False)
