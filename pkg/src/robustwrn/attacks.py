"""White-box L-infinity attacks: FGSM, PGD and the PGD-optimized CW margin attack."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .nn import Network, forward_network, loss_tape

LOSSES = ("cross-entropy", "cw-margin")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    steps: int = 20
    step_size: float = 0.8 / 255
    random_start: bool = False
    loss: str = "cross-entropy"
    input_bounds: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if not 0 <= self.epsilon <= 1:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if int(self.steps) < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")
        if not self.step_size > 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        object.__setattr__(self, "input_bounds", tuple(float(v) for v in self.input_bounds))

    @classmethod
    def eval_preset(cls, epsilon: float = 8 / 255, loss: str = "cross-entropy") -> "AttackConfig":
        """PGD-20 with step size epsilon / 10, deterministic start."""
        return cls(epsilon, 20, epsilon / 10, False, loss)

    @classmethod
    def train_preset(cls, epsilon: float = 8 / 255) -> "AttackConfig":
        """PGD-10 with step size 2/255 and a uniform random start."""
        return cls(epsilon, 10, 2 / 255, True, "cross-entropy")

    @classmethod
    def fgsm(cls, epsilon: float = 8 / 255) -> "AttackConfig":
        return cls(epsilon, 1, max(epsilon, 1e-12), False, "cross-entropy")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_bounds"] = list(self.input_bounds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown attack keys: {sorted(unknown)}")
        return cls(**d)


def sign(g: np.ndarray) -> np.ndarray:
    # np.sign maps 0 to 0, which keeps zero-gradient coordinates stationary.
    return np.sign(g)


def project_linf(candidate, anchor, epsilon: float, bounds=(0.0, 1.0)) -> np.ndarray:
    """Clamp ``candidate`` into the epsilon-box around ``anchor`` intersected with ``bounds``."""
    candidate = np.asarray(candidate)
    anchor = np.asarray(anchor)
    if candidate.shape != anchor.shape:
        raise T.ShapeError(f"project_linf: candidate {candidate.shape} vs anchor {anchor.shape}")
    lo = anchor - epsilon
    hi = anchor + epsilon
    # anchor - epsilon can round so that anchor - lo > epsilon; step such edges
    # one ulp inward so containment holds exactly in floating point.
    for _ in range(4):
        bad_lo = (anchor - lo) > epsilon
        bad_hi = (hi - anchor) > epsilon
        if not (bad_lo.any() or bad_hi.any()):
            break
        lo = np.where(bad_lo, np.nextafter(lo, anchor), lo)
        hi = np.where(bad_hi, np.nextafter(hi, anchor), hi)
    lo = np.maximum(lo, bounds[0])
    hi = np.minimum(hi, bounds[1])
    return np.minimum(np.maximum(candidate, lo), hi)


def input_gradient(net: Network, x: np.ndarray, y: np.ndarray, loss: str = "cross-entropy") -> np.ndarray:
    """d loss / d x with the network in eval mode."""
    _, _, tape = loss_tape(net, x, y, loss=loss, mode="eval", param_grads=False)
    return T.gradients(tape, "input")


def random_start(x: np.ndarray, epsilon: float, rng: np.random.Generator, bounds=(0.0, 1.0)) -> np.ndarray:
    """Uniform sample from the epsilon-box around ``x`` intersected with ``bounds``."""
    lo = np.maximum(x - epsilon, bounds[0])
    hi = np.minimum(x + epsilon, bounds[1])
    return project_linf(lo + rng.random(x.shape) * (hi - lo), x, epsilon, bounds).astype(x.dtype)


def sign_ascent(
    grad_fn: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    epsilon: float,
    steps: int,
    step_size: float,
    x0: np.ndarray | None = None,
    bounds=(0.0, 1.0),
    trace: list | None = None,
) -> np.ndarray:
    """Projected signed-gradient ascent inside the epsilon-box around ``x``.

    ``grad_fn(x_adv)`` returns the gradient of the objective being maximized.
    """
    xa = x.copy() if x0 is None else x0
    for _ in range(steps):
        g = grad_fn(xa)
        xa = project_linf(xa + step_size * sign(g), x, epsilon, bounds).astype(x.dtype, copy=False)
        if trace is not None:
            trace.append(xa)
    return xa


def _as_array(net: Network, x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, T.Tensor) else x, dtype=net.dtype)


def pgd(net: Network, x, y, cfg: AttackConfig, rng: np.random.Generator | None = None, trace: list | None = None) -> np.ndarray:
    """Untargeted L-inf PGD; ``trace`` collects every iterate when given."""
    x = _as_array(net, x)
    y = np.asarray(y, dtype=np.int64)
    if cfg.epsilon == 0:
        return x.copy()
    x0 = None
    if cfg.random_start:
        if rng is None:
            rng = np.random.default_rng(0)
        x0 = random_start(x, cfg.epsilon, rng, cfg.input_bounds)
    return sign_ascent(
        lambda xa: input_gradient(net, xa, y, cfg.loss),
        x, cfg.epsilon, int(cfg.steps), cfg.step_size, x0, cfg.input_bounds, trace,
    )


def fgsm(net: Network, x, y, epsilon: float) -> np.ndarray:
    """Single signed step of size epsilon from the clean input."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    x = _as_array(net, x)
    if epsilon == 0:
        return x.copy()
    return pgd(net, x, y, AttackConfig.fgsm(epsilon))


def cw_margin_loss(logits, y) -> float:
    """Mean over the batch of max_{j != y} z_j - z_y."""
    z = logits if isinstance(logits, T.Tensor) else T.Tensor(np.asarray(logits, dtype=np.float64))
    return T.cw_margin(z, np.asarray(y)).item()


def attack(net: Network, x, y, cfg: AttackConfig, rng: np.random.Generator | None = None, batch_size: int | None = None) -> np.ndarray:
    """PGD over a dataset in chunks; each chunk draws from ``rng`` in order."""
    x = _as_array(net, x)
    y = np.asarray(y, dtype=np.int64)
    if batch_size is None or batch_size >= len(x):
        return pgd(net, x, y, cfg, rng)
    parts = [pgd(net, x[i : i + batch_size], y[i : i + batch_size], cfg, rng) for i in range(0, len(x), batch_size)]
    return np.concatenate(parts, axis=0)


def predict(net: Network, x, batch_size: int | None = None) -> np.ndarray:
    """Arg-max class per sample, ties to the lowest index."""
    x = _as_array(net, x)
    if batch_size is None or batch_size >= len(x):
        logits, _ = forward_network(net, x, "eval")
        return np.argmax(logits.data, axis=1)
    return np.concatenate([predict(net, x[i : i + batch_size]) for i in range(0, len(x), batch_size)])
