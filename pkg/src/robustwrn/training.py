"""Standard adversarial training: PGD inner maximization, SGD outer minimization."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, attack, pgd, predict
from .checkpoint import save_checkpoint
from .data import Dataset
from .nn import Network, forward_network
from .optim import NonFiniteError, OptimizerState, decay_mask, lr_at, sgd_step

log = logging.getLogger(__name__)

STATS_HEADER = ("epoch", "lr", "train_loss", "clean_acc", "robust_acc")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 2e-4
    milestone_fractions: tuple[float, ...] = (0.75, 0.9)
    lr_decay_factor: float = 0.1
    inner_attack: AttackConfig = field(default_factory=AttackConfig.train_preset)
    eval_attack: AttackConfig | None = None
    seed: int = 0
    augment: bool = False

    def __post_init__(self):
        if isinstance(self.inner_attack, dict):
            self.inner_attack = AttackConfig.from_dict(self.inner_attack)
        if isinstance(self.eval_attack, dict):
            self.eval_attack = AttackConfig.from_dict(self.eval_attack)
        self.milestone_fractions = tuple(float(f) for f in self.milestone_fractions)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 < self.lr_decay_factor < 1:
            raise ValueError(f"lr_decay_factor must be in (0, 1), got {self.lr_decay_factor}")
        fr = self.milestone_fractions
        if any(not 0 < f < 1 for f in fr) or any(b <= a for a, b in zip(fr, fr[1:])):
            raise ValueError(f"milestone_fractions must be strictly increasing in (0, 1), got {fr}")

    def lr_at(self, epoch: int) -> float:
        return lr_at(epoch, self.epochs, self.lr0, self.milestone_fractions, self.lr_decay_factor)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestone_fractions"] = list(self.milestone_fractions)
        d["inner_attack"] = self.inner_attack.to_dict()
        d["eval_attack"] = self.eval_attack.to_dict() if self.eval_attack else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    clean_acc: float
    robust_acc: float

    def row(self) -> list:
        return [self.epoch, repr(self.lr), repr(self.train_loss), repr(self.clean_acc), repr(self.robust_acc)]


def augment_batch(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random horizontal flip and zero-pad-then-crop."""
    n, _, h, w = x.shape
    flip = rng.random(n) < 0.5
    x = np.where(flip[:, None, None, None], x[..., ::-1], x)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oy = rng.integers(0, 2 * pad + 1, n)
    ox = rng.integers(0, 2 * pad + 1, n)
    return np.stack([xp[i, :, oy[i] : oy[i] + h, ox[i] : ox[i] + w] for i in range(n)])


def train_step(net: Network, x: np.ndarray, y: np.ndarray, cfg: TrainConfig, state: OptimizerState, lr: float, mask=None) -> float:
    """Craft x' (BN in eval mode), then one train-mode SGD step on x'. Returns the batch loss."""
    xa = pgd(net, x, y, cfg.inner_attack, state.rng)
    logits, tape = forward_network(net, xa, "train", record=True)
    loss = T.cross_entropy(logits, y, tape)
    val = loss.item()
    if not math.isfinite(val):
        raise NonFiniteError(f"non-finite training loss {val}")
    grads = T.gradients(tape, "params")
    sgd_step(net, grads, state, lr, cfg.momentum, cfg.weight_decay, mask)
    return val


def evaluate_split(net: Network, data: Dataset, atk: AttackConfig, batch_size: int = 256) -> tuple[float, float]:
    x = data.images.astype(net.dtype)
    clean = float(np.mean(predict(net, x, batch_size) == data.labels))
    xa = attack(net, x, data.labels, atk, np.random.default_rng(0), batch_size)
    robust = float(np.mean(predict(net, xa, batch_size) == data.labels))
    return clean, robust


def sat_train(
    net: Network,
    data: Dataset,
    cfg: TrainConfig,
    heldout: Dataset | None = None,
    out_dir=None,
    state: OptimizerState | None = None,
    eval_every: int = 1,
) -> tuple[Network, list[EpochStats]]:
    """Adversarially train ``net`` in place.

    Per-epoch stats go to ``out_dir/stats.csv``; ``out_dir/last`` and
    ``out_dir/best`` (highest held-out robust accuracy) are checkpoints.
    """
    if len(data) == 0:
        raise ValueError("training dataset is empty")
    if state is None:
        state = OptimizerState.for_network(net, cfg.seed)
    eval_atk = cfg.eval_attack or cfg.inner_attack
    mask = decay_mask(net)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "stats.csv", "w", newline="") as fh:
            csv.writer(fh).writerow(STATS_HEADER)
    x_all = data.images.astype(net.dtype)
    y_all = data.labels
    history: list[EpochStats] = []
    best = -1.0
    for epoch in range(state.epoch, cfg.epochs):
        lr = cfg.lr_at(epoch)
        perm = state.rng.permutation(len(data))
        losses, weights = [], []
        for i in range(0, len(perm), cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            if len(idx) < 2:
                continue
            xb = x_all[idx]
            if cfg.augment:
                xb = augment_batch(xb, state.rng)
            losses.append(train_step(net, xb, y_all[idx], cfg, state, lr, mask))
            weights.append(len(idx))
        train_loss = float(np.average(losses, weights=weights))
        state.epoch = epoch + 1
        clean = robust = float("nan")
        if heldout is not None and ((epoch + 1) % eval_every == 0 or epoch + 1 == cfg.epochs):
            clean, robust = evaluate_split(net, heldout, eval_atk)
        stats = EpochStats(epoch, lr, train_loss, clean, robust)
        history.append(stats)
        log.info("epoch %d lr %.4g loss %.4f clean %.4f robust %.4f", epoch, lr, train_loss, clean, robust)
        if out is not None:
            with open(out / "stats.csv", "a", newline="") as fh:
                csv.writer(fh).writerow(stats.row())
            save_checkpoint(net, state, out / "last", train_loss=train_loss, robust_acc=robust)
            if heldout is not None and robust == robust and robust > best:
                best = robust
                save_checkpoint(net, state, out / "best", train_loss=train_loss, robust_acc=robust)
    return net, history
