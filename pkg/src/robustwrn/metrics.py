"""Robustness metrics: accuracies, perturbation stability, empirical Lipschitz, transfer."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, project_linf, random_start, sign
from .data import Dataset
from .nn import Network, forward_network, loss_tape


class DegenerateAttackError(RuntimeError):
    pass


def _xy(net: Network, data: Dataset):
    if len(data) == 0:
        raise ValueError("dataset is empty")
    return data.images.astype(net.dtype), data.labels


def predict(net: Network, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(x), batch_size):
        logits, _ = forward_network(net, x[i : i + batch_size], "eval")
        out.append(np.argmax(logits.data, axis=1))
    return np.concatenate(out)


def accuracy(net: Network, data: Dataset, batch_size: int = 256) -> float:
    """Fraction of samples whose arg-max logit (lowest index on ties) is the label."""
    x, y = _xy(net, data)
    return float(np.mean(predict(net, x, batch_size) == y))


def craft(
    net: Network,
    x: np.ndarray,
    labels: np.ndarray,
    cfg: AttackConfig,
    rng: np.random.Generator | None = None,
    batch_size: int = 256,
) -> np.ndarray:
    """Evaluation-time PGD that keeps, per sample, the first iterate that fools the model.

    The clean input counts as iterate zero, so a sample that is already
    misclassified keeps x' = x. Samples never fooled end at the last iterate.
    """
    out = np.empty_like(x)
    for i in range(0, len(x), batch_size):
        out[i : i + batch_size] = _craft_batch(net, x[i : i + batch_size], labels[i : i + batch_size], cfg, rng)
    return out


def _craft_batch(net, x, y, cfg, rng):
    y = np.asarray(y, dtype=np.int64)
    done = np.zeros(len(x), dtype=bool)
    best = x.copy()

    def mark(xa, logits):
        fooled = (np.argmax(logits, axis=1) != y) & ~done
        best[fooled] = xa[fooled]
        done[fooled] = True

    clean_logits, _ = forward_network(net, x, "eval")
    mark(x, clean_logits.data)
    if cfg.epsilon == 0 or done.all():
        return best
    xa = random_start(x, cfg.epsilon, rng or np.random.default_rng(0), cfg.input_bounds) if cfg.random_start else x.copy()
    for _ in range(int(cfg.steps)):
        logits, _, tape = loss_tape(net, xa, y, loss=cfg.loss, mode="eval", param_grads=False)
        mark(xa, logits.data)
        g = T.gradients(tape, "input")
        xa = project_linf(xa + cfg.step_size * sign(g), x, cfg.epsilon, cfg.input_bounds).astype(x.dtype, copy=False)
    logits, _ = forward_network(net, xa, "eval")
    mark(xa, logits.data)
    best[~done] = xa[~done]
    return best


def robust_accuracy(net: Network, data: Dataset, attack: AttackConfig, rng=None) -> float:
    x, y = _xy(net, data)
    xa = craft(net, x, y, attack, rng)
    return float(np.mean(predict(net, xa) == y))


def perturbation_stability(net: Network, data: Dataset, attack: AttackConfig, rng=None) -> float:
    """Fraction of samples whose prediction the attack cannot change.

    The attack targets the model's own clean prediction, not the label.
    """
    x, _ = _xy(net, data)
    pred = predict(net, x)
    xa = craft(net, x, pred, attack, rng)
    return float(np.mean(predict(net, xa) == pred))


def transfer_eval(surrogate: Network, target: Network, data: Dataset, attack: AttackConfig, rng=None) -> float:
    """Target accuracy on examples crafted against the surrogate."""
    if surrogate.input_shape != target.input_shape or surrogate.num_classes != target.num_classes:
        raise T.ShapeError(
            f"surrogate {surrogate.input_shape}/{surrogate.num_classes} vs target {target.input_shape}/{target.num_classes}"
        )
    x, y = _xy(surrogate, data)
    xa = craft(surrogate, x, y, attack, rng)
    return float(np.mean(predict(target, xa.astype(target.dtype)) == y))


# ---------------------------------------------------------------------------
# empirical Lipschitz
# ---------------------------------------------------------------------------


def _features(net: Network, x: np.ndarray, scope, record: bool):
    upto = None if scope == "network" else int(scope)
    return forward_network(net, x, "eval", record=record, upto_block=upto, param_grads=False)


def lipschitz_ratios(
    net: Network,
    x: np.ndarray,
    attack: AttackConfig,
    scope="network",
    rng: np.random.Generator | None = None,
    x0: np.ndarray | None = None,
) -> np.ndarray:
    """Per-sample max over visited iterates of ||f(x) - f(x')||_1 / ||x - x'||_inf.

    x' comes from signed ascent on ||f(x) - f(x')||_1 inside the epsilon-box.
    Because that objective has zero gradient at x' = x, the ascent starts
    from a uniform random point of the box unless ``x0`` is supplied.
    Samples whose every iterate equals x get NaN.
    """
    if scope != "network":
        nb = len(net.blocks())
        if not 0 <= int(scope) < nb:
            raise IndexError(f"block index {scope} out of range (network has {nb} blocks)")
    n = len(x)
    ref, _ = _features(net, x, scope, record=False)
    ref = ref.data.reshape(n, -1)
    best = np.full(n, np.nan)
    if attack.epsilon == 0:
        return best
    if x0 is None:
        x0 = random_start(x, attack.epsilon, rng or np.random.default_rng(0), attack.input_bounds)
    xa = x0.astype(x.dtype, copy=False)

    def update(xa, feats):
        num = np.abs(feats.reshape(n, -1) - ref).sum(axis=1)
        den = np.abs((xa - x).reshape(n, -1)).max(axis=1)
        ok = den > 0
        r = np.where(ok, num / np.where(ok, den, 1.0), np.nan)
        better = ok & ~(r <= best)  # NaN-aware: replaces NaN best
        best[better] = r[better]

    for _ in range(int(attack.steps)):
        feats, tape = _features(net, xa, scope, record=True)
        update(xa, feats.data)
        obj = T.l1_distance(feats, ref.reshape(feats.shape), tape)
        g = T.gradients(tape, "input", root=obj)
        xa = project_linf(xa + attack.step_size * sign(g), x, attack.epsilon, attack.input_bounds).astype(x.dtype, copy=False)
    feats, _ = _features(net, xa, scope, record=False)
    update(xa, feats.data)
    return best


def empirical_lipschitz(
    net: Network,
    data: Dataset,
    attack: AttackConfig,
    scope="network",
    rng: np.random.Generator | None = None,
    normalize: bool = False,
    batch_size: int = 256,
) -> float:
    """Mean over samples of the attack-estimated L1/L-inf output-change ratio.

    ``scope`` is ``"network"`` (logits) or a residual block index (0-based,
    post-add output). With ``normalize`` the value is divided by the
    dimension of the measured representation.
    """
    x, _ = _xy(net, data)
    if rng is None:
        rng = np.random.default_rng(0)
    ratios = np.concatenate(
        [lipschitz_ratios(net, x[i : i + batch_size], attack, scope, rng) for i in range(0, len(x), batch_size)]
    )
    valid = ratios[~np.isnan(ratios)]
    if valid.size == 0:
        raise DegenerateAttackError("degenerate attack: no sample moved away from its clean input")
    value = math.fsum(valid.tolist()) / valid.size
    if normalize:
        feats, _ = _features(net, x[:1], scope, record=False)
        value /= feats.data.size
    return float(value)


# ---------------------------------------------------------------------------
# combined report
# ---------------------------------------------------------------------------


@dataclass
class SampleOutcomes:
    """Per-sample results of one stored attack batch."""

    labels: np.ndarray
    clean_pred: np.ndarray
    adv_pred: np.ndarray

    @property
    def correct(self) -> np.ndarray:
        return self.clean_pred == self.labels

    @property
    def robust(self) -> np.ndarray:
        return self.adv_pred == self.labels

    @property
    def stable(self) -> np.ndarray:
        return self.adv_pred == self.clean_pred


@dataclass
class EvalReport:
    clean_acc: float
    robust_acc: dict[str, float]
    stability: float
    empirical_lipschitz: dict[str, float]
    sample_count: int
    outcomes: dict[str, SampleOutcomes] = field(default_factory=dict, repr=False)

    def check_decomposition(self) -> bool:
        """robust == correct & stable per sample, for every stored attack batch."""
        ok = True
        for name, o in self.outcomes.items():
            ok &= bool(np.array_equal(o.robust, o.correct & o.stable))
            ok &= self.robust_acc[name] <= self.clean_acc
        return ok

    def to_dict(self) -> dict:
        return {
            "clean_acc": self.clean_acc,
            "robust_acc": dict(self.robust_acc),
            "stability": self.stability,
            "empirical_lipschitz": dict(self.empirical_lipschitz),
            "sample_count": self.sample_count,
        }

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval_report.json").write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        names = sorted(self.robust_acc)
        with open(out / "eval_report.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["clean_acc", *(f"robust_{n}" for n in names), "stability", "emp_lip_network", "sample_count"])
            w.writerow([self.clean_acc, *(self.robust_acc[n] for n in names), self.stability,
                        self.empirical_lipschitz.get("network", ""), self.sample_count])
        blocks = [(k, v) for k, v in self.empirical_lipschitz.items() if k != "network"]
        if blocks:
            with open(out / "block_lipschitz.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["block_index", "value"])
                for k, v in sorted(blocks, key=lambda kv: int(kv[0])):
                    w.writerow([k, v])
                if "network" in self.empirical_lipschitz:
                    w.writerow(["network", self.empirical_lipschitz["network"]])


def evaluate(
    net: Network,
    data: Dataset,
    attacks: dict[str, AttackConfig] | None = None,
    lipschitz_scopes=("network",),
    lipschitz_attack: AttackConfig | None = None,
    seed: int = 0,
) -> EvalReport:
    """Clean accuracy, robust accuracy per attack, stability and empirical Lipschitz.

    Stability uses the first attack with the model's own predictions as labels.
    """
    if attacks is None:
        attacks = {"pgd20": AttackConfig.eval_preset()}
    x, y = _xy(net, data)
    clean_pred = predict(net, x)
    clean = float(np.mean(clean_pred == y))
    robust, outcomes = {}, {}
    for name, cfg in attacks.items():
        xa = craft(net, x, y, cfg, np.random.default_rng(seed))
        o = SampleOutcomes(y, clean_pred, predict(net, xa))
        outcomes[name] = o
        robust[name] = float(np.mean(o.robust))
    first = next(iter(attacks.values()))
    xs = craft(net, x, clean_pred, first, np.random.default_rng(seed))
    stability = float(np.mean(predict(net, xs) == clean_pred))
    lip_cfg = lipschitz_attack or first
    lips = {}
    for scope in lipschitz_scopes:
        lips[str(scope)] = empirical_lipschitz(net, data, lip_cfg, scope, np.random.default_rng(seed))
    return EvalReport(clean, robust, stability, lips, len(data), outcomes)
