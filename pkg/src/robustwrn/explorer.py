"""Architecture exploration: depth grids, per-stage sweeps, gamma scaling, leaderboards.

Each run trains one spec with a given seed and evaluates it. Records are
appended to a CSV store keyed by (spec, gamma, seed); runs already in the
store are skipped, so an interrupted sweep resumes where it stopped.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .arch import ArchSpec, build_network, count_flops, count_params, format_rational, parse_config, scale, to_fraction, with_stage
from .attacks import AttackConfig
from .data import Dataset, synth_dataset
from .metrics import evaluate
from .training import TrainConfig, sat_train

log = logging.getLogger(__name__)

TOY_DEPTHS = "d1-1-1"
TOY_WIDTHS = "w1-1-2"

RECORD_FIELDS = ("spec_notation", "gamma", "params", "flops", "clean", "robust", "stability", "emp_lip", "seed", "status")
METRICS = ("params", "flops", "clean_acc", "robust_acc", "stability", "empirical_lipschitz", "wall_time")


@dataclass
class RunRecord:
    spec: ArchSpec
    param_count: int
    flops: int
    clean_acc: float = float("nan")
    robust_acc: float = float("nan")
    stability: float = float("nan")
    empirical_lipschitz: float = float("nan")
    wall_time: float = 0.0
    seed: int = 0
    status: str = "ok"

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.spec.notation, format_rational(self.spec.gamma), self.seed)

    @property
    def params(self) -> int:
        return self.param_count

    def row(self) -> list:
        return [self.spec.notation, format_rational(self.spec.gamma), self.param_count, self.flops,
                repr(self.clean_acc), repr(self.robust_acc), repr(self.stability), repr(self.empirical_lipschitz),
                self.seed, self.status]

    @classmethod
    def from_row(cls, row: dict, num_classes: int, input_shape) -> "RunRecord":
        d, w = row["spec_notation"].split("/")
        spec = parse_config(d, w, row["gamma"], num_classes, input_shape)
        return cls(spec, int(row["params"]), int(row["flops"]), float(row["clean"]), float(row["robust"]),
                   float(row["stability"]), float(row["emp_lip"]), 0.0, int(row["seed"]), row["status"])


@dataclass
class DataConfig:
    """Where the training / held-out / test data come from."""

    kind: str = "synthetic"
    classes: int = 4
    per_class: int = 64
    test_per_class: int = 50
    image_size: int = 16
    noise: float = 0.15
    contrast: float = 0.15
    template_seed: int = 7
    heldout_fraction: float = 0.0
    cifar_train: list = field(default_factory=list)
    cifar_test: list = field(default_factory=list)

    def load(self, seed: int) -> tuple[Dataset, Dataset | None, Dataset]:
        if self.kind == "synthetic":
            tr = synth_dataset(self.classes, self.per_class, self.image_size, self.noise, 100 + seed,
                               contrast=self.contrast, template_seed=self.template_seed)
            te = synth_dataset(self.classes, self.test_per_class, self.image_size, self.noise, 999,
                               contrast=self.contrast, template_seed=self.template_seed, split="test")
        elif self.kind == "cifar":
            from .data import load_cifar_binary

            tr = load_cifar_binary(self.cifar_train)
            te = load_cifar_binary(self.cifar_test)
            te.split = "test"
        else:
            raise ValueError(f"unknown data kind {self.kind!r}")
        held = None
        if self.heldout_fraction > 0:
            tr, held = tr.split_off(self.heldout_fraction, seed)
        return tr, held, te

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown data keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SweepPlan:
    base: ArchSpec
    axis: str = "depth"
    stage: object = "all"
    values: list = field(default_factory=lambda: [1, 3, 5, 7, 9])
    train: TrainConfig = field(default_factory=TrainConfig)
    eval_attack: AttackConfig = field(default_factory=AttackConfig.eval_preset)
    seeds: list = field(default_factory=lambda: [0])
    data: DataConfig = field(default_factory=DataConfig)
    dtype: str = "float32"
    measure_lipschitz: bool = True

    def __post_init__(self):
        if self.axis not in ("depth", "width", "gamma"):
            raise ValueError(f"axis must be depth|width|gamma, got {self.axis!r}")
        if not list(self.values):
            raise ValueError("sweep values must be non-empty")
        if self.stage == "all" and self.axis != "depth":
            raise ValueError("stage=all is only valid for the depth grid")
        if self.stage != "all" and self.axis != "gamma" and int(self.stage) not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2, 3 or all, got {self.stage!r}")


def train_and_evaluate(spec: ArchSpec, seed: int, plan: SweepPlan, out_dir=None):
    """Train and evaluate one (spec, seed); returns (RunRecord, network, EvalReport).

    Failures (non-finite loss, invalid values) become status=failed records
    with ``None`` for the network and report.
    """
    rec = RunRecord(spec, count_params(spec), count_flops(spec), seed=seed)
    t0 = time.perf_counter()
    net = rep = None
    try:
        train, held, test = plan.data.load(seed)
        net = build_network(spec, seed, np.dtype(plan.dtype))
        cfg = replace(plan.train, seed=seed)
        sat_train(net, train, cfg, held, out_dir)
        scopes = ("network",) if plan.measure_lipschitz else ()
        rep = evaluate(net, test, {"pgd": plan.eval_attack}, scopes, seed=seed)
        rec.clean_acc = rep.clean_acc
        rec.robust_acc = rep.robust_acc["pgd"]
        rec.stability = rep.stability
        rec.empirical_lipschitz = rep.empirical_lipschitz.get("network", float("nan"))
        if not all(math.isfinite(v) for v in (rec.clean_acc, rec.robust_acc)):
            rec.status = "failed"
    except (FloatingPointError, ValueError, ArithmeticError) as exc:
        log.warning("run %s seed %d failed: %s", spec.notation, seed, exc)
        rec.status = "failed"
        net = rep = None
    rec.wall_time = time.perf_counter() - t0
    return rec, net, rep


def run_one(spec: ArchSpec, seed: int, plan: SweepPlan, out_dir=None) -> RunRecord:
    """Train and evaluate one (spec, seed). Failures become status=failed records."""
    return train_and_evaluate(spec, seed, plan, out_dir)[0]


class RecordStore:
    """Append-only CSV of RunRecords plus one JSON file per run."""

    def __init__(self, path, num_classes: int = 10, input_shape=(3, 32, 32)):
        self.path = Path(path)
        self.num_classes = num_classes
        self.input_shape = tuple(input_shape)

    def load(self) -> list[RunRecord]:
        if not self.path.exists():
            return []
        with open(self.path, newline="") as fh:
            return [RunRecord.from_row(r, self.num_classes, self.input_shape) for r in csv.DictReader(fh)]

    def keys(self) -> set:
        return {r.key for r in self.load()}

    def append(self, rec: RunRecord) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        new = not self.path.exists()
        line = ",".join(str(v) for v in rec.row()) + "\n"
        head = ",".join(RECORD_FIELDS) + "\n" if new else ""
        # One write call per record keeps appends atomic on POSIX for short lines.
        with open(self.path, "a") as fh:
            fh.write(head + line)
            fh.flush()
            os.fsync(fh.fileno())
        runs = self.path.parent / "runs"
        runs.mkdir(exist_ok=True)
        name = f"{rec.spec.depth_notation}_{rec.spec.width_notation}_g{format_rational(rec.spec.gamma)}_s{rec.seed}".replace("/", "-")
        payload = {**dict(zip(RECORD_FIELDS, rec.row())), "wall_time": rec.wall_time, "arch": rec.spec.to_dict()}
        (runs / f"{name}.json").write_text(json.dumps(payload, indent=2) + "\n")


def toy_defaults() -> tuple[ArchSpec, TrainConfig, DataConfig]:
    """Desk-scale toy family: 16x16 synthetic images, 4 classes, one block per stage."""
    spec = parse_config(TOY_DEPTHS, TOY_WIDTHS, 1, 4, (3, 16, 16))
    train = TrainConfig(epochs=15, batch_size=64, lr0=0.1, momentum=0.9, weight_decay=5e-4,
                        inner_attack=AttackConfig(8 / 255, 10, 2 / 255, True))
    return spec, train, DataConfig()


def run_specs(specs, plan: SweepPlan, store: RecordStore | None = None, workers: int = 1) -> list[RunRecord]:
    """Run every (spec, seed) pair not already in ``store``; returns records in job order."""
    return _execute(list(specs), plan, store, workers)


def _execute(specs: list[ArchSpec], plan: SweepPlan, store: RecordStore | None, workers: int = 1) -> list[RunRecord]:
    jobs = [(s, seed) for s in specs for seed in plan.seeds]
    done = {}
    if store is not None:
        for r in store.load():
            done[r.key] = r
    todo = [(s, seed) for s, seed in jobs if (s.notation, format_rational(s.gamma), seed) not in done]
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = pool.map(run_one, [s for s, _ in todo], [sd for _, sd in todo], itertools.repeat(plan))
            for rec in results:
                if store is not None:
                    store.append(rec)
                done[rec.key] = rec
    else:
        for s, seed in todo:
            rec = run_one(s, seed, plan)
            if store is not None:
                store.append(rec)
            done[rec.key] = rec
    return [done[(s.notation, format_rational(s.gamma), seed)] for s, seed in jobs]


def grid_specs(base: ArchSpec, values) -> list[ArchSpec]:
    values = list(values)
    if not values:
        raise ValueError("grid values must be non-empty")
    out = []
    for d1, d2, d3 in itertools.product(values, repeat=3):
        out.append(with_stage(with_stage(with_stage(base, 1, depth=d1), 2, depth=d2), 3, depth=d3))
    return out


def stage_specs(base: ArchSpec, axis: str, stage: int, values) -> list[ArchSpec]:
    if axis == "depth":
        return [with_stage(base, int(stage), depth=int(v)) for v in values]
    if axis == "width":
        return [with_stage(base, int(stage), width=v) for v in values]
    raise ValueError(f"stage sweeps take axis depth|width, got {axis!r}")


def grid_search(plan: SweepPlan, store: RecordStore | None = None, workers: int = 1) -> list[RunRecord]:
    """Every depth combination of ``plan.values`` over the three stages."""
    if plan.axis != "depth" or plan.stage != "all":
        raise ValueError("grid_search needs axis=depth and stage=all")
    return _execute(grid_specs(plan.base, plan.values), plan, store, workers)


def stage_sweep(plan: SweepPlan, store: RecordStore | None = None, workers: int = 1) -> list[RunRecord]:
    """Vary one stage's depth or width while the other stages keep base values."""
    if plan.axis not in ("depth", "width") or plan.stage == "all":
        raise ValueError("stage_sweep needs axis depth|width and stage 1|2|3")
    return _execute(stage_specs(plan.base, plan.axis, plan.stage, plan.values), plan, store, workers)


def scale_specs(base: ArchSpec, gammas) -> list[ArchSpec]:
    gammas = list(gammas)
    if not gammas or any(to_fraction(g) <= 0 for g in gammas):
        raise ValueError("gammas must be a non-empty list of positive values")
    return [scale(base, g) for g in gammas]


def scale_sweep(base: ArchSpec, gammas, plan: SweepPlan, store: RecordStore | None = None, workers: int = 1) -> list[RunRecord]:
    """Apply each gamma to every stage width of ``base``."""
    return _execute(scale_specs(base, gammas), replace(plan, base=base), store, workers)


def cross_specs(depth_specs, width_specs) -> list[ArchSpec]:
    """All depth x width combinations of two spec lists (depths from the first, widths from the second)."""
    out = []
    for ds in depth_specs:
        for ws in width_specs:
            stages = tuple(replace(a, width_multiplier=b.width_multiplier) for a, b in zip(ds.stages, ws.stages))
            out.append(replace(ds, stages=stages))
    return out


_ALIASES = {"params": "param_count", "robust": "robust_acc", "clean": "clean_acc", "emp_lip": "empirical_lipschitz"}


def topk(records, k: int, metric: str = "robust_acc", direction: str = "max") -> list[RunRecord]:
    """Best k successful records by ``metric``; ties go to fewer parameters."""
    if k < 1:
        raise ValueError("k must be >= 1")
    field_name = _ALIASES.get(metric, metric)
    if field_name not in RunRecord.__dataclass_fields__:
        raise KeyError(f"unknown metric {metric!r}")
    if direction not in ("max", "min"):
        raise ValueError(f"direction must be max|min, got {direction!r}")
    ok = [r for r in records if r.status == "ok"]
    sign = -1.0 if direction == "max" else 1.0
    return sorted(ok, key=lambda r: (sign * float(getattr(r, field_name)), r.param_count))[:k]


def aggregate(records) -> list[RunRecord]:
    """Median over seeds per (spec, gamma); failed runs are dropped."""
    groups: dict[tuple, list[RunRecord]] = {}
    for r in records:
        if r.status == "ok":
            groups.setdefault((r.spec.notation, format_rational(r.spec.gamma)), []).append(r)
    out = []
    for rs in groups.values():
        med = lambda name: float(np.median([getattr(r, name) for r in rs]))
        out.append(RunRecord(rs[0].spec, rs[0].param_count, rs[0].flops, med("clean_acc"), med("robust_acc"),
                             med("stability"), med("empirical_lipschitz"), med("wall_time"), -1, "ok"))
    return out


def format_table(records, title: str = "", label: str = "notation") -> str:
    """Fixed-width table: Model, Params (M), Clean, PGD, Stability, Emp. Lip."""
    lines = []
    if title:
        lines.append(title)
    lines.append(f"{'Model':<28}{'Params (M)':>12}{'Clean':>9}{'PGD':>9}{'Stab.':>9}{'Emp.Lip':>11}")
    for r in records:
        name = {"notation": r.spec.notation, "depth": r.spec.depth_notation, "width": r.spec.width_notation,
                "gamma": f"gamma={format_rational(r.spec.gamma)}"}[label]
        lines.append(f"{name:<28}{r.param_count / 1e6:>12.2f}{100 * r.clean_acc:>9.2f}{100 * r.robust_acc:>9.2f}"
                     f"{100 * r.stability:>9.2f}{r.empirical_lipschitz:>11.3f}")
    return "\n".join(lines)


def report(records, k: int = 5) -> str:
    """Top-k leaderboard plus per-depth, per-width and per-gamma tables (seed medians)."""
    agg = aggregate(records)
    parts = [format_table(topk(agg, k, "robust_acc", "max"), f"Top-{k} models by PGD robust accuracy")]
    by_gamma = {format_rational(r.spec.gamma) for r in agg}
    if len(by_gamma) > 1:
        rows = sorted(agg, key=lambda r: (r.spec.notation, float(r.spec.gamma)))
        parts.append(format_table(rows, "Scaling ratios", "gamma"))
    rows = sorted(agg, key=lambda r: (r.spec.depths, r.spec.widths, float(r.spec.gamma)))
    parts.append(format_table(rows, "All configurations"))
    return "\n\n".join(parts) + "\n"
