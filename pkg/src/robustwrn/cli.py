"""Command-line entry point.

    robustwrn <verb> [--config FILE] [--set key.path=value ...] [--seed N] [--out DIR]
                     [--dry-run] [--workers N] [verb flags]

Verbs: count, train, attack, eval, bounds, mc-check, explore, report.
Exit codes: 0 success, 1 validation error, 2 runtime failure. Errors are
printed to stderr as one line: ``error: <kind>: <message>``.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import explorer as X
from .arch import ArchSpec, ConfigError, count_flops, count_params, format_millions, parse_config
from .attacks import AttackConfig
from .training import TrainConfig

log = logging.getLogger("robustwrn")

OUTPUT_ENV = "ROBUSTWRN_OUTPUT_DIR"
VERBS = ("count", "train", "attack", "eval", "bounds", "mc-check", "explore", "report")


class ValidationError(Exception):
    pass


def default_config() -> dict:
    spec, train, data = X.toy_defaults()
    return {
        "arch": spec.to_dict(),
        "train": train.to_dict(),
        "data": X.asdict(data),
        "attack": AttackConfig.eval_preset().to_dict(),
        "eval": {"lipschitz_scopes": ["network"], "batch_size": 256},
        "bounds": {"method": "spectral", "exact_limit": 1024},
        "explore": {
            "mode": "stage",
            "axis": "width",
            "stage": 3,
            "values": ["1/2", 1],
            "gammas": [0.5, 1, 2],
            "seeds": [0],
            "k": 5,
            "metric": "robust_acc",
            "cross_depths": [],
            "cross_widths": [],
            "measure_lipschitz": True,
            "dtype": "float32",
        },
    }


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------


def _merge(base: dict, upd: dict, where: str = "") -> dict:
    for k, v in upd.items():
        path = f"{where}.{k}" if where else k
        if k not in base:
            raise ValidationError(f"unknown config key {path!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, path)
        else:
            base[k] = v
    return base


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, item: str) -> None:
    """Apply one ``dotted.key=value`` override in place; the key must exist."""
    if "=" not in item:
        raise ValidationError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for i, p in enumerate(parts[:-1]):
        if not isinstance(node, dict) or p not in node:
            raise ValidationError(f"unknown config key {'.'.join(parts[: i + 1])!r}")
        if node[p] is None:
            node[p] = {}
        node = node[p]
    if not isinstance(node, dict) or (parts[-1] not in node and node):
        raise ValidationError(f"unknown config key {key!r}")
    node[parts[-1]] = _parse_value(raw)


def resolve_config(args) -> dict:
    cfg = default_config()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ValidationError(f"config file {str(path)!r} not found")
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file {str(path)!r} is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ValidationError("config file must hold a JSON object")
        _merge(cfg, user)
    for item in args.set or []:
        apply_override(cfg, item)
    arch = cfg["arch"]
    for flag, key in (("depths", "depths"), ("widths", "widths"), ("gamma", "gamma"), ("classes", "num_classes")):
        v = getattr(args, flag, None)
        if v is not None:
            arch[key] = v
    if getattr(args, "input_shape", None):
        arch["input_shape"] = [int(t) for t in args.input_shape.split("x")]
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    return cfg


def build_objects(cfg: dict) -> dict:
    """Validate every section by constructing its typed object."""
    try:
        spec = ArchSpec.from_dict(cfg["arch"])
        train = TrainConfig.from_dict(cfg["train"])
        data = X.DataConfig.from_dict(cfg["data"])
        attack = AttackConfig.from_dict(cfg["attack"])
    except (ConfigError, ValueError, TypeError) as exc:
        raise ValidationError(str(exc)) from None
    if cfg["bounds"]["method"] not in ("spectral", "theorem-sigma"):
        raise ValidationError(f"bounds.method must be spectral|theorem-sigma, got {cfg['bounds']['method']!r}")
    return {"spec": spec, "train": train, "data": data, "attack": attack}


def output_dir(args) -> Path:
    out = args.out or os.environ.get(OUTPUT_ENV) or "robustwrn_out"
    return Path(out)


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, default=str) + "\n")


def _load_net(args, objs):
    from .arch import build_network
    from .checkpoint import load_checkpoint

    if args.checkpoint:
        if not Path(args.checkpoint, "manifest.json").exists():
            raise ValidationError(f"no checkpoint at {args.checkpoint!r}")
        net, _ = load_checkpoint(args.checkpoint)
        return net
    return build_network(objs["spec"], objs["train"].seed, np.float64)


def _test_split(objs, net):
    _, _, test = objs["data"].load(objs["train"].seed)
    if test.input_shape != tuple(net.input_shape) or test.num_classes != net.num_classes:
        raise ValidationError(
            f"data shape {test.input_shape}/{test.num_classes} classes does not match network "
            f"{tuple(net.input_shape)}/{net.num_classes} classes"
        )
    return test


def cmd_count(args, cfg, objs, out: Path) -> None:
    spec = objs["spec"]
    p, f = count_params(spec), count_flops(spec)
    print(f"spec={spec.notation} gamma={spec.to_dict()['gamma']}")
    print(f"params={p}")
    print(format_millions(p))
    print(f"flops={f}")
    _write_json(out / "count.json", {"arch": spec.to_dict(), "params": p, "flops": f})


def cmd_train(args, cfg, objs, out: Path) -> None:
    from .arch import build_network
    from .checkpoint import load_checkpoint
    from .training import sat_train

    spec, train = objs["spec"], objs["train"]
    tr, held, _ = objs["data"].load(train.seed)
    if args.resume:
        net, state = load_checkpoint(args.resume)
    else:
        net, state = build_network(spec, train.seed, np.dtype(cfg["explore"]["dtype"])), None
    _write_json(out / "config.json", cfg)
    _, hist = sat_train(net, tr, train, held, out, state)
    for h in hist:
        print(f"epoch {h.epoch:3d} lr {h.lr:.4g} loss {h.train_loss:.4f} clean {h.clean_acc:.4f} robust {h.robust_acc:.4f}")
    print(f"checkpoint: {out / 'last'}")


def cmd_attack(args, cfg, objs, out: Path) -> None:
    from .metrics import SampleOutcomes, craft, predict

    net = _load_net(args, objs)
    test = _test_split(objs, net)
    x = test.images.astype(net.dtype)
    clean = predict(net, x)
    xa = craft(net, x, test.labels, objs["attack"], np.random.default_rng(objs["train"].seed))
    o = SampleOutcomes(test.labels, clean, predict(net, xa))
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "adversarial.npy", xa)
    with open(out / "attack_outcomes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "label", "clean_pred", "adv_pred"])
        for i, (a, b, c) in enumerate(zip(o.labels, o.clean_pred, o.adv_pred)):
            w.writerow([i, int(a), int(b), int(c)])
    acc = float(np.mean(o.robust))
    _write_json(out / "attack_report.json", {"attack": objs["attack"].to_dict(), "robust_acc": acc, "n": len(test)})
    print(f"robust_acc={acc:.4f} n={len(test)}")


def cmd_eval(args, cfg, objs, out: Path) -> None:
    from .metrics import evaluate

    net = _load_net(args, objs)
    test = _test_split(objs, net)
    scopes = [s if s == "network" else int(s) for s in cfg["eval"]["lipschitz_scopes"]]
    rep = evaluate(net, test, {"pgd": objs["attack"]}, scopes, seed=objs["train"].seed)
    rep.write(out)
    print(f"clean_acc={rep.clean_acc:.4f} robust_acc={rep.robust_acc['pgd']:.4f} stability={rep.stability:.4f}")
    for k, v in rep.empirical_lipschitz.items():
        print(f"empirical_lipschitz[{k}]={v:.6g}")


def cmd_bounds(args, cfg, objs, out: Path) -> None:
    from .bounds import network_bound

    net = _load_net(args, objs)
    rep = network_bound(net, cfg["bounds"]["method"], int(cfg["bounds"]["exact_limit"]))
    out.mkdir(parents=True, exist_ok=True)
    rep.write_csv(out / "bounds.csv")
    print(f"method={rep.method}")
    for i, lb in enumerate(rep.per_layer):
        print(f"{i:3d} {lb.name:<24} {lb.kind:<6} m={lb.m:<3} sigma_hat={lb.sigma_hat:.4g} term={lb.bound_term:.4g} spectral={lb.spectral_norm:.4g}")
    print(f"product_bound={rep.product_bound:.6g}")
    print(f"residual_form_bound={rep.residual_form_bound:.6g}")
    print(f"l1_linf_bound={rep.l1_linf_bound:.6g}")


def cmd_mc(args, cfg, objs, out: Path) -> None:
    from .bounds import mc_singular_values

    if args.N is None or args.n is None:
        raise ValidationError("mc-check needs --N and --n")
    if not args.N >= args.n >= 1 or args.trials < 1:
        raise ValidationError(f"need N >= n >= 1 and trials >= 1, got N={args.N} n={args.n} trials={args.trials}")
    seed = args.seed if args.seed is not None else 0
    st = mc_singular_values(args.N, args.n, args.trials, seed)
    lo, hi = st.bracket
    ok = st.check(3.0)
    print(f"mean_lambda_max={st.mean_lambda_max:.6f} (se {st.se_lambda_max:.2g})")
    print(f"mean_lambda_min={st.mean_lambda_min:.6f} (se {st.se_lambda_min:.2g})")
    print(f"bracket=[{lo:.6f}, {hi:.6f}]")
    print("PASS" if ok else "FAIL")
    _write_json(out / "mc_check.json", {**X.asdict(st), "bracket": [lo, hi], "pass": ok})


def _plan(cfg, objs) -> tuple[X.SweepPlan, list[ArchSpec]]:
    e = cfg["explore"]
    mode = e["mode"]
    base = objs["spec"]
    try:
        if mode == "grid":
            plan = X.SweepPlan(base, "depth", "all", e["values"], objs["train"], objs["attack"], e["seeds"], objs["data"],
                               e["dtype"], e["measure_lipschitz"])
            specs = X.grid_specs(base, e["values"])
        elif mode == "stage":
            plan = X.SweepPlan(base, e["axis"], int(e["stage"]), e["values"], objs["train"], objs["attack"], e["seeds"],
                               objs["data"], e["dtype"], e["measure_lipschitz"])
            specs = X.stage_specs(base, e["axis"], int(e["stage"]), e["values"])
        elif mode == "scale":
            plan = X.SweepPlan(base, "gamma", 1, e["gammas"], objs["train"], objs["attack"], e["seeds"], objs["data"],
                               e["dtype"], e["measure_lipschitz"])
            specs = X.scale_specs(base, e["gammas"])
        elif mode == "cross":
            c = base.num_classes, base.input_shape
            ds = [parse_config(d, base.width_notation, base.gamma, *c) for d in e["cross_depths"]]
            ws = [parse_config(base.depth_notation, w, base.gamma, *c) for w in e["cross_widths"]]
            if not ds or not ws:
                raise ValidationError("cross mode needs explore.cross_depths and explore.cross_widths")
            plan = X.SweepPlan(base, "depth", "all", [0], objs["train"], objs["attack"], e["seeds"], objs["data"],
                               e["dtype"], e["measure_lipschitz"])
            specs = X.cross_specs(ds, ws)
        else:
            raise ValidationError(f"explore.mode must be grid|stage|scale|cross, got {mode!r}")
    except (ConfigError, ValueError) as exc:
        raise ValidationError(str(exc)) from None
    return plan, specs


def cmd_explore(args, cfg, objs, out: Path) -> None:
    plan, specs = _plan(cfg, objs)
    store = X.RecordStore(out / "records.csv", plan.base.num_classes, plan.base.input_shape)
    _write_json(out / "config.json", cfg)
    recs = X.run_specs(specs, plan, store, args.workers)
    print(X.format_table(recs, f"{len(recs)} runs"))
    e = cfg["explore"]
    print()
    print(X.format_table(X.topk(X.aggregate(recs), int(e["k"]), e["metric"]), f"Top-{e['k']} by {e['metric']}"))


def cmd_report(args, cfg, objs, out: Path) -> None:
    path = Path(args.records) if args.records else out / "records.csv"
    if not path.exists():
        raise ValidationError(f"records file {str(path)!r} not found")
    spec = objs["spec"]
    recs = X.RecordStore(path, spec.num_classes, spec.input_shape).load()
    text = X.report(recs, int(cfg["explore"]["k"]))
    print(text, end="")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(text)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["spec_notation", "gamma", "params", "clean", "robust", "stability", "emp_lip"])
        for r in X.aggregate(recs):
            w.writerow([r.spec.notation, r.spec.to_dict()["gamma"], r.param_count, r.clean_acc, r.robust_acc, r.stability,
                        r.empirical_lipschitz])


COMMANDS = {
    "count": cmd_count,
    "train": cmd_train,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "bounds": cmd_bounds,
    "mc-check": cmd_mc,
    "explore": cmd_explore,
    "report": cmd_report,
}


def dry_run(verb: str, cfg: dict, objs: dict) -> None:
    spec = objs["spec"]
    runs = 1
    if verb == "explore":
        plan, specs = _plan(cfg, objs)
        runs = len(specs) * len(plan.seeds)
        print("specs: " + ", ".join(s.notation + ("" if s.gamma == 1 else f" (gamma {s.to_dict()['gamma']})") for s in specs))
    elif verb in ("count", "mc-check", "report"):
        runs = 0
    print(f"verb={verb}")
    print(f"spec={spec.notation} gamma={spec.to_dict()['gamma']}")
    print(f"params={count_params(spec)} ({format_millions(count_params(spec))})")
    print(f"flops={count_flops(spec)}")
    print(f"runs={runs}")
    print(json.dumps(cfg, indent=2, default=str))


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="robustwrn", description="Robust wide residual networks: train, attack, bound, explore.",
                allow_abbrev=False)
    sub = p.add_subparsers(dest="verb", parser_class=_Parser)
    for verb in VERBS:
        s = sub.add_parser(verb, allow_abbrev=False)
        s.add_argument("--config", help="JSON config file")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-key override (repeatable)")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./robustwrn_out)")
        s.add_argument("--dry-run", action="store_true")
        s.add_argument("--workers", type=int, default=1)
        s.add_argument("--verbose", action="store_true")
        s.add_argument("--depths")
        s.add_argument("--widths")
        s.add_argument("--gamma")
        s.add_argument("--classes", type=int)
        s.add_argument("--input-shape", help="CxHxW, e.g. 3x32x32")
        if verb in ("attack", "eval", "bounds"):
            s.add_argument("--checkpoint", help="checkpoint directory (default: fresh network from --seed)")
        if verb == "train":
            s.add_argument("--resume", help="checkpoint directory to continue from")
        if verb == "mc-check":
            s.add_argument("--N", type=int)
            s.add_argument("--n", type=int)
            s.add_argument("--trials", type=int, default=200)
        if verb == "report":
            s.add_argument("--records", help="records CSV (default <out>/records.csv)")
    return p


def _fail(kind: str, msg) -> None:
    text = " ".join(str(msg).split())
    print(f"error: {kind}: {text}", file=sys.stderr)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = make_parser().parse_args(argv)
        if args.verb is None:
            raise ValidationError(f"a verb is required: {', '.join(VERBS)}")
        if args.workers < 1:
            raise ValidationError("--workers must be >= 1")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args)
        objs = build_objects(cfg)
        if args.dry_run:
            if args.verb == "explore":
                _plan(cfg, objs)
            dry_run(args.verb, cfg, objs)
            return 0
        COMMANDS[args.verb](args, cfg, objs, output_dir(args))
    except ValidationError as exc:
        _fail("validation", exc)
        return 1
    except (ConfigError, FileNotFoundError) as exc:
        _fail("validation", exc)
        return 1
    except Exception as exc:  # noqa: BLE001 - the exit-code contract covers every other failure
        _fail("runtime", f"{type(exc).__name__}: {exc}")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
