"""Command-line entry point: ``python -m lorelab <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 bad flags or flag combinations.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import objectives as O
from .attacks import AttackConfig
from .harness import experiments as X
from .harness.checkpoint import load_checkpoint, save_checkpoint
from .harness.data import load_idx, synth_blobs
from .harness.evaluation import eval_clean, eval_robust, noise_curve
from .harness.records import write_csv, write_manifest
from .optimize import DUAL_METHODS, METHODS, NAIVE_REG, MetricsRecord, TrainConfig

log = logging.getLogger("lorelab")

RECORD_HEADER = [f.name for f in dataclasses.fields(MetricsRecord)]
PRESETS = ("reference", "desk")


class UsageError(Exception):
    """Flag values that parse but do not make sense together."""


def _floats(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _margin(text: str) -> O.MarginMode:
    try:
        return O.MarginMode.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _data_flag(p: argparse.ArgumentParser):
    p.add_argument("--data", default="synth", help="'synth' or 'idx:<images>,<labels>'")
    p.add_argument("--data-seed", type=int, default=0)


def _out_flag(p: argparse.ArgumentParser, default: str):
    p.add_argument("--out", type=Path, default=Path(default))


def _train_flags(p: argparse.ArgumentParser):
    p.add_argument("--method", choices=METHODS, default="lore")
    p.add_argument("--preset", choices=PRESETS, default="reference",
                   help="'reference': library default learning rates; 'desk': rates tuned for the synthetic task")
    p.add_argument("--rho", type=float, default=0.1)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--eps", type=float, default=2, help="perturbation radius in 1/255 units")
    p.add_argument("--attack-steps", type=int, default=10)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--margin", type=_margin, default=O.ADAPTIVE)
    p.add_argument("--eta-theta", type=float)
    p.add_argument("--eta-omega", type=float)
    p.add_argument("--dual", choices=("network", "scalar"), default="network")
    p.add_argument("--dual-init", type=float, help="raw output bias of the multiplier network")
    p.add_argument("--naive-lambda", type=float)
    p.add_argument("--log-every", type=int, default=10)
    _data_flag(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lorelab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fine-tune the reference encoder")
    _train_flags(p)
    _out_flag(p, "runs/train")

    p = sub.add_parser("sweep", help="one training run per rho")
    _train_flags(p)
    p.add_argument("--rho-list", type=_floats, required=True)
    _out_flag(p, "runs/sweep")

    p = sub.add_parser("eval", help="clean and robust accuracy of a checkpoint")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--eps", type=float, default=2)
    p.add_argument("--attack-steps", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    _data_flag(p)
    _out_flag(p, "runs/eval")

    p = sub.add_parser("audit-cosine", help="check the cosine-deviation bound on random triples")
    p.add_argument("--rho-list", type=_floats, default=[0.01, 0.04, 0.09, 0.25, 1.0])
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    _out_flag(p, "runs/audit")

    p = sub.add_parser("duality-check", help="grid-search weak-duality check on a linear toy")
    p.add_argument("--toy-spec", type=Path, required=True)
    _out_flag(p, "runs/duality")

    p = sub.add_parser("noise-curve", help="accuracy under Gaussian input noise")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--sigma-list", type=_floats, required=True)
    p.add_argument("--seed", type=int, default=0)
    _data_flag(p)
    _out_flag(p, "runs/noise")
    return parser


def _load_data(spec: str, seed: int):
    if spec == "synth":
        return synth_blobs(**{**X.DESK_DATA, "seed": seed})
    if spec.startswith("idx:"):
        parts = spec[4:].split(",")
        if len(parts) != 2 or not all(parts):
            raise UsageError("--data idx:<images>,<labels> needs two paths")
        return load_idx(*parts)
    raise UsageError(f"unknown --data {spec!r}")


def _lab(args) -> X.Lab:
    if args.data == "synth":
        return X.desk_lab(args.data_seed)
    return X.build_lab(_load_data(args.data, args.data_seed))


def _val_split(args):
    data = _load_data(args.data, args.data_seed)
    return data.split(X.fit_splits(len(data)), seed=1)["val"]


def _config(args) -> TrainConfig:
    if args.k < 1:
        raise UsageError("--k must be at least 1")
    if args.rho < 0 or args.eps < 0 or args.attack_steps < 0:
        raise UsageError("--rho, --eps and --attack-steps must be non-negative")
    if args.epochs < 0 or args.batch_size < 1:
        raise UsageError("--epochs must be >= 0 and --batch-size >= 1")
    if args.naive_lambda is not None and args.method != NAIVE_REG:
        raise UsageError("--naive-lambda only applies to --method naive-reg")
    if args.dual != "network" and args.method not in DUAL_METHODS:
        raise UsageError(f"--dual has no effect for --method {args.method}")
    tuned = ("eta_theta", "eta_omega", "dual_init_bias")
    base = {k: X.DESK_TRAIN[k] for k in tuned} if args.preset == "desk" else {}
    kw = dict(
        method=args.method,
        rho=args.rho,
        K=args.k,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        margin=args.margin,
        attack=dataclasses.replace(AttackConfig.from_255(args.eps), steps=args.attack_steps),
        dual=args.dual,
        log_every=args.log_every,
    )
    for flag, key in (("eta_theta", "eta_theta"), ("eta_omega", "eta_omega"), ("dual_init", "dual_init_bias"),
                      ("naive_lambda", "naive_lambda")):
        if getattr(args, flag) is not None:
            kw[key] = getattr(args, flag)
    return TrainConfig(**{**base, **kw})


def _manifest(args, **extra) -> dict:
    flags = {k: (str(v) if isinstance(v, Path | O.MarginMode) else v) for k, v in vars(args).items()}
    return {"command": args.command, "flags": flags, "seed": getattr(args, "seed", None), **extra}


def cmd_train(args) -> int:
    cfg = _config(args)
    lab = _lab(args)
    out = args.out
    result = X.run(lab, cfg)
    stamp = f"train attack: {cfg.attack.stamp()}; robust_acc: {result.final.attack}"
    write_csv(out / "metrics.csv", RECORD_HEADER, [r.as_row() for r in result.result.timeline], stamp)
    write_csv(out / "final.csv", RECORD_HEADER, [result.final.as_row()], stamp)
    save_checkpoint(out / "model.ckpt", result.result.theta, result.result.omega, lab.head, lab.theta_init)
    write_manifest(out / "manifest.json", _manifest(args, config=cfg.manifest(), lab=lab.meta,
                                                   primal_per_dual=sorted(set(result.result.primal_per_dual))))
    f = result.final
    print(f"clean_acc={f.clean_acc:.4f} robust_acc={f.robust_acc:.4f} constraint_frac={f.constraint_frac:.4f} "
          f"mean_clean_dist={f.mean_clean_dist:.5f} -> {out}")
    return 0


def cmd_sweep(args) -> int:
    rhos = args.rho_list
    if any(b <= a for a, b in zip(rhos, rhos[1:])):
        raise UsageError("--rho-list must be strictly increasing")
    cfg = _config(args)
    lab = _lab(args)
    sweep = X.sweep_rho(cfg, rhos, lab)
    stamp = f"robust_acc: {sweep.records[0].attack}"
    write_csv(args.out / "pareto.csv", ["rho", "clean_acc", "robust_acc"], sweep.pareto_rows(), stamp)
    write_csv(args.out / "final.csv", RECORD_HEADER, [r.as_row() for r in sweep.records], stamp)
    write_manifest(args.out / "manifest.json", _manifest(args, config=cfg.manifest(), lab=lab.meta))
    for row in sweep.pareto_rows():
        print(f"rho={row['rho']:g} clean_acc={row['clean_acc']:.4f} robust_acc={row['robust_acc']:.4f}")
    return 0


def cmd_eval(args) -> int:
    if args.eps < 0 or args.attack_steps < 0:
        raise UsageError("--eps and --attack-steps must be non-negative")
    ckpt = load_checkpoint(args.ckpt)
    if ckpt.head is None:
        raise RuntimeError("checkpoint has no prototype head")
    val = _val_split(args)
    attack = X.eval_attack(AttackConfig.from_255(args.eps), args.attack_steps)
    clean = eval_clean(ckpt.theta, ckpt.head, val)
    robust = eval_robust(ckpt.theta, ckpt.head, val, attack, seed=args.seed)
    write_csv(args.out / "eval.csv", ["clean_acc", "robust_acc", "attack"], [[clean, robust, attack.stamp()]],
              f"robust_acc: {attack.stamp()}")
    write_manifest(args.out / "manifest.json", _manifest(args, attack=attack.stamp()))
    print(f"clean_acc={clean:.4f} robust_acc={robust:.4f} ({attack.stamp()})")
    return 0


def cmd_audit(args) -> int:
    if args.samples < 1 or any(r < 0 for r in args.rho_list):
        raise UsageError("--samples must be positive and rho values non-negative")
    rows = X.cosine_audit(args.rho_list, args.samples, args.dim, args.seed)
    write_csv(args.out / "audit.csv", list(rows[0]), rows)
    write_manifest(args.out / "manifest.json", _manifest(args))
    for row in rows:
        print(f"rho={row['rho']:g} violations={row['violations']} max={row['max_deviation']:.4f} bound={row['bound']:.4f}")
    return 0 if all(r["violations"] == 0 for r in rows) else 1


def cmd_duality(args) -> int:
    try:
        spec = X.ToySpec.load(args.toy_spec)
    except (ValueError, OSError) as exc:
        raise UsageError(f"bad --toy-spec: {exc}")
    report = X.weak_duality_check(spec)
    rows = [[r["rho"], report["R"], r["R_rho"] if r["R_rho"] is not None else "", r["feasible_points"]]
            for r in report["rows"]]
    write_csv(args.out / "duality.csv", ["rho", "R", "R_rho", "feasible_points"], rows)
    write_manifest(args.out / "manifest.json", _manifest(args, toy_spec=dataclasses.asdict(spec), report=report))
    print(f"R={report['R']:.6g} holds={report['holds']} monotone={report['monotone']}")
    return 0 if report["holds"] and report["monotone"] else 1


def cmd_noise(args) -> int:
    if any(s < 0 for s in args.sigma_list):
        raise UsageError("sigma values must be non-negative")
    ckpt = load_checkpoint(args.ckpt)
    if ckpt.head is None:
        raise RuntimeError("checkpoint has no prototype head")
    rows = noise_curve(ckpt.theta, ckpt.head, _val_split(args), args.sigma_list, seed=args.seed)
    write_csv(args.out / "noise.csv", ["sigma", "accuracy"], rows)
    write_manifest(args.out / "manifest.json", _manifest(args))
    for sigma, acc in rows:
        print(f"sigma={sigma:g} accuracy={acc:.4f}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "audit-cosine": cmd_audit,
    "duality-check": cmd_duality,
    "noise-curve": cmd_noise,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"lorelab {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"lorelab {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
