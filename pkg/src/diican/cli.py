"""Command-line entry point: ``diican {synth,train,eval,attention}``.

Exit codes: 0 success, 1 runtime failure (IO, diverged loss, bad data),
2 usage error (bad flags, unknown keys or ids, missing checkpoint).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import SyntheticFleetConfig, generate_synthetic_fleet, load_fleet, write_fleet
from .errors import DiicanError
from .model import ModelConfig
from .train import (FeatureCache, TrainConfig, aggregate_rows, evaluate_health, evaluate_soc,
                    export_attention, prepare_cell, run_loocv, train_health, train_soc,
                    write_loss_curve, write_report)

log = logging.getLogger("diican")

DEFAULT_SEED = 0
_TRAIN_DEFAULTS = TrainConfig()


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def _nonneg_float(text: str) -> float:
    v = float(text)
    if not np.isfinite(v) or v < 0:
        raise argparse.ArgumentTypeError(f"must be a non-negative number, got {text}")
    return v


def _unit_float(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {text}")
    return v


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text}")


# --- parser ------------------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key=value file; flags override it")
    p.add_argument("--seed", type=int, default=None,
                   help=f"RNG seed (default: $DIICAN_SEED or {DEFAULT_SEED})")
    p.add_argument("--verbose", action="store_true", help="log progress to stderr")


def _training_flags(p: argparse.ArgumentParser) -> None:
    d = _TRAIN_DEFAULTS
    p.add_argument("--beta", type=_unit_float, default=d.loss_weight,
                   help="SOH weight of the health loss (default: %(default)s)")
    p.add_argument("--epochs", type=_positive_int, default=d.epochs, help="(default: %(default)s)")
    p.add_argument("--soc-epochs", type=_positive_int, default=None,
                   help="epochs of the SOC stage (default: same as --epochs)")
    p.add_argument("--lr", type=_nonneg_float, default=d.learning_rate, help="(default: %(default)s)")
    p.add_argument("--batch", type=_positive_int, default=d.batch_size, help="(default: %(default)s)")
    p.add_argument("--dropout", type=_unit_float, default=d.dropout, help="(default: %(default)s)")
    p.add_argument("--weight-decay", type=_nonneg_float, default=d.weight_decay,
                   help="AdamW decoupled weight decay (default: %(default)s)")
    p.add_argument("--eol", type=_unit_float, default=d.eol_threshold,
                   help="end-of-life SOH threshold (default: %(default)s)")
    p.add_argument("--soc-cycle-step", type=_positive_int, default=d.soc_cycle_step,
                   help="use every n-th cycle for SOC windows (default: %(default)s)")
    p.add_argument("--hidden", type=_positive_int, default=None,
                   help="shrink the inter-cycle branch to this width (default: full model)")
    p.add_argument("--grid", type=_positive_int, default=100,
                   help="capacity-ratio grid points (default: %(default)s)")
    p.add_argument("--history", type=_positive_int, default=8,
                   help="inter-cycle history length L (default: %(default)s)")
    p.add_argument("--window", type=_positive_int, default=30,
                   help="intra-cycle window length l (default: %(default)s)")
    p.add_argument("--stride", type=_positive_int, default=10,
                   help="intra-cycle window stride (default: %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diican", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic cycling fleet",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _common(p)
    s = SyntheticFleetConfig()
    p.add_argument("--out", type=Path, required=True, help="output fleet directory")
    p.add_argument("--cells", type=_positive_int, default=s.n_cells)
    p.add_argument("--cycles", type=_positive_int, default=s.cycles_per_cell)
    p.add_argument("--fade-a", type=_nonneg_float, default=s.fade_a)
    p.add_argument("--fade-b", type=_nonneg_float, default=s.fade_b)
    p.add_argument("--noise", type=_nonneg_float, default=s.noise_sigma, help="voltage noise sigma [V]")

    p = sub.add_parser("train", help="train the health or the SOC stage")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="fleet directory")
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--stage", choices=("health", "soc"), default="health", help="(default: %(default)s)")
    p.add_argument("--health-ckpt", type=Path, default=None, help="frozen health checkpoint (soc stage)")
    p.add_argument("--no-coupling", action="store_true", help="zero the state-coupling vector (ablation)")
    p.add_argument("--test-cell", default=None, help="cell id excluded from training")
    p.add_argument("--loss-out", type=Path, default=None,
                   help="loss-curve CSV (default: <out>.loss.csv)")
    _training_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint or run leave-one-cell-out")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="fleet directory")
    p.add_argument("--ckpt", type=Path, default=None, help="checkpoint (single-cell mode)")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--loocv", action="store_true", help="train and test every split")
    mode.add_argument("--test-cell", default=None, help="evaluate one held-out cell")
    p.add_argument("--report", type=Path, required=True, help="report CSV path")
    p.add_argument("--jobs", type=_positive_int, default=1, help="parallel LOOCV splits (default: %(default)s)")
    p.add_argument("--no-soc", action="store_true", help="skip the SOC stage in --loocv")
    p.add_argument("--conventional-r2", action="store_true",
                   help="R^2 with the total sum of squares of the observations")
    _training_flags(p)

    p = sub.add_parser("attention", help="export last-step attention weights of one cell")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="fleet directory")
    p.add_argument("--ckpt", type=Path, required=True, help="health checkpoint")
    p.add_argument("--cell", required=True, help="cell id")
    p.add_argument("--out", type=Path, required=True, help="attention CSV path")
    return parser


# --- config file --------------------------------------------------------------------------------


def read_config_file(path: Path) -> dict[str, str]:
    items: dict[str, str] = {}
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for n, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value, got {raw!r}")
        k, v = (t.strip() for t in line.split("=", 1))
        items[k.replace("-", "_")] = v
    return items


def _apply_config(sub: argparse.ArgumentParser, args: argparse.Namespace, argv: list[str]) -> None:
    """Fill options not given on the command line from ``--config``."""
    items = read_config_file(args.config)
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    given = {a.dest for a in sub._actions for opt in a.option_strings
             if any(t == opt or t.startswith(opt + "=") for t in argv)}
    for key, text in items.items():
        if key not in actions:
            raise UsageError(f"unknown config key: {key}")
        if key in given:
            continue
        action = actions[key]
        try:
            if action.nargs == 0:
                value = _bool(text)
            elif action.type is not None:
                value = action.type(text)
            else:
                value = text
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"config key {key}: {exc}") from exc
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"config key {key}: {value!r} not in {list(action.choices)}")
        setattr(args, key, value)


def resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("DIICAN_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"DIICAN_SEED must be an integer, got {env!r}") from exc
    return DEFAULT_SEED


def train_config(args) -> TrainConfig:
    return TrainConfig(learning_rate=args.lr, batch_size=args.batch, epochs=args.epochs,
                       dropout=args.dropout, loss_weight=args.beta, seed=args.seed,
                       eol_threshold=args.eol, weight_decay=args.weight_decay,
                       soc_epochs=args.soc_epochs, soc_cycle_step=args.soc_cycle_step)


def model_config(args) -> ModelConfig:
    extra = dict(history_len=args.history, window_len=args.window, window_stride=args.stride)
    if args.hidden is not None:
        return ModelConfig.scaled(args.hidden, args.grid, **extra)
    return ModelConfig(n_grid=args.grid, **extra)


def _fleet(path: Path):
    if not path.is_dir():
        raise UsageError(f"--data: no such directory: {path}")
    return load_fleet(path)


def _pick(fleet, cell_id: str, flag: str):
    for h in fleet:
        if h.cell_id == cell_id:
            return h
    raise UsageError(f"{flag}: unknown cell id {cell_id!r}")


def _existing(path: Path | None, flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    if not path.is_file():
        raise UsageError(f"{flag}: no such checkpoint: {path}")
    return path


# --- commands -------------------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = SyntheticFleetConfig(n_cells=args.cells, cycles_per_cell=args.cycles, fade_a=args.fade_a,
                               fade_b=args.fade_b, noise_sigma=args.noise, seed=args.seed)
    try:
        cfg.validate()
    except DiicanError as exc:
        raise UsageError(f"--fade-a/--fade-b/--cycles: {exc}") from exc
    write_fleet(generate_synthetic_fleet(cfg), args.out)
    log.info("wrote %d cells to %s", cfg.n_cells, args.out)
    return 0


def _loss_path(args) -> Path:
    return args.loss_out or args.out.with_suffix(".loss.csv")


def cmd_train(args) -> int:
    if args.stage == "soc":
        _existing(args.health_ckpt, "--health-ckpt")
    fleet = _fleet(args.data)
    train = fleet
    if args.test_cell is not None:
        held = _pick(fleet, args.test_cell, "--test-cell")
        train = [h for h in fleet if h is not held]
    cfg = train_config(args)
    meta = {"stage": args.stage, "seed": cfg.seed, "beta": cfg.loss_weight, "epochs": cfg.epochs,
            "lr": cfg.learning_rate, "batch": cfg.batch_size, "test_cell": args.test_cell or ""}
    if args.stage == "health":
        model, losses = train_health(train, cfg, model_config(args))
    else:
        inter = load_checkpoint(args.health_ckpt)
        model, losses = train_soc(train, inter, cfg, coupling=not args.no_coupling,
                                  cache=FeatureCache(inter.config.n_grid))
        meta.update(epochs=cfg.n_soc_epochs, coupling=int(not args.no_coupling))
    save_checkpoint(model, model.norm_stats, args.out, meta)
    write_loss_curve(losses, _loss_path(args))
    log.info("final loss %.6f, checkpoint %s", losses[-1] if losses else float("nan"), args.out)
    return 0


def _log_rows(rows) -> None:
    for r in rows:
        m = r.metrics
        log.info("%-11s %-8s mae=%.6g mape=%.6g rmse=%.6g r2=%.6g r2(other)=%.6g",
                 r.target, r.cell_id, m.mae, m.mape, m.rmse, m.r2, r.r2_alt)


def cmd_eval(args) -> int:
    if args.test_cell is not None:
        ckpt = _existing(args.ckpt, "--ckpt")
        fleet = _fleet(args.data)
        cell = _pick(fleet, args.test_cell, "--test-cell")
        model = load_checkpoint(ckpt)
        stage = model.meta.get("stage", "health")
        data = prepare_cell(cell, model.norm_stats, model.config, args.eol, windows=stage == "soc")
        rows = evaluate_health(model, data, args.conventional_r2)
        if stage == "soc":
            coupled = model.meta.get("coupling", "1") == "1"
            rows.append(evaluate_soc(model, data, coupled, args.conventional_r2,
                                     target="soc" if coupled else "soc_ablated"))
    else:
        fleet = _fleet(args.data)
        rows = run_loocv(fleet, train_config(args), model_config(args), with_soc=not args.no_soc,
                         conventional_r2=args.conventional_r2, jobs=args.jobs)
    rows = rows + aggregate_rows(rows)
    write_report(rows, args.report)
    if args.verbose:
        _log_rows(rows)
    return 0


def cmd_attention(args) -> int:
    ckpt = _existing(args.ckpt, "--ckpt")
    fleet = _fleet(args.data)
    cell = _pick(fleet, args.cell, "--cell")
    alpha = export_attention(load_checkpoint(ckpt), cell, args.out)
    log.info("wrote %d attention weights to %s", len(alpha), args.out)
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "attention": cmd_attention}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)      # exits 2 on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        if args.config is not None:
            _apply_config(sub, args, argv)
        args.seed = resolve_seed(args)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"diican {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except DiicanError as exc:
        print(f"diican {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
