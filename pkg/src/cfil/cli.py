"""Command-line entry point: ``cfil {gen-data,train,eval,gradcheck}``.

Exit codes: 0 ok, 1 check failure, 2 usage, 3 I/O, 4 incompatibility.

Option values resolve as flag > config file (``--config``, ``key=value``
lines) > built-in default. The seed additionally honours ``CFIL_SEED``
between the flag and the file.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import metrics, selfcheck
from .data import NUM_FOLDS, SyntheticFamilyModel, build_dataset, load_manifest, save_manifest
from .errors import ConfigurationError, IncompatibleError, InputError
from .network import ModelConfig, parse_scale
from .rng import check_seed
from .serialization import FormatError
from .trainer import TrainConfig, load_checkpoint, log_text, predict, save_checkpoint, train
from .weighted import SIGN_MODES, DistanceKernel

log = logging.getLogger("cfil")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO, EXIT_INCOMPATIBLE = 0, 1, 2, 3, 4
DEFAULT_SEED = 42
SEED_ENV = "CFIL_SEED"
CHECKPOINT_NAME = "checkpoint.cfck"
TRAIN_LOG_NAME = "train_log.csv"


class UsageError(Exception):
    """Bad flags or config values; exit code 2."""


def _fold(value: str) -> int:
    k = int(value)
    if not 1 <= k <= NUM_FOLDS:
        raise ValueError(f"fold must be in 1..{NUM_FOLDS}, got {k}")
    return k


def _scale(value: str) -> str:
    parse_scale(value)
    return value


def _sign_mode(value: str) -> str:
    return DistanceKernel(value).sign_mode


def _positive_int(value: str) -> int:
    n = int(value)
    if n < 1:
        raise ValueError(f"expected a positive integer, got {n}")
    return n


def _seed(value: str) -> int:
    return check_seed(int(value))


# option name -> (converter, default); None defaults mark required options
OPTIONS: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "gen-data": {
        "families": (int, 200),
        "rho": (float, 0.9),
        "sigma": (float, SyntheticFamilyModel.sigma),
        "out": (str, None),
    },
    "train": {
        "data": (str, None),
        "fold": (_fold, None),
        "epochs": (int, TrainConfig.epochs),
        "batch": (_positive_int, TrainConfig.batch_size),
        "width_scale": (_scale, ModelConfig.width_scale),
        "sign_mode": (_sign_mode, ModelConfig.sign_mode),
        "out": (str, None),
    },
    "eval": {
        "data": (str, None),
        "fold": (_fold, None),
        "checkpoint": (str, None),
        "out": (str, None),
    },
    "gradcheck": {
        "width_scale": (_scale, "1/8"),
        "trials": (_positive_int, 3),
        "tolerance": (float, 1e-4),
    },
}

HELP = {
    "families": "number of synthetic families; one positive and one negative pair each (min 10)",
    "rho": "parent-child latent correlation in [0, 1]",
    "sigma": "per-pixel noise level before the sigmoid",
    "out": "output directory (created if missing)",
    "data": "dataset directory or manifest.csv written by gen-data",
    "fold": f"held-out fold, 1..{NUM_FOLDS}",
    "epochs": "number of training epochs",
    "batch": "mini-batch size",
    "width_scale": "channel width multiplier, e.g. 1, 1/2, 1/4, 0.125",
    "sign_mode": f"distance-kernel sign convention: {', '.join(SIGN_MODES)}",
    "checkpoint": "checkpoint file written by train",
    "trials": "random inputs per op in the op-level suites",
    "tolerance": "largest accepted relative error",
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfil", description="Cross-pair feature interaction kinship verification.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    summaries = {
        "gen-data": "generate a synthetic kinship dataset (manifest + CFT1 images)",
        "train": "train on all folds except --fold; writes checkpoint and log",
        "eval": "evaluate a checkpoint on the held-out fold; writes report.csv, roc.csv, roc.svg",
        "gradcheck": "finite-difference gradient self-check of every differentiable op",
    }
    for name, options in OPTIONS.items():
        p = sub.add_parser(name, help=summaries[name], description=summaries[name])
        for key, (_, default) in options.items():
            flag = "--" + key.replace("_", "-")
            shown = "required" if default is None else f"default {default}"
            # parsed later so that config-file values can fill gaps
            p.add_argument(flag, dest=key, default=None, metavar=key.upper(), help=f"{HELP[key]} ({shown})")
        if name == "eval":
            p.add_argument("--on-train", action="store_true", help="evaluate on the training folds instead")
        p.add_argument("--seed", default=None, help=f"run seed (default: ${SEED_ENV}, then config file, then {DEFAULT_SEED})")
        p.add_argument("--config", default=None, metavar="FILE", help="key=value file supplying option defaults")
    return parser


def read_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config file {path}: {exc.strerror or exc}") from None
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.lstrip("-").replace("-", "_")] = value
    return values


def resolve(command: str, args: argparse.Namespace, env: dict[str, str]) -> dict[str, Any]:
    """Effective settings for ``command`` after applying the precedence rules."""
    options = OPTIONS[command]
    file_values = read_config_file(args.config) if args.config else {}
    unknown = sorted(set(file_values) - set(options) - {"seed"})
    if unknown:
        raise UsageError(f"config file has keys not understood by {command}: {', '.join(unknown)}")
    resolved: dict[str, Any] = {}
    for key, (convert, default) in options.items():
        raw = getattr(args, key)
        if raw is None:
            raw = file_values.get(key)
        if raw is None:
            if default is None:
                raise UsageError(f"--{key.replace('_', '-')} is required")
            resolved[key] = default
            continue
        try:
            resolved[key] = convert(raw)
        except (ValueError, TypeError, ArithmeticError) as exc:
            raise UsageError(f"--{key.replace('_', '-')}: {exc}") from None
    seed_raw = args.seed if args.seed is not None else env.get(SEED_ENV, file_values.get("seed"))
    try:
        resolved["seed"] = DEFAULT_SEED if seed_raw is None else _seed(seed_raw)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"seed: {exc}") from None
    return resolved


def _echo(command: str, settings: dict[str, Any]) -> None:
    log.info("command %s", command)
    for key in sorted(settings):
        log.info("config %s=%s", key, settings[key])


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: dict[str, Any], args) -> int:
    model = SyntheticFamilyModel(family_count=cfg["families"], rho=cfg["rho"], sigma=cfg["sigma"])
    model.validate()
    dataset = build_dataset(model, cfg["seed"])
    path = save_manifest(dataset, cfg["out"])
    n_pos = sum(p.label for p in dataset.pairs)
    print(f"wrote {path} ({n_pos} positive, {len(dataset) - n_pos} negative pairs)")
    return EXIT_OK


def cmd_train(cfg: dict[str, Any], args) -> int:
    dataset = load_manifest(cfg["data"])
    model_config = ModelConfig(width_scale=cfg["width_scale"], sign_mode=cfg["sign_mode"])
    _check_image_size(dataset, model_config)
    config = TrainConfig(batch_size=cfg["batch"], epochs=cfg["epochs"], seed=cfg["seed"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    state = train(dataset, cfg["fold"], config, model_config)
    save_checkpoint(state, out / CHECKPOINT_NAME)
    (out / TRAIN_LOG_NAME).write_text(log_text(state.history), encoding="utf-8")
    last = state.history[-1] if state.history else None
    summary = f"final loss {last.mean_loss:.6f} train acc {last.train_acc:.4f}" if last else "no epochs run"
    print(f"wrote {out / CHECKPOINT_NAME} ({summary})")
    return EXIT_OK


def _check_image_size(dataset, model_config: ModelConfig) -> None:
    shape = dataset.pairs[0].parent_image.shape if dataset.pairs else None
    expected = (3, model_config.image_size, model_config.image_size)
    if shape is not None and tuple(shape) != expected:
        raise IncompatibleError(f"images are {tuple(shape)} but the model expects {expected}")


def cmd_eval(cfg: dict[str, Any], args) -> int:
    path = Path(cfg["checkpoint"])
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    state = load_checkpoint(path)
    if state.fold != cfg["fold"]:
        raise IncompatibleError(f"checkpoint was trained with fold {state.fold} held out, not fold {cfg['fold']}")
    dataset = load_manifest(cfg["data"])
    _check_image_size(dataset, state.model.config)
    train_pairs, test_pairs = dataset.select_split(cfg["fold"])
    pairs = train_pairs if args.on_train else test_pairs
    if not pairs:
        raise ConfigurationError("evaluation split is empty")
    scores = predict(state.model, pairs)
    report = metrics.evaluate(
        scores, np.array([p.label for p in pairs]), [p.relation for p in pairs], fold=cfg["fold"]
    )
    metrics.export(report, cfg["out"])

    def show(v):
        return "undefined" if v is None else f"{v:.4f}"

    split = "train" if args.on_train else "test"
    print(f"fold {cfg['fold']} ({split}, {len(pairs)} pairs): "
          f"MVA {show(report.mva)} WA {show(report.wa)} AUC {show(report.auc)} ACC {show(report.acc)}")
    return EXIT_OK


def cmd_gradcheck(cfg: dict[str, Any], args) -> int:
    results = selfcheck.run_all(cfg["width_scale"], cfg["trials"], cfg["seed"])
    tol = cfg["tolerance"]
    failed = False
    for suite, checks in results.items():
        name, worst = max(checks.items(), key=lambda kv: kv[1])
        status = "ok" if worst < tol else "FAIL"
        failed |= worst >= tol
        print(f"{suite}: max relative error {worst:.3e} (worst: {name}) {status}")
    if failed:
        bad = [(f"{s}/{k}", v) for s, c in results.items() for k, v in c.items() if v >= tol]
        name, worst = max(bad, key=lambda kv: kv[1])
        print(f"gradcheck failed: {len(bad)} check(s) at or above tolerance {tol:g}; worst op {name} ({worst:.3e})")
        return EXIT_CHECK
    print(f"gradcheck passed (tolerance {tol:g})")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv: Sequence[str] | None = None, env: dict[str, str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: --help exits 0, bad flags exit 2
        return int(exc.code or 0)
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s", stream=sys.stderr)
    env = dict(os.environ) if env is None else env
    try:
        cfg = resolve(args.command, args, env)
        _echo(args.command, cfg)
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigurationError, InputError) as exc:
        print(f"cfil {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IncompatibleError as exc:
        print(f"cfil {args.command}: incompatible: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (OSError, FormatError) as exc:
        print(f"cfil {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
