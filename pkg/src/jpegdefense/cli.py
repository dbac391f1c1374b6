"""Command-line pipeline: generate, train, compress, attack, sweep, vaccinate, ensemble, report.

Option values resolve in this order (highest first): command-line flags,
the ``--config`` key=value file, the ``CARM_SEED`` environment variable (seed
only), built-in defaults.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from pathlib import Path

from . import codec
from .attacks import AttackConfig, attack_dataset, calibrate_epsilon
from .data_io import (
    PHI,
    Dataset,
    generate_synthetic,
    load_dataset,
    load_model,
    read_ppm,
    read_sweep_csv,
    save_dataset,
    save_model,
    write_ppm,
    write_sweep_csv,
)
from .defense import QualityGrid, VaccinatedSuite, compress_images, evaluate, table_summary, vaccinate
from .nn import TrainConfig, build_network, train

log = logging.getLogger("jpegdefense")

DEFAULTS = {
    "seed": 0,
    "threads": os.cpu_count() or 1,
    "arch": "toy",
    "epochs": 50,
    "batch_size": 64,
    "dropout": 0.5,
    "lr": 1e-3,
    "classes": 4,
    "per_class": 100,
    "dims": "32x32",
    "noise": 12.0,
    "method": "fgsm",
    "eps": "auto",
    "target_success": 0.5,
    "overshoot": 0.02,
    "max_iter": 50,
    "grid": "100:20:10",
    "ensemble_grid": None,
    "qualities": "phi,100:20:10",
    "suite": None,
    "clean": None,
}

REPORT_HEADER = ["condition", "epsilon", "original", "ensemble", "original_success",
                 "ensemble_success"]


class UsageError(Exception):
    """Bad configuration; reported like an argparse usage error."""


# -- argument parsing --------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    s = argparse.SUPPRESS
    common = argparse.ArgumentParser(add_help=False, argument_default=s)
    common.add_argument("--config", help="key=value file; flags override its entries")
    common.add_argument("--seed", type=int, help="base seed (default: $CARM_SEED or 0)")
    common.add_argument("--threads", type=int, help="evaluation parallelism (default: cores)")

    p = argparse.ArgumentParser(prog="jpegdefense", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def cmd(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text, argument_default=s)

    g = cmd("generate", "render a synthetic shape dataset")
    g.add_argument("--classes", type=int)
    g.add_argument("--per-class", dest="per_class", type=int)
    g.add_argument("--dims", help="HxW, e.g. 32x32")
    g.add_argument("--noise", type=float)
    g.add_argument("--out", required=True)

    t = cmd("train", "train a network on a dataset")
    t.add_argument("--data", required=True, help="dataset file (with .meta) or CIFAR-10 batch")
    t.add_argument("--arch", choices=["cifar10", "gtsrb", "toy"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--dropout", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--out", required=True)

    c = cmd("compress", "JPEG round trip of a PPM image or a dataset")
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--quality", type=int, required=True)
    c.add_argument("--out", required=True)

    a = cmd("attack", "craft an adversarial copy of a dataset")
    a.add_argument("--model", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--method", choices=["fgsm", "deepfool"])
    a.add_argument("--eps", help="FGSM step in [0, 1], or 'auto' to calibrate")
    a.add_argument("--target-success", dest="target_success", type=float)
    a.add_argument("--overshoot", type=float)
    a.add_argument("--max-iter", dest="max_iter", type=int)
    a.add_argument("--out", required=True)

    w = cmd("sweep", "accuracy per model and test quality")
    w.add_argument("--model", required=True, help="base model file")
    w.add_argument("--suite", help="vaccinated suite directory (adds its models)")
    w.add_argument("--data", action="append", help="dataset to evaluate (repeatable)")
    w.add_argument("--clean", help="benign set aligned with the adversarial sets")
    w.add_argument("--qualities", help="comma list of qualities, grids, or 'phi'")
    w.add_argument("--out", required=True)

    v = cmd("vaccinate", "retrain along a quality grid with warm starts")
    v.add_argument("--model", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--grid")
    v.add_argument("--epochs", type=int)
    v.add_argument("--batch-size", dest="batch_size", type=int)
    v.add_argument("--dropout", type=float)
    v.add_argument("--lr", type=float)
    v.add_argument("--out", required=True, help="output suite directory")

    e = cmd("ensemble", "original model vs voting ensemble on benign and adversarial sets")
    e.add_argument("--suite", required=True)
    e.add_argument("--benign", required=True)
    e.add_argument("--adv", action="append", help="adversarial set (repeatable)")
    e.add_argument("--grid", dest="ensemble_grid", help="test qualities (default: the suite grid)")
    e.add_argument("--out", required=True)

    r = cmd("report", "pivot an ensemble CSV into original-vs-ensemble rows")
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--out", required=True)
    return p


def _config_keys(parser: argparse.ArgumentParser) -> set[str]:
    keys = set()
    for action in parser._subparsers._group_actions[0].choices.values():
        keys.update(a.dest for a in action._actions if a.dest not in ("help", "config"))
    return keys


def _read_config(path, allowed: set[str]) -> dict[str, str]:
    values = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key == "in":
            key = "input"
        if key not in allowed:
            raise UsageError(f"{path}:{n}: unknown config key {key!r}")
        values[key] = value
    return values


def _actions(parser, command: str) -> dict[str, argparse.Action]:
    sub = parser._subparsers._group_actions[0].choices[command]
    return {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}


def _coerce(action: argparse.Action | None, key: str, value: str):
    if action is None:
        return value
    if isinstance(action, argparse._AppendAction):
        return [v.strip() for v in value.split(",") if v.strip()]
    try:
        return action.type(value) if action.type else value
    except ValueError:
        raise UsageError(f"config value {key}={value!r} is not valid") from None


def resolve(argv) -> argparse.Namespace:
    """Parse ``argv`` and merge in config file, environment and defaults.

    The result holds only the options of the chosen subcommand. Config keys
    that belong to other subcommands are accepted and ignored, so one file can
    drive a whole pipeline.
    """
    parser = _parser()
    given = vars(parser.parse_args(argv))
    actions = _actions(parser, given["command"])
    resolved = {k: v for k, v in DEFAULTS.items() if k in actions}
    resolved.update({k: [] for k, a in actions.items() if isinstance(a, argparse._AppendAction)})
    env_seed = os.environ.get("CARM_SEED")
    if env_seed is not None:
        try:
            resolved["seed"] = int(env_seed)
        except ValueError:
            raise UsageError(f"CARM_SEED must be an integer, got {env_seed!r}") from None
    if "config" in given:
        for key, value in _read_config(given["config"], _config_keys(parser)).items():
            if key in actions:
                resolved[key] = _coerce(actions[key], key, value)
    resolved.update({k: v for k, v in given.items() if k != "config"})
    return argparse.Namespace(**resolved)


# -- helpers ---------------------------------------------------------------------------------

def _parse_dims(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"dims must look like 32x32, got {text!r}") from None
    return h, w


def _parse_qualities(text: str) -> list[int]:
    out = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        if token.lower() == "phi":
            out.append(PHI)
        elif ":" in token:
            out.extend(QualityGrid.parse(token))
        else:
            out.append(codec.check_quality(int(token)))
    if not out:
        raise UsageError("no test qualities given")
    return out


def _train_config(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, dropout_rate=args.dropout,
                       lr=args.lr, seed=args.seed)


def save_suite(suite: VaccinatedSuite, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_model(suite.base_model, directory / "M.carm")
    for q, m in suite.models.items():
        save_model(m, directory / f"M{q}.carm")
    (directory / "suite.txt").write_text(f"grid={suite.grid}\n")


def load_suite(directory) -> VaccinatedSuite:
    directory = Path(directory)
    manifest = directory / "suite.txt"
    if not manifest.is_file():
        raise FileNotFoundError(f"{manifest} not found; not a suite directory")
    entries = dict(line.split("=", 1) for line in manifest.read_text().split() if "=" in line)
    grid = QualityGrid.parse(entries["grid"])
    base = load_model(directory / "M.carm")
    models = {q: load_model(directory / f"M{q}.carm", expect=base.spec) for q in grid}
    return VaccinatedSuite(base, models, grid)


def _attack_info(ds: Dataset) -> tuple[str, float | None]:
    eps = ds.meta.get("epsilon")
    return ds.meta.get("attack", "benign"), None if eps is None else float(eps)


# -- subcommands -----------------------------------------------------------------------------

def cmd_generate(args):
    ds = generate_synthetic(args.classes, args.per_class, _parse_dims(args.dims), seed=args.seed,
                            noise=args.noise, name=Path(args.out).stem)
    save_dataset(ds, args.out)
    log.info("wrote %d images to %s", len(ds), args.out)


def cmd_train(args):
    data = load_dataset(args.data)
    model = build_network(args.arch, data.dims, data.class_count, seed=args.seed,
                          dropout=args.dropout)
    model = train(model, data, _train_config(args))
    save_model(model, args.out)
    log.info("trained %s (%d params) -> %s", args.arch, model.num_params, args.out)


def cmd_compress(args):
    q = codec.check_quality(args.quality)
    if args.input.lower().endswith(".ppm"):
        write_ppm(codec.compress(read_ppm(args.input), q), args.out)
    else:
        data = load_dataset(args.input)
        save_dataset(data.with_images(compress_images(data.images, q), compressed=str(q)), args.out)
    log.info("compressed %s at quality %d -> %s", args.input, q, args.out)


def cmd_attack(args):
    model = load_model(args.model)
    data = load_dataset(args.data)
    if args.method == "fgsm":
        if str(args.eps).lower() == "auto":
            eps, rate = calibrate_epsilon(model, data, args.target_success)
            log.info("calibrated epsilon %.6f (success %.4f)", eps, rate)
        else:
            try:
                eps = float(args.eps)
            except ValueError:
                raise UsageError(f"--eps must be a number or 'auto', got {args.eps!r}") from None
        cfg = AttackConfig("fgsm", epsilon=eps)
    else:
        cfg = AttackConfig("deepfool", overshoot=args.overshoot, max_iter=args.max_iter)
    adv, _ = attack_dataset(model, data, cfg, threads=args.threads)
    save_dataset(adv, args.out)
    log.info("wrote %s set -> %s", cfg.tag, args.out)


def cmd_sweep(args):
    base = load_model(args.model)
    if args.suite:
        suite = load_suite(args.suite)
        models = [("M", "base", base)] + [(f"M{q}", str(q), m) for q, m in suite.models.items()]
    else:
        models = [("M", "base", base)]
    if not args.data:
        raise UsageError("sweep needs at least one --data set")
    clean = load_dataset(args.clean) if args.clean else None
    qualities = _parse_qualities(args.qualities)
    records = []
    for path in args.data:
        ds = load_dataset(path)
        attack, eps = _attack_info(ds)
        records += evaluate(models, ds, qualities, clean=None if attack == "benign" else clean,
                            attack=attack, epsilon=eps, threads=args.threads)
    write_sweep_csv(records, args.out)
    log.info("wrote %d sweep rows -> %s", len(records), args.out)


def cmd_vaccinate(args):
    base = load_model(args.model)
    suite = vaccinate(base, load_dataset(args.data), QualityGrid.parse(args.grid),
                      _train_config(args))
    save_suite(suite, args.out)
    log.info("wrote suite of %d models -> %s", len(suite.models), args.out)


def cmd_ensemble(args):
    suite = load_suite(args.suite)
    benign = load_dataset(args.benign)
    adversarial = {}
    for path in args.adv:
        ds = load_dataset(path)
        attack, eps = _attack_info(ds)
        if attack in adversarial:
            raise UsageError(f"two adversarial sets share the attack tag {attack!r}")
        adversarial[attack] = (ds, eps)
    qualities = None if args.ensemble_grid is None else tuple(QualityGrid.parse(args.ensemble_grid))
    records = table_summary(suite.base_model, suite, benign, adversarial, qualities,
                            threads=args.threads)
    write_sweep_csv(records, args.out)
    log.info("wrote ensemble summary -> %s", args.out)


def cmd_report(args):
    records = read_sweep_csv(args.input)
    rows: dict[str, dict] = {}
    for r in records:
        if r.model_id not in ("original", "ensemble"):
            continue
        row = rows.setdefault(r.attack, {"epsilon": r.epsilon})
        row[r.model_id] = r
    if not rows:
        raise ValueError(f"{args.input} has no original/ensemble rows")
    fmt = lambda x: "" if x is None else f"{x:.6f}"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_HEADER)
    for attack, row in rows.items():
        o, e = row.get("original"), row.get("ensemble")
        writer.writerow([attack, "" if row["epsilon"] is None else repr(row["epsilon"]),
                         fmt(o and o.accuracy), fmt(e and e.accuracy),
                         fmt(o and o.misclassification_success),
                         fmt(e and e.misclassification_success)])
    Path(args.out).write_text(buf.getvalue())
    log.info("wrote report -> %s", args.out)


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "compress": cmd_compress,
    "attack": cmd_attack,
    "sweep": cmd_sweep,
    "vaccinate": cmd_vaccinate,
    "ensemble": cmd_ensemble,
    "report": cmd_report,
}


def main(argv=None) -> int:
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = resolve(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"jpegdefense: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"jpegdefense: error: {exc}", file=sys.stderr)
        return 1
    log.info("resolved config: %s", ", ".join(f"{k}={v}" for k, v in sorted(vars(args).items())))
    log.info("seed: %d", args.seed)
    try:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"jpegdefense: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pipeline failures surface as exit code 1
        print(f"jpegdefense: error: {exc}", file=sys.stderr)
        return 1
    return 0
