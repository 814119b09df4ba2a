"""Command-line interface.

Every subcommand accepts ``--config FILE`` (JSON with ExperimentConfig keys,
training options under ``"train"``); explicit flags override the file.
Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import harness
from .autodiff import ContractError, ShapeError
from .harness import ExperimentConfig, ModelBundle
from .metrics import evaluate
from .ranking import required_sample_size
from .synth import ConfigurationError, generate_dataset, load_case, load_dataset, read_vvol, save_case, write_vvol
from .train import TrainConfig, TrainingDiverged

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

# flag dest -> TrainConfig field
_TRAIN_FLAGS = {
    "epochs": int,
    "ae_epochs": int,
    "batch_size": int,
    "lr_main": float,
    "lr_ae": float,
    "lambda1": float,
    "lambda2": float,
    "depth": int,
    "base_channels": int,
    "code_channels": int,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigurationError(message)


def _add_config(p):
    p.add_argument("--config", help="JSON config file; flags override its values")


def _add_dataset_flags(p):
    p.add_argument("--seed", type=int)
    p.add_argument("--n-cases", type=int)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--extents", type=int, nargs=3, metavar=("D", "H", "W"))
    p.add_argument("--spacing", type=float, nargs=3, metavar=("Z", "Y", "X"), dest="spacing_mm")


def _add_train_flags(p):
    for name, typ in _TRAIN_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), type=typ)
    p.add_argument("--no-augment", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="combreg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic phantom dataset as VVOL files")
    _add_config(p)
    _add_dataset_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train one method on a VVOL dataset")
    _add_config(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="model bundle directory")
    p.add_argument("--regularization", default="combined")
    p.add_argument("--strategy", default="multi")
    p.add_argument("--exclude", nargs="*", default=[], help="case ids left out of training")
    p.add_argument("--seed", type=int)
    _add_train_flags(p)

    p = sub.add_parser("predict", help="segment one case with a trained bundle")
    p.add_argument("--model", required=True)
    p.add_argument("--case", required=True)
    p.add_argument("--out", required=True, help="output VVOL stem")
    p.add_argument("--connectivity", type=int, default=26)
    p.add_argument("--radius", type=int, default=1)

    p = sub.add_parser("eval", help="metrics of a predicted label VVOL against a case")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out", help="write the records as JSON here")

    p = sub.add_parser("rank", help="rebuild leaderboard and plot data from a metrics.csv")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("codes", help="export global-max-pooled shape codes as CSV")
    p.add_argument("--model", required=True, help="model bundle with an auto-encoder")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--structure", type=int)

    p = sub.add_parser("run", help="full leave-one-out grid experiment")
    _add_config(p)
    _add_dataset_flags(p)
    _add_train_flags(p)
    p.add_argument("--outdir")
    p.add_argument("--data-dir")
    p.add_argument("--grid", nargs="+", metavar="REG:STRATEGY")
    p.add_argument("--parallel-folds", type=int)
    p.add_argument("--eval-mode", choices=harness.EVAL_MODES)
    p.add_argument("--overlays", action="store_true", default=None)

    p = sub.add_parser("power", help="cases per group for a two-sample comparison")
    for name in ("mean1", "sd1", "mean2", "sd2"):
        p.add_argument("--" + name, type=float, required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--power", type=float, default=0.8)
    return parser


# ------------------------------------------------------------------ config
def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigurationError("config file must hold a JSON object")
    return data


def _train_overrides(args, base: dict) -> dict:
    out = dict(base)
    for name in _TRAIN_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            out[name] = v
    if getattr(args, "no_augment", False):
        out["augment"] = False
    return out


def _experiment_config(args) -> ExperimentConfig:
    d = _load_config(getattr(args, "config", None))
    for key in ("seed", "n_cases", "num_classes", "extents", "spacing_mm", "outdir", "data_dir", "parallel_folds", "eval_mode", "overlays"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    if getattr(args, "grid", None):
        try:
            d["grid"] = [tuple(g.split(":")) for g in args.grid]
        except ValueError:
            raise ConfigurationError("grid entries look like REG:STRATEGY") from None
        if any(len(g) != 2 for g in d["grid"]):
            raise ConfigurationError("grid entries look like REG:STRATEGY")
    d["train"] = _train_overrides(args, d.get("train", {}))
    return ExperimentConfig.from_dict(d)


# ------------------------------------------------------------------ commands
def cmd_gen(args) -> int:
    cfg = _experiment_config(args)
    cases = generate_dataset(cfg.seed, cfg.n_cases, cfg.num_classes, cfg.extents, cfg.spacing_mm)
    for case in cases:
        save_case(case, args.out)
    print(f"wrote {len(cases)} cases to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    d = _load_config(args.config)
    overrides = _train_overrides(args, d.get("train", {}))
    known = {f.name for f in fields(TrainConfig)}
    if set(overrides) - known:
        raise ConfigurationError(f"unknown training option(s): {sorted(set(overrides) - known)}")
    overrides["seed"] = args.seed if args.seed is not None else d.get("seed", overrides.get("seed", 0))
    cfg = TrainConfig(**{**overrides, "strategy": args.strategy, "regularization": args.regularization})
    cases = [c for c in load_dataset(args.data) if c.case_id not in set(args.exclude)]
    if not cases:
        raise ConfigurationError("no training cases left after exclusion")
    bundle = harness.train_bundle(cases, cfg)
    bundle.save(args.out)
    print(f"trained {harness.method_name(cfg.regularization, cfg.strategy)} on {len(cases)} cases -> {args.out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    bundle = ModelBundle.load(args.model)
    case = load_case(args.case)
    pred = harness.predict(bundle, case, args.connectivity, args.radius)
    path = write_vvol(args.out, pred.label_volume(), case.spacing_mm, case.num_classes, case.case_id, extra={"role": "prediction", "strategy": bundle.strategy})
    print(path)
    return EXIT_OK


def cmd_eval(args) -> int:
    case = load_case(args.gt)
    header, arrays = read_vvol(args.pred)
    pred = arrays["labels"]
    if pred.shape != case.labels.shape:
        raise ContractError(f"prediction extents {pred.shape} differ from ground truth {case.labels.shape}")
    records = []
    if header.get("extra", {}).get("strategy") != "global":
        for c in range(1, case.num_classes + 1):
            records.append(evaluate(case.labels == c, pred == c, case.spacing_mm, case.case_id, f"s{c}").to_record())
    records.append(evaluate(case.labels > 0, pred > 0, case.spacing_mm, case.case_id, "global").to_record())
    text = json.dumps(records, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_rank(args) -> int:
    folds = harness.folds_from_rows(harness.read_metric_rows(args.metrics))
    paths = harness.emit_reports(folds, args.out)
    print(Path(paths["leaderboard.csv"]).read_text(), end="")
    return EXIT_OK


def cmd_codes(args) -> int:
    bundle = ModelBundle.load(args.model)
    if not bundle.autoencoders:
        raise ConfigurationError(f"bundle {args.model} holds no auto-encoder (regularization {bundle.regularization!r})")
    cases = load_dataset(args.data)
    rows = []
    for s, ae in zip(bundle.structures, bundle.autoencoders):
        rows.extend(harness.export_codes(ae, cases, s or args.structure))
    harness.write_codes_csv(rows, args.out, bundle.autoencoders[0].config.code_channels)
    print(f"wrote {len(rows)} codes to {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _experiment_config(args)
    if not cfg.outdir:
        raise ConfigurationError("run needs an output directory (--outdir or config 'outdir')")
    result = harness.run_loocv(cfg)
    paths = harness.emit_reports(result.folds, cfg.outdir, result.methods())
    (Path(cfg.outdir) / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    print(Path(paths["leaderboard.csv"]).read_text(), end="")
    return EXIT_OK


def cmd_power(args) -> int:
    try:
        n = required_sample_size(args.mean1, args.sd1, args.mean2, args.sd2, args.alpha, args.power)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from None
    print("unbounded" if n == float("inf") else n)
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "rank": cmd_rank,
    "codes": cmd_codes,
    "run": cmd_run,
    "power": cmd_power,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, TypeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ContractError, ShapeError, TrainingDiverged, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
