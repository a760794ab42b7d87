"""Command-line interface.

Subcommands:
    gen-data   write train/val/test JSONL splits from the dataset spec
    train      train both stages, checkpoint, and evaluate on the test split
    eval       evaluate existing checkpoints
    ablate     train+eval a grid of ablation modes x seeds
    gradcheck  finite-difference check through the voted stage-1 loss
    vote       run the voting kernel over a logit-stack file

Global flags on every subcommand: --config PATH (JSON), --seed U64,
--out DIR. Exit codes: 0 success, 1 validation/usage error, 2
runtime/numeric error. All outputs land under --out with fixed names.

The config file is a single JSON document with optional sections
"dataset", "model", "train" (with nested "vote"), and "ablation";
field names mirror DatasetSpec / ModelConfig / TrainConfig / VoteConfig.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .metrics import EvalReport
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .pipeline import (
    ABLATION_MODES,
    TrainConfig,
    evaluate,
    gradcheck_voted_pipeline,
    run_ablation,
    train_pipeline,
    write_losscurve_csv,
    write_metrics_csv,
    write_summary_csv,
)
from .synthdata import DatasetSpec, generate_dataset, load_examples, save_examples
from .tensor import Tensor
from .voting import LogitStack, VoteConfig, vote_logits

DEFAULT_ABLATION_MODES = (
    "full",
    "mean_only",
    "weighted_only",
    "no_vote_rationale",
    "no_vote_answer",
    "inference_voting",
)


def _from_section(cls, section: dict, name: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"config section {name!r} has unknown fields: {sorted(unknown)}")
    return cls(**section)


def load_config(path: str | None) -> dict:
    """Parse the config JSON into dataclass instances (defaults if absent)."""
    raw = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    known_sections = {"dataset", "model", "train", "ablation"}
    unknown = set(raw) - known_sections
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    train_section = dict(raw.get("train", {}))
    vote_section = train_section.pop("vote", {})
    vote = _from_section(VoteConfig, vote_section, "train.vote")
    train_section["vote"] = vote
    dataset_section = dict(raw.get("dataset", {}))
    if "template_mix" in dataset_section:
        dataset_section["template_mix"] = tuple(dataset_section["template_mix"])
    return {
        "dataset": _from_section(DatasetSpec, dataset_section, "dataset"),
        "model": _from_section(ModelConfig, dict(raw.get("model", {})), "model"),
        "train": _from_section(TrainConfig, train_section, "train"),
        "ablation": dict(raw.get("ablation", {})),
    }


def _outdir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _dataset_for(args, cfg) -> tuple:
    if getattr(args, "data", None):
        return tuple(
            load_examples(os.path.join(args.data, f"{split}.jsonl"))
            for split in ("train", "val", "test")
        )
    return generate_dataset(cfg["dataset"])


def _write_report(out: str, report: EvalReport) -> None:
    with open(os.path.join(out, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    spec = cfg["dataset"]
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    out = _outdir(args)
    for split, examples in zip(("train", "val", "test"), generate_dataset(spec)):
        save_examples(os.path.join(out, f"{split}.jsonl"), examples)
    print(f"wrote train/val/test JSONL under {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    tcfg: TrainConfig = cfg["train"]
    if args.seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=args.seed)
    mcfg: ModelConfig = cfg["model"]
    out = _outdir(args)
    train_ex, _, test_ex = _dataset_for(args, cfg)
    s1, s2, curve = train_pipeline(train_ex, mcfg, tcfg)
    save_checkpoint(os.path.join(out, "stage1.ckpt"), mcfg, s1)
    save_checkpoint(os.path.join(out, "stage2.ckpt"), mcfg, s2)
    write_losscurve_csv(os.path.join(out, "losscurve.csv"), curve)
    report = evaluate(test_ex, mcfg, s1, s2, tcfg)
    row = {
        "mode": tcfg.ablation,
        "seed": tcfg.seed,
        "test_accuracy": report.test_accuracy,
        "rouge_l": report.rouge_l,
        "bias_sq": report.bias_sq,
        "variance": report.variance,
        "residual": report.residual,
        "jensen_gap": report.jensen_gap,
    }
    write_metrics_csv(os.path.join(out, "metrics.csv"), [row])
    _write_report(out, report)
    print(f"test_accuracy={report.test_accuracy:.4f} rouge_l={report.rouge_l:.4f} -> {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    tcfg: TrainConfig = cfg["train"]
    if args.seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=args.seed)
    ckpt_dir = args.ckpt_dir or args.out
    mcfg1, s1 = load_checkpoint(os.path.join(ckpt_dir, "stage1.ckpt"))
    mcfg2, s2 = load_checkpoint(os.path.join(ckpt_dir, "stage2.ckpt"))
    if mcfg1 != mcfg2:
        raise ConfigError("stage1/stage2 checkpoints disagree on the model config")
    _, _, test_ex = _dataset_for(args, cfg)
    report = evaluate(test_ex, mcfg1, s1, s2, tcfg, conditioning=args.conditioning)
    out = _outdir(args)
    _write_report(out, report)
    print(f"test_accuracy={report.test_accuracy:.4f} rouge_l={report.rouge_l:.4f} -> {out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    tcfg: TrainConfig = cfg["train"]
    if args.seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=args.seed)
    section = cfg["ablation"]
    modes = args.modes.split(",") if args.modes else section.get("modes", DEFAULT_ABLATION_MODES)
    n_seeds = args.seeds if args.seeds is not None else int(section.get("n_seeds", 5))
    n_jobs = args.jobs if args.jobs is not None else int(section.get("n_jobs", 1))
    rows = run_ablation(cfg["dataset"], cfg["model"], tcfg, modes, n_seeds, n_jobs=n_jobs)
    out = _outdir(args)
    write_metrics_csv(os.path.join(out, "metrics.csv"), rows)
    write_summary_csv(os.path.join(out, "summary.csv"), rows)
    for row in rows:
        print(
            f"{row['mode']:>18} seed={row['seed']} "
            f"acc={row['test_accuracy']:.4f} rouge={row['rouge_l']:.4f}"
        )
    print(f"-> {out}")
    return 0


def cmd_gradcheck(args) -> int:
    err = gradcheck_voted_pipeline()
    print(f"max rel err {err:.3e}")
    if not np.isfinite(err):
        raise NumericError("gradient check produced a non-finite error")
    return 0 if err <= 1e-4 else 2


def cmd_vote(args) -> int:
    cfg = load_config(args.config)
    vote_cfg: VoteConfig = cfg["train"].vote
    try:
        with open(args.stack, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"stack file not found: {args.stack}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{args.stack}: invalid JSON ({exc.msg})") from None
    if "shape" not in payload or "data" not in payload:
        raise DataError(f"{args.stack}: expected fields 'shape' and 'data'")
    shape = tuple(int(x) for x in payload["shape"])
    if len(shape) != 3:
        raise DataError(f"{args.stack}: shape must be [N, L, V], got {list(shape)}")
    data = np.asarray(payload["data"], dtype=np.float64)
    if data.size != int(np.prod(shape)):
        raise DataError(
            f"{args.stack}: data has {data.size} values, shape needs {int(np.prod(shape))}"
        )
    stack = LogitStack(Tensor(data.reshape(shape)))
    voted = vote_logits(stack, vote_cfg)
    out = _outdir(args)
    result = {
        "shape": [shape[1], shape[2]],
        "variant": vote_cfg.variant,
        "alpha": vote_cfg.alpha,
        "std_mode": vote_cfg.std_mode,
    }
    for name in ("mean", "std", "weights", "weighted", "final"):
        result[name] = getattr(voted, name).data.reshape(-1).tolist()
    path = os.path.join(out, "voted.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"-> {path}")
    return 0


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("--seed", type=int, default=None, help="override the relevant seed")
    common.add_argument("--out", default="out", help="output directory")

    parser = _Parser(prog="cotvote", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="generate dataset splits")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train both stages and evaluate")
    p.add_argument("--data", default=None, help="load splits from this dir instead of generating")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate checkpoints")
    p.add_argument("--data", default=None, help="load splits from this dir instead of generating")
    p.add_argument("--ckpt-dir", default=None, help="checkpoint directory (default: --out)")
    p.add_argument(
        "--conditioning", default="predicted", choices=("predicted", "gold", "none"),
        help="rationale source for the answer stage",
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="run the ablation grid")
    p.add_argument("--modes", default=None, help="comma-separated ablation modes")
    p.add_argument("--seeds", type=int, default=None, help="number of seeds")
    p.add_argument("--jobs", type=int, default=None, help="parallel workers")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("vote", parents=[common], help="vote over a logit-stack file")
    p.add_argument("--stack", required=True, help="JSON file with 'shape' [N,L,V] and flat 'data'")
    p.set_defaults(func=cmd_vote)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, DataError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 2
    except ArithmeticError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
