"""Command-line entry point.

Subcommands: gen-data, train, eval, params, gradcheck, sample.  All accept
``--config <json>``; flags override config keys, and every run echoes its
fully resolved configuration into the output directory.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from .config import RunConfig
from .data import OperatorTask, generate, load_dataset, save_dataset
from .operator import NetworkSpec, count_params
from .spectral import ConfigError
from .training import (TrainingAborted, evaluate_run, gradcheck_run,
                       sample_run, train_run)

_BLOCK_ALIASES = {"fno": "fno-dense"}


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        overrides["out"] = args.out
    if getattr(args, "data", None) is not None:
        overrides["dataset"] = args.data
    if getattr(args, "checkpoint", None) is not None:
        overrides["checkpoint"] = args.checkpoint
    return cfg.apply_overrides(**overrides)


def _add_shared(parser):
    parser.add_argument("--config", type=Path, help="JSON config file")
    parser.add_argument("--seed", type=int, help="run seed (64-bit)")
    parser.add_argument("--out", type=str, help="output directory")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    task_over = {
        "kind": args.task, "n": args.n, "train": args.train, "test": args.test,
        "horizon": args.horizon, "alpha": args.alpha, "amplitude": args.amplitude,
        "kmax_cut": args.kmax_cut,
    }
    for key, value in task_over.items():
        if value is not None:
            cfg.task[key] = value
    t = cfg.task
    kwargs = {"horizon": t["horizon"], "alpha": t["alpha"],
              "amplitude": t["amplitude"], "kmax_cut": t["kmax_cut"]}
    for side in ("input_scaling", "target_scaling"):
        if t[side] is not None:
            kwargs[side] = t[side]
    task = OperatorTask.make(t["kind"], tuple(t["n"]), t["train"], t["test"],
                             seed=cfg.seed, **kwargs)
    dataset = generate(task)
    outdir = Path(cfg.out)
    save_dataset(dataset, outdir)
    cfg.echo(outdir)
    total = task.n_train + task.n_test
    print(f"wrote {total} samples ({task.n_train} train / {task.n_test} test) "
          f"to {outdir}")
    print(f"oracle [{dataset.oracle['kind']}]: max residual "
          f"{dataset.oracle['max_residual']:.3e}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.bayes:
        cfg.bayes["enabled"] = True
    for key, value in (("epochs", args.epochs), ("lr", args.lr),
                       ("batch_size", args.batch)):
        if value is not None:
            cfg.optimizer[key] = value
    if args.block is not None:
        cfg.network["block_kind"] = _BLOCK_ALIASES.get(args.block, args.block)
    if cfg.dataset is None:
        raise ConfigError("train needs a dataset (--data or config key 'dataset')")
    dataset = load_dataset(Path(cfg.dataset))
    try:
        result = train_run(cfg, dataset, Path(cfg.out))
    except TrainingAborted as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    last = result.history[-1] if result.history else {}
    print(f"trained {cfg.optimizer['epochs']} epochs; "
          f"final test RL2 {last.get('test_rl2', 'n/a')}, "
          f"best {result.best_rl2:.6f}")
    print(f"checkpoints: {result.final_path}, {result.best_path}")
    print(f"log: {result.log_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    if cfg.checkpoint is None or cfg.dataset is None:
        raise ConfigError("eval needs --checkpoint and --data")
    if args.samples is not None:
        cfg.bayes["samples"] = args.samples
    dataset = load_dataset(Path(cfg.dataset))
    report = evaluate_run(Path(cfg.checkpoint), dataset, Path(cfg.out),
                          n_samples=cfg.bayes["samples"], seed=cfg.seed)
    print(f"RL2 {report.rl2:.6f}")
    if report.nll is not None:
        print(f"NLL {report.nll:.6f}  MA {report.ma:.6f}  IS {report.is_score:.6f}")
    print(f"report: {Path(cfg.out) / 'report.json'}")
    return 0


def cmd_params(args) -> int:
    cfg = _load_config(args)
    n = args.n or cfg.network["n"] or cfg.task["n"]
    kmax = args.kmax or cfg.network["kmax"] or [max(1, v // 4) for v in n]
    d_c = args.d_c or cfg.network["d_c"]
    blocks = args.blocks or cfg.network["blocks"]
    kind = _BLOCK_ALIASES.get(args.block, args.block) if args.block else cfg.network["block_kind"]
    spec = NetworkSpec(n=tuple(n), kmax=tuple(kmax), d_c=d_c, blocks=blocks,
                       block_kind=kind)
    table = count_params(spec)
    print(f"grid n={list(spec.n)}  kmax={list(spec.kmax)}  d_c={d_c}  "
          f"blocks={blocks}  retained modes={table['modes_retained']}")
    print(f"{'component':<28}{'parameters':>14}")
    print(f"{'lifting':<28}{table['lifting']['total']:>14}")
    for kind_name, counts in table["blocks"].items():
        label = f"block[{kind_name}] x{blocks}"
        print(f"{label:<28}{table['block_totals'][kind_name]:>14}"
              f"   (per block {counts['per_block']})")
    print(f"{'projection':<28}{table['projection']['total']:>14}")
    for kind_name, total in table["totals"].items():
        print(f"{'total ' + kind_name:<28}{total:>14}")
    if cfg.out and args.out is not None:
        outdir = Path(cfg.out)
        outdir.mkdir(parents=True, exist_ok=True)
        with open(outdir / "params.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["component", "kind", "parameters"])
            writer.writerow(["lifting", "-", table["lifting"]["total"]])
            writer.writerow(["projection", "-", table["projection"]["total"]])
            for kind_name in table["blocks"]:
                writer.writerow(["blocks", kind_name, table["block_totals"][kind_name]])
                writer.writerow(["total", kind_name, table["totals"][kind_name]])
        print(f"csv: {outdir / 'params.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    n = args.n or [16]
    kmax = args.kmax or [max(1, v // 4) for v in n]
    kind = _BLOCK_ALIASES.get(args.block, args.block) if args.block else "diffusion"
    spec = NetworkSpec(n=tuple(n), kmax=tuple(kmax), d_c=args.d_c, blocks=args.blocks,
                       block_kind=kind)
    report = gradcheck_run(spec, seed=cfg.seed, bayesian=args.bayes, h=args.h)
    status = "PASS" if report.passed(args.tolerance) else "FAIL"
    print(report.summary())
    print(f"{status} at tolerance {args.tolerance:g}"
          + (" (bayesian)" if args.bayes else ""))
    return 0 if status == "PASS" else 1


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    if cfg.checkpoint is None or cfg.dataset is None:
        raise ConfigError("sample needs --checkpoint and --data")
    if args.samples is not None:
        cfg.bayes["samples"] = args.samples
    dataset = load_dataset(Path(cfg.dataset))
    info = sample_run(Path(cfg.checkpoint), dataset, Path(cfg.out),
                      n_samples=cfg.bayes["samples"], seed=cfg.seed)
    print(f"wrote {info['samples']} samples for {info['elements']} elements "
          f"to {cfg.out}")
    print(f"tau diagnostics: {info['tau_shape'][0]} blocks x "
          f"{info['tau_shape'][1]} channels (tau_ln_mean.csv, tau_ln_std.csv)")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dinozaur",
        description="Diffusion-multiplier neural operators: data generation, "
                    "training, evaluation, and posterior sampling.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset archive")
    _add_shared(p)
    p.add_argument("--task", choices=["heat", "screened-poisson", "darcy-lite"])
    p.add_argument("--n", type=_int_list, help="grid sizes, e.g. 64 or 32,32")
    p.add_argument("--train", type=int)
    p.add_argument("--test", type=int)
    p.add_argument("--horizon", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--amplitude", type=float)
    p.add_argument("--kmax-cut", dest="kmax_cut", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset archive")
    _add_shared(p)
    p.add_argument("--data", type=str, help="dataset directory")
    p.add_argument("--bayes", action="store_true", help="variational training")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--block", choices=["diffusion", "diffusion-no-grad", "fno"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_shared(p)
    p.add_argument("--checkpoint", type=str)
    p.add_argument("--data", type=str)
    p.add_argument("--samples", type=int, help="posterior samples (default 100)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("params", help="parameter-count table for a network spec")
    _add_shared(p)
    p.add_argument("--n", type=_int_list)
    p.add_argument("--kmax", type=_int_list)
    p.add_argument("--d-c", dest="d_c", type=int)
    p.add_argument("--blocks", type=int)
    p.add_argument("--block", choices=["diffusion", "diffusion-no-grad", "fno"])
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("gradcheck", help="finite-difference check of the model")
    _add_shared(p)
    p.add_argument("--n", type=_int_list, help="default 16")
    p.add_argument("--kmax", type=_int_list)
    p.add_argument("--d-c", dest="d_c", type=int, default=4)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--block", choices=["diffusion", "diffusion-no-grad", "fno"])
    p.add_argument("--bayes", action="store_true")
    p.add_argument("--h", type=float, default=1e-6)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sample", help="write posterior-predictive sample fields")
    _add_shared(p)
    p.add_argument("--checkpoint", type=str)
    p.add_argument("--data", type=str)
    p.add_argument("--samples", type=int)
    p.set_defaults(func=cmd_sample)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
