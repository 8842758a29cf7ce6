"""Command-line front end: ``cpool <subcommand> --help`` lists every flag.

Exit codes: 0 success, 1 usage or configuration error, 2 data, checkpoint
or plan error, 3 numeric failure (NaN or a failed gradient check).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as X
from .checkpoint import CheckpointError, save_dataset
from .config import TASKS, ConfigError, ExperimentConfig, coerce, load_config, save_config
from .continuous import VARIANTS
from .data import DataError, DistanceTask, distance_batch
from .gradcheck import full_suite
from .quantize import METRICS, PlanFormatError, ProbeError, read_plan, write_plan
from .train import NumericError, continuous_layers, load_model, quantize_model, save_model, with_plans

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _odd_size(text: str) -> int:
    n = int(text)
    if n < 1 or n % 2 == 0:
        raise argparse.ArgumentTypeError(f"size must be a positive odd integer, got {n}")
    return n


def _task_for(name: str, meta: dict, data_dir):
    if name == "mnist":
        cfg = ExperimentConfig(task="mnist")
    else:
        limit = float(meta.get("limit_sq", 49.0))
        cfg = ExperimentConfig(task=name, limit_sq=limit)
    return X.make_task(cfg, data_dir)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        changes[key.strip()] = coerce(key.strip(), raw)
    if args.output_dir:
        changes["output_dir"] = args.output_dir
    cfg = cfg.replace(**changes)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = X.run_experiment(cfg, data_dir=args.data_dir, workers=args.parallel_eval)
    X.write_metrics_csv(out / "metrics.csv", res.history)
    save_config(out / "config.txt", cfg)
    extra = {"task": cfg.task}
    if cfg.task == "distance_limited":
        extra["limit_sq"] = repr(cfg.limit_sq)
    save_model(out / "model.ckpt", res.model, extra)
    print(f"final {res.history[-1].step} {res.final_metric:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, meta = load_model(args.checkpoint)
    if args.plans:
        plans = {name: read_plan(Path(args.plans) / f"{name}.plan") for name, _ in continuous_layers(model)}
        if not plans:
            raise CheckpointError(f"{args.checkpoint}: no continuous layers to apply plans to")
        model = with_plans(model, plans)
    name = args.task or meta.get("task")
    if name is None:
        raise UsageError("checkpoint does not record its task; pass --task")
    task = _task_for(name, meta, args.data_dir)
    seed = args.seed if args.seed is not None else int(meta.get("seed", 0))
    cfg = ExperimentConfig(task=name, eval_size=args.eval_size, seed=seed)
    print(f"{X.held_out_metric(model, task, cfg, args.parallel_eval):.4f}")
    return EXIT_OK


def cmd_dirac(args) -> int:
    resp, radius = X.dirac_probe(args.p_s, args.iterations, args.size, args.variant)
    X.write_pgm(args.out, resp)
    print(f"{radius:g}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    model, meta = load_model(args.checkpoint)
    if not continuous_layers(model):
        raise CheckpointError(f"{args.checkpoint}: pooling {meta.get('pooling')!r} has no continuous layers")
    qmodel, plans = quantize_model(model, args.probe_size, args.metric)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, plan in plans.items():
        write_plan(out / f"{name}.plan", plan)
        print(f"{name}: radii {' '.join(str(r) for r in plan.radii)}")
    if args.finetune_epochs > 0:
        name = meta.get("task")
        if name is None:
            raise UsageError("checkpoint does not record its task; fine-tuning needs it")
        task = _task_for(name, meta, args.data_dir)
        cfg = ExperimentConfig(task=name, batch_size=args.batch_size, seed=int(meta.get("seed", 0)))
        X.quantize_finetune(qmodel, task, cfg, args.finetune_epochs, args.parallel_eval)
    extra = {k: meta[k] for k in ("task", "limit_sq") if k in meta}
    save_model(out / "quantized.ckpt", qmodel, extra)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    task = DistanceTask(args.limit_sq if args.task == "distance_limited" else None)
    images, targets, _ = distance_batch(np.random.default_rng(args.seed), args.n, task.limit_sq)
    meta = {"task": args.task, "seed": args.seed, "n": args.n}
    if task.limit_sq is not None:
        meta["limit_sq"] = repr(task.limit_sq)
    save_dataset(args.out, meta, images, targets)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = full_suite(args.trials, args.seed)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cpool", description="Continuous-time pooling experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def data_flags(sp):
        sp.add_argument("--data-dir", help="MNIST directory (default: $CPOOL_DATA_DIR)")
        sp.add_argument("--parallel-eval", type=int, default=1, metavar="N",
                        help="evaluate batches on N threads (metric values are unchanged)")

    t = sub.add_parser("train", help="train LeNet-5 and write metrics.csv, config.txt and model.ckpt")
    t.add_argument("--config", help="key=value config file (defaults apply to missing keys)")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable")
    t.add_argument("--output-dir", help="overrides output_dir from the config")
    data_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="print the task metric of a checkpoint with 4 decimals")
    e.add_argument("--checkpoint", required=True, help="model checkpoint to evaluate")
    e.add_argument("--plans", metavar="DIR", help="replace continuous layers using DIR/<layer>.plan")
    e.add_argument("--task", choices=TASKS, help="defaults to the task recorded in the checkpoint")
    e.add_argument("--eval-size", type=int, default=1000, help="distance-task eval samples (default 1000)")
    e.add_argument("--seed", type=int, help="eval-set seed for distance tasks (default: the training seed)")
    data_flags(e)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("dirac", help="impulse response as a PGM image; prints the 50%% Chebyshev radius")
    d.add_argument("--p-s", type=float, required=True, help="pooling strength for every iteration")
    d.add_argument("--iterations", type=int, default=10000, help="diffusion steps (default 10000)")
    d.add_argument("--size", type=_odd_size, default=129, help="odd probe side length (default 129)")
    d.add_argument("--variant", choices=VARIANTS, default="sum", help="step rule (default sum)")
    d.add_argument("--out", default="dirac.pgm", help="output PGM path (default dirac.pgm)")
    d.set_defaults(func=cmd_dirac)

    q = sub.add_parser("quantize", help="replace continuous layers by grouped max pooling")
    q.add_argument("--checkpoint", required=True, help="checkpoint with continuous pooling layers")
    q.add_argument("--out-dir", required=True, help="receives <layer>.plan files and quantized.ckpt")
    q.add_argument("--probe-size", type=_odd_size, help="odd probe side (default 2N+3)")
    q.add_argument("--metric", choices=METRICS, default="chebyshev", help="radius rule (default chebyshev)")
    q.add_argument("--finetune-epochs", type=int, default=0, help="retrain the quantized model (default 0)")
    q.add_argument("--batch-size", type=int, default=32, help="fine-tune batch size (default 32)")
    data_flags(q)
    q.set_defaults(func=cmd_quantize)

    g = sub.add_parser("gen-data", help="dump synthetic distance samples to a binary file")
    g.add_argument("--task", choices=("distance", "distance_limited"), default="distance_limited",
                   help="which synthetic variant (default distance_limited)")
    g.add_argument("--n", type=int, required=True, help="number of samples")
    g.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    g.add_argument("--limit-sq", type=float, default=49.0, help="squared-distance bound of the limited variant")
    g.add_argument("--out", required=True, help="output dataset file")
    g.set_defaults(func=cmd_gen_data)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--trials", type=int, default=100, help="randomized trials per check (default 100)")
    c.add_argument("--seed", type=int, default=0, help="trial seed (default 0)")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"cpool: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, PlanFormatError, ProbeError, OSError) as e:
        print(f"cpool: error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"cpool: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"cpool: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
