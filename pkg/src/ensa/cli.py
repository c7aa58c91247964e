"""Command-line entry point: ``ensa {gen,train,eval,bench,influence,selftest}``."""

from __future__ import annotations

import argparse
import contextlib
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import bench, config as cfgmod, data, selftest
from . import diffcore as dc
from .model import Model, evaluate, train

DETERMINISTIC_ENV = "ENSA_DETERMINISTIC"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value config file with dotted keys (model.*, train.*, data.*, bench.*)")
    common.add_argument("--out", metavar="DIR", default="ensa_out", help="output directory (default: %(default)s)")
    common.add_argument("--seed", type=int, metavar="N", help="seed for model init, data generation and shuffling")
    common.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key after the file is read; repeatable"
    )
    common.add_argument("--threads", type=int, metavar="N", help="BLAS thread count (default: library choice; 1 when %s=1)" % DETERMINISTIC_ENV)

    parser = _Parser(
        prog="ensa",
        description="Native sparse attention over ball-tree partitions of point clouds.",
        epilog=f"Set {DETERMINISTIC_ENV}=1 to pin BLAS to one thread so reductions run in a fixed order.",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    sub.add_parser("gen", parents=[common], help="write synthetic train/ and val/ datasets")
    sub.add_parser("train", parents=[common], help="train a model; writes report.csv, params.ensa, config.txt")
    p = sub.add_parser("eval", parents=[common], help="print the MSE of saved parameters on a dataset")
    p.add_argument("--params", metavar="PATH", help="parameter file (default: OUT/params.ensa)")
    p.add_argument("--data", metavar="DIR", help="dataset directory (default: generated validation set)")
    sub.add_parser("bench", parents=[common], help="scaling sweep and throughput; writes CSVs")
    p = sub.add_parser("influence", parents=[common], help="per-node influence on one output node; writes influence.csv")
    p.add_argument("--params", metavar="PATH", help="parameter file (default: fresh initialisation)")
    p.add_argument("--data", metavar="DIR", help="dataset directory; the first cloud is used")
    p = sub.add_parser("selftest", parents=[common], help="finite-difference gradients and oracle checks")
    p.add_argument("--full", action="store_true", help="grad-check the depth-2, H=16 model instead of the quick one")
    return parser


def _load_config(args) -> cfgmod.RunConfig:
    try:
        run = cfgmod.load(args.config, args.set)
        if args.seed is not None:
            run = cfgmod.with_seed(run, args.seed)
    except cfgmod.ConfigError as exc:
        raise UsageError(str(exc)) from None
    return run


def _datasets(run: cfgmod.RunConfig):
    if run.data.path:
        root = Path(run.data.path)
        train_set = data.load_dataset(root / "train" if (root / "train").is_dir() else root)
        val_set = data.load_dataset(root / "val") if (root / "val").is_dir() else None
        return train_set, val_set
    return data.generate(run.data.spec(), run.data.train_count), data.generate(run.data.spec(True), run.data.val_count)


def _fit_model_to_data(run: cfgmod.RunConfig, cloud) -> cfgmod.RunConfig:
    """Match input and output widths of the model to the dataset."""
    width = 0 if cloud.targets is None else cloud.targets.shape[1]
    model = replace(run.model, in_features=cloud.features.shape[1], out_features=width or run.model.out_features)
    return replace(run, model=model)


def cmd_gen(run, args, out: Path) -> int:
    train_set, val_set = _datasets(replace(run, data=replace(run.data, path="")))
    data.save_dataset(out / "train", train_set, run.data.format)
    data.save_dataset(out / "val", val_set, run.data.format)
    print(f"wrote {len(train_set)} train and {len(val_set)} val clouds to {out}")
    return 0


def cmd_train(run, args, out: Path) -> int:
    train_set, val_set = _datasets(run)
    run = _fit_model_to_data(run, train_set[0])
    report = train(run.model, train_set, run.train, validation=val_set)
    report.to_csv(out / "report.csv")
    report.params.save(out / "params.ensa")
    (out / "config.txt").write_text(run.to_text())
    lines = [f"steps={len(report.records)}", f"final_loss={report.losses[-1]!r}"]
    if val_set:
        lines += [f"val_mse_init={report.val_mse_init!r}", f"val_mse_final={report.val_mse_final!r}"]
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def cmd_eval(run, args, out: Path) -> int:
    if args.data:
        clouds = data.load_dataset(args.data)
    else:
        clouds = data.generate(run.data.spec(True), run.data.val_count)
    run = _fit_model_to_data(run, clouds[0])
    params = dc.ParamStore.load(args.params or out / "params.ensa")
    print(f"test_mse={evaluate(run.model, params, clouds)!r}")
    return 0


def cmd_bench(run, args, out: Path) -> int:
    deterministic = os.environ.get(DETERMINISTIC_ENV) == "1"
    scaling = bench.scaling_sweep(run.model, run.bench.size_list, run.bench.repeats, run.model.seed)
    scaling.deterministic = deterministic
    bench.write_scaling_csv(out / "scaling.csv", scaling)
    print(f"nsa time_slope={scaling.time_slope:.3f} count_slope={scaling.count_slope:.3f}")
    if run.bench.dense:
        dense = bench.dense_scaling_sweep(run.model.hidden, run.model.heads, run.bench.size_list, run.bench.repeats, run.model.seed)
        dense.deterministic = deterministic
        bench.write_scaling_csv(out / "dense_scaling.csv", dense)
        print(f"dense time_slope={dense.time_slope:.3f}")
    clouds = data.generate(run.data.spec(), min(run.data.train_count, 4))
    run = _fit_model_to_data(run, clouds[0])
    tp = bench.measure_throughput(Model.create(run.model), clouds, run.bench.throughput_steps)
    with open(out / "throughput.csv", "w") as fh:
        fh.write(f"# deterministic={int(deterministic)}\n")
        fh.write("steps_per_sec,peak_bytes\n")
        fh.write(f"{tp.steps_per_sec!r},{tp.peak_bytes}\n")
    print(f"steps_per_sec={tp.steps_per_sec:.3f} peak_bytes={tp.peak_bytes}")
    rows, _ = bench.toy_access_pattern(run.model.seed)
    bench.write_access_pattern_csv(out / "access_pattern.csv", rows)
    return 0


def cmd_influence(run, args, out: Path) -> int:
    if args.data:
        cloud = data.load_dataset(args.data)[0]
    else:
        cloud = data.generate(run.data.spec(True), 1)[0]
    run = _fit_model_to_data(run, cloud)
    params = dc.ParamStore.load(args.params) if args.params else None
    model = Model(run.model, params) if params is not None else Model.create(run.model)
    imap = bench.influence(model, cloud, run.bench.target_node)
    bench.write_influence_csv(out / "influence.csv", cloud, imap)
    print(f"target={imap.target} influenced={imap.influenced}/{cloud.n}")
    return 0


def cmd_selftest(run, args, out: Path) -> int:
    results = selftest.run(print, quick=not args.full, seed=run.model.seed)
    failed = [r.name for r in results if not r.passed]
    print("selftest: " + ("ok" if not failed else "FAILED " + ", ".join(failed)))
    return 1 if failed else 0


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "influence": cmd_influence,
    "selftest": cmd_selftest,
}


def _thread_limit(threads: int | None):
    if os.environ.get(DETERMINISTIC_ENV) == "1":
        threads = 1
    if threads is None:
        return contextlib.nullcontext()
    if threads < 1:
        raise UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help
            return int(exc.code or 0)
        cfg = _load_config(args)
        limiter = _thread_limit(args.threads)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with limiter:
            return COMMANDS[args.command](cfg, args, out)
    except Exception as exc:  # noqa: BLE001 - surface any runtime failure as exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
