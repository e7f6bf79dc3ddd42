"""Command-line entry point: gen-data, train, eval, verify, params, bench.

Exit codes: 0 success, 1 usage error, 2 validation failure, 3 numeric failure.
``MSMU_THREADS`` caps BLAS worker threads (default 1).
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import checkpoint as ckpt_io
from . import config as config_io
from . import data, report, verify
from .checkpoint import CheckpointError
from .model import DBMSMUNet, ModelConfig, check_input_size
from .ssm import bench_scan_vs_kernel
from .train import NumericError, eval_report, evaluate, predict, split_dataset, train

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2, 3
PAPER_PARAMS = 44e6


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _out(text: str) -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")
    sys.stdout.flush()


def _err(text: str) -> None:
    sys.stderr.write(text + "\n")


def _write(path: Path, text: str) -> None:
    data.atomic_write_bytes(Path(path), text.encode())


# -- commands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    check_input_size(args.size, args.size)
    spec = data.PhantomSpec(
        size=args.size,
        contrast_gap=args.contrast_gap,
        noise_sigma=args.noise_sigma,
        deformation=args.deformation,
        lesion_count=(0, args.max_lesions),
        distractors=args.distractors,
    )
    slices = data.generate_dataset(args.count, spec, first_seed=args.seed)
    data.save_dir(slices, args.out)
    _out(f"wrote {len(slices)} phantoms to {args.out}")
    return EXIT_OK


def _train_config(args) -> config_io.TrainConfig:
    cfg = config_io.load(args.config) if args.config else config_io.TrainConfig()
    model_kw = {}
    if args.no_eep:
        model_kw["use_eep"] = False
    if args.no_mld:
        model_kw["use_mld"] = False
    if args.no_ads:
        model_kw["use_ads"] = False
    if args.single_scale:
        model_kw["multiscale_mamba"] = False
    run_kw = {k: getattr(args, k) for k in ("epochs", "batch_size", "lr", "seed", "max_steps") if getattr(args, k) is not None}
    if args.swap_edge_weights:
        run_kw["swap_edge_weights"] = True
    model = ModelConfig(**{**cfg.model.as_dict(), **model_kw})
    return replace(cfg, model=model, data=str(args.data), val_data=str(args.val_data or ""), out=str(args.out), **run_kw)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    slices = data.load_dir(args.data)
    if not slices:
        raise ValueError(f"{args.data}: dataset is empty")
    if args.val_data:
        train_set, val_set = slices, data.load_dir(args.val_data)
    else:
        train_set, val_set = split_dataset(slices, cfg.val_fraction)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config_io.save(cfg, out / "config.txt")
    model, rep = train(cfg, train_set, val_set, out, log=None if args.quiet else _out)
    report.training_curves(rep, out / "training_curves.png")
    report.prediction_grid(val_set, predict(model, data.stack_batch(val_set)[0]), out / "predictions.png")
    _out(rep.summary())
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = ckpt_io.load(args.checkpoint)
    cfg = ckpt.config
    if args.config:
        expected = config_io.load(args.config)
        diff = config_io.model_config_diff(expected.model, cfg.model)
        if diff:
            raise CheckpointError(f"config and checkpoint disagree on: {', '.join(diff)}")
    slices = data.load_dir(args.data)
    if not slices:
        raise ValueError(f"{args.data}: dataset is empty")
    model = DBMSMUNet(cfg.model, seed=cfg.seed)
    ckpt_io.load_into(model, ckpt)
    metrics = evaluate(model, slices)
    text = eval_report([s.id for s in slices], metrics)
    if args.report:
        _write(Path(args.report), text)
        fig = Path(args.report).with_suffix(".png")
        report.prediction_grid(slices, predict(model, data.stack_batch(slices)[0]), fig)
    _out(f"dsc\t{metrics.dsc:.6f}\nprecision\t{metrics.precision:.6f}\nrecall\t{metrics.recall:.6f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = verify.run_suite(include_paper_scale=not args.quick, log=_out)
    failed = [r.name for r in results if not r.passed]
    if args.report:
        _write(Path(args.report), "status\tcheck\tdetail\tseconds\n" + "".join(r.line() + "\n" for r in results))
    _out(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        _err("failed checks: " + ", ".join(failed))
        return EXIT_VALIDATION
    return EXIT_OK


def cmd_params(args) -> int:
    if args.config:
        model_cfg = config_io.load(args.config).model
    elif args.paper:
        model_cfg = ModelConfig.paper_scale()
    else:
        model_cfg = ModelConfig()
    model = DBMSMUNet(model_cfg, seed=0)
    groups = model.parameter_groups()
    total = sum(groups.values())
    lines = ["block\tparameters"] + [f"{k}\t{v}" for k, v in groups.items()]
    lines += [f"total\t{total}", f"reference\t{int(PAPER_PARAMS)}", f"ratio\t{total / PAPER_PARAMS:.4f}"]
    text = "\n".join(lines) + "\n"
    _out(text)
    if args.report:
        _write(Path(args.report), text)
        report.parameter_bars(groups, Path(args.report).with_suffix(".png"), PAPER_PARAMS)
    return EXIT_OK


def cmd_bench(args) -> int:
    rows = bench_scan_vs_kernel(tuple(args.lengths), d=args.channels, n=args.state_size)
    lines = ["length\tscan_s\tkernel_s\tmax_abs_diff"]
    lines += [f"{r['length']}\t{r['scan_s']:.6f}\t{r['kernel_s']:.6f}\t{r['max_abs_diff']:.3e}" for r in rows]
    text = "\n".join(lines) + "\n"
    _out(text)
    if args.report:
        _write(Path(args.report), text)
        report.bench_plot(rows, Path(args.report).with_suffix(".png"))
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="msmunet", description="Dual-branch multi-scale Mamba UNet on numpy.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic phantom dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--contrast-gap", type=float, default=data.PhantomSpec.contrast_gap)
    g.add_argument("--noise-sigma", type=float, default=data.PhantomSpec.noise_sigma)
    g.add_argument("--deformation", type=float, default=data.PhantomSpec.deformation)
    g.add_argument("--max-lesions", type=int, default=2)
    g.add_argument("--distractors", type=int, default=data.PhantomSpec.distractors)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and write checkpoints and reports")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--val-data")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--no-eep", action="store_true", help="drop the edge enhancement path")
    t.add_argument("--no-mld", action="store_true", help="plain UNet decoder instead of the multi-layer decoder")
    t.add_argument("--no-ads", action="store_true", help="no auxiliary deep-supervision heads")
    t.add_argument("--single-scale", action="store_true", help="one Mamba branch per stage")
    t.add_argument("--swap-edge-weights", action="store_true")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report")
    e.add_argument("--config", help="reject the checkpoint if its model config differs")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run the self-check suite")
    v.add_argument("--quick", action="store_true", help="skip the 224x224 paper-scale shape check")
    v.add_argument("--report")
    v.set_defaults(func=cmd_verify)

    c = sub.add_parser("params", help="parameter counts per block")
    c.add_argument("--config")
    c.add_argument("--paper", action="store_true", help="paper-scale widths (C'=32, N=16)")
    c.add_argument("--report")
    c.set_defaults(func=cmd_params)

    b = sub.add_parser("bench", help="time recurrent scan against kernel convolution")
    b.add_argument("--lengths", type=int, nargs="+", default=[16, 64, 256, 1024])
    b.add_argument("--channels", type=int, default=16)
    b.add_argument("--state-size", type=int, default=16)
    b.add_argument("--report")
    b.set_defaults(func=cmd_bench)
    return p


def thread_count() -> int:
    raw = os.environ.get("MSMU_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"MSMU_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"MSMU_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    from threadpoolctl import threadpool_limits

    try:
        args = build_parser().parse_args(argv)
        threads = thread_count()
    except UsageError as exc:
        _err(f"usage error: {exc}")
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except NumericError as exc:
        _err(f"numeric failure: {exc}")
        return EXIT_NUMERIC
    except (ValueError, CheckpointError, FileNotFoundError, OSError) as exc:
        _err(f"error: {exc}")
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
