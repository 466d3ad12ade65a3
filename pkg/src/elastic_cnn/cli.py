"""Command-line entry point: ``elastic-cnn <subcommand> ...``.

Every subcommand prints a short human-readable result; ``--out PATH`` writes
the machine-readable CSV form as well.  Exit status is 0 on success, 1 on a
failed check or runtime error (one-line diagnostic on stderr) and 2 on usage
errors.
"""

from __future__ import annotations

import argparse
import sys
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .arch import block_sites, count_elastic_blocks, dump_config, load_arch
from .cost import compare_methods, format_summary, model_cost
from .data import STRATA, SyntheticSpec, generate_synthetic, load_cifar10
from .errors import ElasticError
from .gradcheck import SUITE_OPS, run_suite
from .network import build
from .policy import aggregate, export_traces, format_aggregate, trace_batch
from .train import Checkpoint, TrainConfig, evaluate, network_from_checkpoint, resize_batch, stress_test, train


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _fractions(text: str) -> list[Fraction]:
    return [Fraction(t) for t in text.split(",") if t.strip()]


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _write(path: Optional[str], text: str) -> None:
    if path:
        Path(path).write_text(text)


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", choices=("synthetic", "cifar10"), default="synthetic")
    p.add_argument("--cifar-dir", help="directory holding the CIFAR-10 .bin batches")
    p.add_argument("--data-seed", type=int, default=None, help="synthetic generator seed (default: --seed)")
    p.add_argument("--train-samples", type=int, default=SyntheticSpec.train_samples)
    p.add_argument("--test-samples", type=int, default=SyntheticSpec.test_samples)
    p.add_argument("--num-classes", type=int, default=SyntheticSpec.num_classes)
    p.add_argument("--scale-dist", type=_floats, default=None, help="small,medium,large fractions")
    p.add_argument("--noise", type=float, default=SyntheticSpec.noise)


def _dataset_params(args) -> dict:
    if args.dataset == "cifar10":
        if not args.cifar_dir:
            raise ElasticError("--cifar-dir is required with --dataset cifar10")
        return {"dir": args.cifar_dir}
    params = {
        "num_classes": args.num_classes,
        "train_samples": args.train_samples,
        "test_samples": args.test_samples,
        "noise": args.noise,
    }
    if args.scale_dist is not None:
        params["scale_distribution"] = list(args.scale_dist)
    if getattr(args, "data_seed", None) is not None:
        params["seed"] = args.data_seed
    return params


def _load_split(args, seed: int):
    if args.dataset == "cifar10":
        return load_cifar10(args.cifar_dir)
    params = _dataset_params(args)
    params.setdefault("seed", seed)
    if "scale_distribution" in params:
        params["scale_distribution"] = tuple(params["scale_distribution"])
    return generate_synthetic(SyntheticSpec(**params))


# -- subcommands -----------------------------------------------------------------------


def cmd_describe(args) -> int:
    spec = load_arch(args.arch, args.classes)
    report = model_cost(spec, args.resolution)
    print(f"{spec.name} ({spec.family}), input {args.resolution or spec.input_resolution}px")
    print(f"stage blocks: {spec.block_counts}")
    for s, st in enumerate(spec.stages):
        n_el = sum(1 for site in block_sites(spec) if site.stage == s and site.elastic)
        print(f"  stage {s + 1}: {st.num_blocks} blocks, out {st.out_channels}, res {st.resolution}, "
              f"width {st.bottleneck_channels}, elastic blocks {n_el}")
    print(f"Elastic blocks: {count_elastic_blocks(spec)}")
    print(format_summary(report))
    _write(args.out, dump_config(spec))
    return 0


def cmd_cost(args) -> int:
    spec = load_arch(args.arch, args.classes)
    report = model_cost(spec, args.resolution)
    print(format_summary(report))
    _write(args.out, report.to_csv())
    return 0


def cmd_cost_compare(args) -> int:
    rows = compare_methods(args.n, args.c, args.k, args.q, args.b, args.r)
    lines = ["method,flops,params,flops_vs_single"]
    single = rows[0][1]
    for method, flops, params in rows:
        lines.append(f"{method},{flops},{params},{float(flops / single):.6g}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    _write(args.out, text)
    return 0


def cmd_train(args) -> int:
    config = TrainConfig(
        arch=args.arch, epochs=args.epochs, base_lr=args.lr, lr_step_epochs=tuple(args.lr_steps),
        lr_decay_factor=args.lr_decay, momentum=args.momentum, weight_decay=args.weight_decay,
        batch_size=args.batch_size, seed=args.seed, dataset=args.dataset, dataset_params=_dataset_params(args),
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = train(
        config, log_path=out_dir / "log.csv", checkpoint_path=out_dir / "checkpoint.bin",
        on_epoch=lambda r: print(f"epoch {r.epoch} {r.split}: loss {r.loss:.4f} top1 {r.top1:.4f}", flush=True),
    )
    print(f"wrote {out_dir / 'checkpoint.bin'} and {out_dir / 'log.csv'} after {result.checkpoint.step} steps")
    return 0


def _eval_csv(results) -> str:
    lines = ["resolution,group,top1,count,flops,loss"]
    for r in results:
        for name, acc, cnt in r.rows():
            lines.append(f"{r.resolution},{name},{acc:.6f},{cnt},{r.flops},{r.loss:.6f}")
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    data = _load_split(args, _ckpt_seed(ckpt))
    res = evaluate(ckpt, data.test, args.resolution)
    print(f"{ckpt.spec.name} @ {res.resolution}px: top1 {res.top1:.4f} on {res.count} images, "
          f"{res.flops / 1e6:.2f}M FLOPs")
    for name, (acc, cnt) in res.strata.items():
        print(f"  {name}: {acc:.4f} ({cnt})")
    _write(args.out, _eval_csv([res]))
    return 0


def cmd_stress(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    data = _load_split(args, _ckpt_seed(ckpt))
    results = stress_test(ckpt, data.test, args.resolutions)
    native = ckpt.spec.input_resolution
    base = next((r.flops for r in results if r.resolution == native), None)
    for r in results:
        ratio = "" if base is None else f", FLOPs x{r.flops / base:.3f}"
        print(f"{r.resolution}px: top1 {r.top1:.4f}, pool input {r.pool_input_shape}{ratio}")
    _write(args.out, _eval_csv(results))
    return 0


def _ckpt_seed(ckpt: Checkpoint) -> int:
    config = ckpt.config or {}
    return int(config.get("dataset_params", {}).get("seed", config.get("seed", 0)))


def cmd_policy(args) -> int:
    if Path(args.model).is_file():
        ckpt = Checkpoint.load(args.model)
        net = network_from_checkpoint(ckpt)
        seed = _ckpt_seed(ckpt)
    else:
        net = build(load_arch(args.model, args.num_classes), seed=args.seed)
        seed = args.seed
    args.test_samples = args.images
    args.train_samples = 0
    data = _load_split(args, seed)
    test = data.test.subset(np.arange(min(args.images, len(data.test))))
    x = test.batch(np.arange(len(test)))
    if args.resolution and args.resolution != x.shape[-1]:
        x = resize_batch(x, args.resolution)
    traces = []
    for start in range(0, len(test), 50):
        idx = np.arange(start, min(len(test), start + 50))
        traces += trace_batch(net, x[idx], [str(i) for i in idx], test.labels[idx])
    print(f"{len(traces)} traces, {len(traces[0].scores) if traces else 0} Elastic blocks each")
    print(format_aggregate(aggregate(traces, args.group_by), args.group_by), end="")
    if args.out:
        export_traces(traces, args.out)
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(args.trials, args.seed, args.ops or SUITE_OPS)
    ok = True
    lines = ["op,trials,max_rel_error,tolerance,passed"]
    for name, reports in results.items():
        worst = max(reports, key=lambda r: r.max_rel_error)
        passed = all(r.passed for r in reports)
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name}: {len(reports)} shapes, max rel err "
              f"{worst.max_rel_error:.2e} (tol {worst.tolerance:.0e})")
        lines.append(f"{name},{len(reports)},{worst.max_rel_error:.3e},{worst.tolerance:g},{int(passed)}")
    _write(args.out, "\n".join(lines) + "\n")
    return 0 if ok else 1


# -- parser ----------------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="elastic-cnn", description="Elastic multi-resolution CNN toolkit")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("describe", help="print an architecture and its cost summary")
    p.add_argument("arch", help="preset name or config file")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--out", help="write the architecture config here")
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("cost", help="per-layer FLOPs and parameters")
    p.add_argument("arch")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--out", help="per-layer CSV")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("cost-compare", help="single-convolution cost of every multi-scaling method")
    p.add_argument("--n", type=int, required=True, help="input side")
    p.add_argument("--c", type=int, required=True, help="channels")
    p.add_argument("--k", type=int, required=True, help="filter size")
    p.add_argument("--q", type=int, default=1, help="branch count")
    p.add_argument("--b", type=_fractions, default=None, help="branching denominators, e.g. 2,2")
    p.add_argument("--r", type=_ints, default=None, help="scale ratios, e.g. 1,2")
    p.add_argument("--out")
    p.set_defaults(func=cmd_cost_compare)

    p = sub.add_parser("train", help="train a network")
    p.add_argument("--arch", default="toy_resnext_8")
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--lr-steps", type=_ints, default=[30, 60, 90])
    p.add_argument("--lr-decay", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="run")
    _add_data_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, optionally at another resolution")
    p.add_argument("checkpoint")
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--out")
    _add_data_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stress", help="evaluate a checkpoint across input resolutions")
    p.add_argument("checkpoint")
    p.add_argument("--resolutions", type=_ints, default=[16, 32, 64])
    p.add_argument("--out")
    _add_data_args(p)
    p.set_defaults(func=cmd_stress)

    p = sub.add_parser("policy", help="scale-policy traces over test images")
    p.add_argument("model", help="checkpoint file or preset name (random weights)")
    p.add_argument("--images", type=int, default=100)
    p.add_argument("--group-by", choices=("category", "block"), default="category")
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="trace CSV")
    _add_data_args(p)
    p.set_defaults(func=cmd_policy)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ops", type=lambda s: s.split(","), default=None, help=f"subset of {','.join(SUITE_OPS)}")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    if args.command == "cost-compare":
        args.b = args.b or [Fraction(1)] * args.q
        args.r = args.r or [1] * args.q
    try:
        return args.func(args)
    except (ElasticError, OSError, KeyError) as exc:
        print(f"elastic-cnn {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
