"""Command line entry point.

Subcommands: describe, gradcheck, gen-data, train, eval, infer. Exit codes:
0 success, 1 usage/validation error, 2 runtime error (gradient-check
threshold breach, training blowup). Every subcommand prints its resolved
seed so any run can be reproduced from stdout plus flags alone.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import checkpoint as ckpt_io
from . import data as data_mod
from . import trainer as trainer_mod
from .autodiff import GraphError, grad_check, graph_grad_check, kaiming_init
from .model import (ConfigError, UmcConfig, build, count_params,
                    format_millions, init_params, layer_table_text, load_config)
from .ops import standard_gradcheck_cases
from .rng import STREAM_CHECK, make_rng

TINY_FILTERS = (4, 8, 16, 32, 64)


class _Parser(argparse.ArgumentParser):
    """argparse flags usage problems with exit code 2; the contract says 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="umc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    d = sub.add_parser("describe", help="per-layer parameter table for a config")
    d.add_argument("--config", required=True)
    d.add_argument("--seed", type=int, default=0)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    gc.add_argument("--mode", choices=("ops", "tiny"), default="ops")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--seeds", type=int, default=5,
                    help="random restarts per op (ops mode)")
    gc.add_argument("--threshold", type=float, default=None,
                    help="max relative error (default 1e-6 ops, 1e-4 tiny)")

    gd = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    gd.add_argument("--out", required=True)
    gd.add_argument("--n", type=int, required=True)
    gd.add_argument("--size", default="64x64", help="HxW or one even side")
    gd.add_argument("--classes", type=int, default=5)
    gd.add_argument("--categories", type=int, default=3)
    gd.add_argument("--seed", type=int, default=0)
    gd.add_argument("--sigma", type=float, default=0.0)
    gd.add_argument("--force", action="store_true",
                    help="allow writing into a non-empty directory")

    tr = sub.add_parser("train", help="train a model on a dataset directory")
    tr.add_argument("--config", required=True)
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True, help="checkpoint path")
    tr.add_argument("--epochs", type=int, default=20)
    tr.add_argument("--max-steps", type=int, default=None)
    tr.add_argument("--batch-size", type=int, default=2)
    tr.add_argument("--lr", type=float, default=0.003)
    tr.add_argument("--beta1", type=float, default=0.9)
    tr.add_argument("--beta2", type=float, default=0.999)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--bind", action="append", default=[],
                    metavar="PATHWAY=FIELD",
                    help="override a supervision binding")
    tr.add_argument("--runlog", default=None,
                    help="loss CSV path (default: <out>.runlog.csv)")

    ev = sub.add_parser("eval", help="score a checkpoint on a dataset")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--seed", type=int, default=0)

    inf = sub.add_parser("infer", help="run one image through a checkpoint")
    inf.add_argument("--ckpt", required=True)
    inf.add_argument("--image", required=True, help="input PPM")
    inf.add_argument("--out-prefix", required=True)
    inf.add_argument("--seed", type=int, default=0)
    return p


def _parse_bindings(pairs) -> dict:
    out = {}
    for raw in pairs:
        if "=" not in raw:
            raise ConfigError(f"--bind expects PATHWAY=FIELD, got '{raw}'")
        name, fld = raw.split("=", 1)
        out[name.strip()] = fld.strip()
    return out


def _parse_size(raw: str) -> tuple:
    parts = raw.lower().split("x")
    try:
        vals = [int(v) for v in parts]
    except ValueError:
        raise data_mod.DataError(f"--size expects HxW or one integer, got '{raw}'")
    if len(vals) == 1:
        return vals[0], vals[0]
    if len(vals) == 2:
        return vals[0], vals[1]
    raise data_mod.DataError(f"--size expects HxW or one integer, got '{raw}'")


# --------------------------------------------------------------------------
# Subcommand bodies
# --------------------------------------------------------------------------


def _cmd_describe(args) -> int:
    config = load_config(args.config)
    total, rows = count_params(config)
    print(layer_table_text(rows))
    print(f"pathways: {len(config.pathways)}  connectivity: {config.connectivity}  "
          f"upsampling: {config.upsample_mode}")
    print(f"total parameters: {total:,} ({format_millions(total)})")
    return 0


def _cmd_gradcheck(args) -> int:
    failed = False
    if args.mode == "ops":
        threshold = 1e-6 if args.threshold is None else args.threshold
        print(f"per-op finite-difference audit, {args.seeds} restarts, "
              f"threshold {threshold:g}")
        for kind, make in standard_gradcheck_cases():
            worst = 0.0
            for s in range(args.seeds):
                rng = make_rng(args.seed, STREAM_CHECK, s)
                inputs, attrs = make(rng)
                err = grad_check(kind, inputs, attrs=attrs, seed=args.seed + s)
                worst = max(worst, err)
            status = "ok" if worst < threshold else "FAIL"
            if worst >= threshold:
                failed = True
            print(f"  {kind:<14} max rel err {worst:.3e}  {status}")
    else:
        threshold = 1e-4 if args.threshold is None else args.threshold
        print(f"end-to-end audit on a tiny 2-pathway cascade, "
              f"threshold {threshold:g}")
        for conn in ("shared-encoder", "causal", "dense"):
            err = tiny_cascade_check(conn, seed=args.seed)
            status = "ok" if err < threshold else "FAIL"
            if err >= threshold:
                failed = True
            print(f"  {conn:<14} max rel err {err:.3e}  {status}")
    if failed:
        print("gradient check FAILED")
        return 2
    print("gradient check passed")
    return 0


def tiny_cascade_check(connectivity: str, seed: int = 0,
                       probes_per_param: int = 2, eps: float = 1e-5) -> float:
    """End-to-end gradient error of a mini 2-pathway model in float64.

    Uses a smaller step than the per-op audits: a parameter such as an
    early-layer bias shifts thousands of downstream activations at once, so
    the probe interval must be narrow for the network to stay on one linear
    piece (the checker skips coordinates where it does not).
    """
    from .model import PathwaySpec
    config = UmcConfig(
        in_channels=3, filters=TINY_FILTERS,
        pathways=(PathwaySpec("denoise", 3, "regression"),
                  PathwaySpec("segment", 5, "classification")),
        connectivity=connectivity, upsample_mode="bilinear")
    model = build(config)
    init_params(model, seed, dtype=np.float64)
    trainer_mod.attach_losses(model)
    rng = make_rng(seed, STREAM_CHECK, 7)
    # The check needs a generic point in parameter space. Zero biases leave
    # dead-receptive-field pixels exactly ON the ReLU kink where no finite
    # step is clean, and the deliberately small training-time head scale
    # shrinks upstream gradients until f64 roundoff in the loss difference
    # dominates the quotient. Redraw both at order-one scale.
    for name, shape in model.param_shapes.items():
        if name.endswith(".bias"):
            model.graph.set_param(name, rng.normal(0.0, 0.05, size=shape))
        elif name.endswith("head.weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            model.graph.set_param(name, kaiming_init(fan_in, shape, rng,
                                                     np.float64))
    bindings = {
        "input": rng.standard_normal((1, 3, 16, 16)),
        "target:denoise": rng.standard_normal((1, 3, 16, 16)),
        "labels:segment": rng.integers(0, 5, size=(1, 16, 16)),
    }
    return graph_grad_check(model.graph, bindings, "loss:total", eps=eps,
                            probes_per_param=probes_per_param, seed=seed)


def _cmd_gen_data(args) -> int:
    if os.path.isdir(args.out) and os.listdir(args.out) and not args.force:
        raise data_mod.DataError(
            f"output directory {args.out} is not empty (use --force)")
    h, w = _parse_size(args.size)
    config = data_mod.DataConfig(
        n_samples=args.n, height=h, width=w, n_classes=args.classes,
        n_categories=args.categories, seed=args.seed).validate()
    samples = data_mod.gen_synthetic(
        config, data_mod.NoiseSpec(args.sigma, seed=args.seed))
    data_mod.save_dataset(args.out, samples, config, args.sigma)
    print(f"wrote {len(samples)} samples to {args.out}")
    if samples:
        hist = data_mod.class_pixel_histogram(samples, args.classes)
        total = int(hist.sum())
        for cls, count in enumerate(hist):
            print(f"  class {cls}: {int(count):>10} px ({count / total:.2%})")
    return 0


def _cmd_train(args) -> int:
    config = load_config(args.config)
    samples, meta = data_mod.load_dataset(args.data)
    bindings = trainer_mod.resolve_bindings(config, _parse_bindings(args.bind))
    trainer_mod.check_class_counts(config, bindings, meta)
    tc = trainer_mod.TrainConfig(
        epochs=args.epochs, max_steps=args.max_steps, batch_size=args.batch_size,
        lr=args.lr, beta1=args.beta1, beta2=args.beta2, seed=args.seed,
        sigma=float(meta.get("sigma", 0.0)), bindings=bindings)
    result = trainer_mod.train(config, tc, samples)
    mean, std = result.stats
    extra = {
        "mean": [float(v) for v in mean],
        "std": [float(v) for v in std],
        "bindings": result.bindings,
        "sigma": tc.sigma,
        "input_field": tc.input_field,
    }
    ckpt_io.save_checkpoint(args.out, config, result.params,
                            optimizer=result.optimizer, extra=extra)
    runlog_path = args.runlog or args.out + ".runlog.csv"
    with open(runlog_path, "w", encoding="utf-8") as f:
        f.write(result.runlog.csv())
    last = result.runlog.rows[-1]
    print(f"trained {last[0] + 1} steps, final joint loss {last[1]:.6g}")
    print(f"checkpoint: {args.out}")
    print(f"runlog: {runlog_path}")
    return 0


def _load_ckpt_stats(ckpt):
    extra = ckpt.extra or {}
    if "mean" not in extra or "std" not in extra:
        raise ckpt_io.CheckpointError(
            "checkpoint lacks normalization statistics")
    return (np.asarray(extra["mean"], dtype=np.float64),
            np.asarray(extra["std"], dtype=np.float64))


def _cmd_eval(args) -> int:
    ckpt = ckpt_io.load_checkpoint(args.ckpt)
    samples, meta = data_mod.load_dataset(args.data)
    stats = _load_ckpt_stats(ckpt)
    bindings = trainer_mod.resolve_bindings(ckpt.config,
                                            ckpt.extra.get("bindings"))
    reports = trainer_mod.evaluate(
        ckpt.config, ckpt.params, stats, samples, bindings,
        input_field=ckpt.extra.get("input_field", "noisy"),
        run_id=os.path.basename(args.ckpt),
        sigma=float(ckpt.extra.get("sigma", meta.get("sigma", 0.0))),
        meta=meta)
    from .metrics import MetricsReport
    print(MetricsReport.CSV_HEADER)
    for p in ckpt.config.pathways:
        print(reports[p.name].csv_row())
    return 0


def _cmd_infer(args) -> int:
    ckpt = ckpt_io.load_checkpoint(args.ckpt)
    image = data_mod.load_ppm(args.image)
    divisor = 2 ** ckpt.config.depth
    _, h, w = image.shape
    for dim, val in (("H", h), ("W", w)):
        if val % divisor:
            raise GraphError(f"{dim}={val} not divisible by {divisor}; "
                             "the cascade needs both spatial dims divisible "
                             f"by 2^depth = {divisor}")
    stats = _load_ckpt_stats(ckpt)
    model = build(ckpt.config)
    ckpt_io.apply_to_model(ckpt, model)
    mean, std = stats
    x = data_mod.normalize(image, mean, std)[None]
    outs = model.graph.forward({"input": x})
    written = []
    for p in ckpt.config.pathways:
        out = outs[p.name][0]
        if p.task == "regression":
            img = np.clip(data_mod.denormalize(out, mean, std), 0, 255)
            path = f"{args.out_prefix}_denoised.ppm"
            data_mod.save_ppm(path, img)
        else:
            path = f"{args.out_prefix}_{p.name}_labels.pgm"
            data_mod.save_pgm(path, np.argmax(out, axis=0).astype(np.uint8))
        written.append(path)
    for path in written:
        print(f"wrote {path}")
    return 0


_COMMANDS = {
    "describe": _cmd_describe,
    "gradcheck": _cmd_gradcheck,
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    print(f"seed: {getattr(args, 'seed', 0)}")
    try:
        return _COMMANDS[args.cmd](args)
    except (ValueError, GraphError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except RuntimeError as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
