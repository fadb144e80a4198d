"""Command-line interface: synth / train / estimate / eval / grad-check / benchmark."""

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import dve as dv
from . import features as ft
from . import fileio as io
from . import gradcheck as gc
from . import metrics as mt
from . import synth as sy
from . import trainer as tr
from . import transport as tp
from .core import FlowField
from .errors import ConfigError, FFEError, FileFormatError

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

CASE_BUILDERS = {
    "uniform": sy.uniform_case,
    "rotation": lambda **kw: sy.rotation_case(center=(0.5, 0.5, 0.5), **kw),
    "beltrami": sy.beltrami_case,
}


def worker_count():
    """Worker threads for per-sample jobs, capped by FFE_THREADS."""
    cap = os.environ.get("FFE_THREADS")
    default = min(4, os.cpu_count() or 1)
    if cap is None:
        return default
    try:
        return max(1, int(cap))
    except ValueError:
        raise ConfigError(f"FFE_THREADS must be an integer, got {cap!r}")


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog="ffe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic frame pairs with ground truth")
    p.add_argument("--case", choices=sorted(CASE_BUILDERS), required=True)
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--dt", type=float, default=None, help="frame interval (case default if omitted)")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--format", choices=["text", "binary"], default="text")
    _add_common(p)

    p = sub.add_parser("train", help="self-supervised training on pair files")
    p.add_argument("--data", nargs="+", required=True, help="pair files or directories")
    p.add_argument("--out", required=True, help="checkpoint path")
    # unset flags fall back to the config file, then to the built-in defaults
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--fraction", type=float, default=None)
    p.add_argument("--lambda-div", type=float, default=None)
    p.add_argument("--sinkhorn-iters", type=int, default=None)
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--log", default=None, help="write per-epoch records here")
    _add_common(p)

    p = sub.add_parser("estimate", help="predict flow for one pair file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-dve", action="store_true")
    p.add_argument("--top-l", type=int, default=tp.DEFAULT_TOP_L)
    p.add_argument("--sinkhorn-iters", type=int, default=tp.DEFAULT_INFER_ITERS)
    p.add_argument("--dve-steps", type=int, default=dv.DEFAULT_STEPS)
    p.add_argument("--dve-lr", type=float, default=dv.DEFAULT_LR)
    p.add_argument("--trace", action="store_true", help="also write the refinement trace")
    _add_common(p)

    p = sub.add_parser("eval", help="score a predicted flow against ground truth")
    p.add_argument("--flow", required=True)
    p.add_argument("--input", required=True, help="pair file carrying ground truth")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--nds-k", type=int, default=mt.DEFAULT_NDS_K)

    p = sub.add_parser("grad-check", help="finite-difference checks of every gradient")
    p.add_argument("--which", nargs="*", default=None, choices=sorted(gc.ALL_CHECKS))
    p.add_argument("--seeds", type=int, nargs="*", default=[0, 1, 2])

    p = sub.add_parser("benchmark", help="synth + train + estimate + eval over a case matrix")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--cases", nargs="+", default=sorted(CASE_BUILDERS))
    p.add_argument("--train-pairs", type=int, default=4)
    p.add_argument("--test-pairs", type=int, default=2)
    p.add_argument("--n", type=int, default=128)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--dve-steps", type=int, default=dv.DEFAULT_STEPS)
    _add_common(p)

    return parser


def _make_case(name, n, dt, seed):
    builder = CASE_BUILDERS[name]
    kwargs = {"n": n, "seed": seed}
    if dt is not None:
        kwargs["dt"] = dt
    return builder(**kwargs)


def cmd_synth(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".ffpb" if args.format == "binary" else ".ffp"
    for i in range(args.count):
        case = _make_case(args.case, args.n, args.dt, args.seed + i)
        fx, fy, gt = sy.generate_pair(case)
        record = io.FramePairRecord(
            frame_x=fx,
            frame_y=fy,
            gt_flow=gt,
            metadata={"case": args.case, "seed": str(case.seed), "units": "box"},
        )
        io.save_pair(record, out / f"{args.case}_{i:04d}{ext}")
    print(f"wrote {args.count} pair(s) to {out}")
    return EXIT_OK


def _collect_pairs(paths):
    files = []
    for p in paths:
        path = Path(p)
        if path.is_dir():
            files.extend(sorted(path.glob("*.ffp")) + sorted(path.glob("*.ffpb")))
        elif path.exists():
            files.append(path)
        else:
            raise FileFormatError("no such input", path=str(path))
    if not files:
        raise FileFormatError(f"no pair files found under {paths}")
    return [io.load_pair(f) for f in files]


def cmd_train(args):
    records = _collect_pairs(args.data)
    cfg = tr.TrainConfig(seed=args.seed)
    if args.config:
        sections = io.load_config(args.config)
        if "train" in sections:
            io.apply_config(cfg, sections["train"])
        if "losses" in sections:
            io.apply_config(cfg.loss_weights, sections["losses"])
        if "ot" in sections:
            io.apply_config(cfg.ot, sections["ot"])
    # explicit flags override anything the config file set
    for flag, field in (
        ("epochs", "epochs"),
        ("batch_size", "batch_size"),
        ("lr", "learning_rate"),
        ("fraction", "data_fraction"),
    ):
        value = getattr(args, flag)
        if value is not None:
            setattr(cfg, field, value)
    if args.sinkhorn_iters is not None:
        cfg.ot.sinkhorn_iters = args.sinkhorn_iters
    if args.lambda_div is not None:
        cfg.loss_weights.lambda_div = args.lambda_div
    result = tr.train(tr.to_train_samples(records), cfg)
    ft.save_params(result.params, args.out)
    if args.log:
        with open(args.log, "w", encoding="utf-8") as f:
            for stats in result.trace:
                f.write(stats.to_record() + "\n")
    final = result.trace[-1]
    print(f"trained {cfg.epochs} epochs on {len(records)} pairs; final loss {final.total:.6g}")
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def estimate_record(record, params, ot_cfg, dve_cfg, use_dve=True):
    """Full inference for one record: initial flow, then optional refinement.

    Returns (flow ndarray, soft plan, trace or None).
    """
    soft = tr.forward_pipeline(record.frame_x, record.frame_y, params, ot_cfg)
    if not use_dve:
        return soft.flow.data.copy(), soft, None
    trace = dv.refine(
        record.frame_x, soft.flow.data, soft.confidences.data, record.frame_y, dve_cfg
    )
    return trace.flow, soft, trace


def cmd_estimate(args):
    ckpt = Path(args.checkpoint)
    inp = Path(args.input)
    if not ckpt.exists():
        print(f"error: checkpoint not found: {ckpt}", file=sys.stderr)
        return EXIT_USAGE
    if not inp.exists():
        print(f"error: input not found: {inp}", file=sys.stderr)
        return EXIT_USAGE
    params = ft.load_params(ckpt)
    record = io.load_pair(inp)
    ot_cfg = tp.OTConfig(sinkhorn_iters=args.sinkhorn_iters, top_l=args.top_l)
    dve_cfg = dv.DveConfig(steps=args.dve_steps, learning_rate=args.dve_lr)
    flow, _, trace = estimate_record(record, params, ot_cfg, dve_cfg, use_dve=not args.no_dve)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.save_flow(record.frame_x, FlowField(flow), out / "flow.ffp")
    if trace is not None and args.trace:
        with open(out / "trace.txt", "w", encoding="utf-8") as f:
            for val in trace.objectives:
                f.write(f"{val:.17g}\n")
    if record.gt_flow is not None:
        report = mt.evaluate(FlowField(flow), record.gt_flow)
        (out / "metrics.txt").write_text(report.to_kv(), encoding="utf-8")
        (out / "metrics.rec").write_text(report.to_record() + "\n", encoding="utf-8")
        print(report.to_record())
    print(f"flow written to {out / 'flow.ffp'}")
    return EXIT_OK


def cmd_eval(args):
    frame, flow = io.load_flow(Path(args.flow))
    record = io.load_pair(Path(args.input))
    if record.gt_flow is None:
        print("error: input pair has no ground truth", file=sys.stderr)
        return EXIT_USAGE
    report = mt.evaluate(flow, record.gt_flow)
    scores, mnds = mt.nds(frame, flow, k=args.nds_k)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.txt").write_text(report.to_kv() + f"mnds={mnds!r}\n", encoding="utf-8")
    (out / "metrics.rec").write_text(report.to_record() + f"\tmnds={mnds!r}\n", encoding="utf-8")
    print(report.to_record() + f"\tmnds={mnds!r}")
    return EXIT_OK


def cmd_grad_check(args):
    worst = gc.run_all(seeds=args.seeds, which=args.which)
    failed = False
    for name, err in worst.items():
        ok = err < gc.TOLERANCE
        failed |= not ok
        print(f"{name}: max_rel_error={err:.3e} [{'PASS' if ok else 'FAIL'}]")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_benchmark(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    train_records = []
    tests = {}
    for case_name in args.cases:
        for i in range(args.train_pairs):
            case = _make_case(case_name, args.n, None, args.seed + i)
            fx, fy, gt = sy.generate_pair(case)
            train_records.append(io.FramePairRecord(frame_x=fx, frame_y=fy, gt_flow=gt))
        tests[case_name] = []
        for i in range(args.test_pairs):
            case = _make_case(case_name, args.n, None, args.seed + 10_000 + i)
            fx, fy, gt = sy.generate_pair(case)
            tests[case_name].append(io.FramePairRecord(frame_x=fx, frame_y=fy, gt_flow=gt))

    cfg = tr.TrainConfig(epochs=args.epochs, seed=args.seed)
    result = tr.train(tr.to_train_samples(train_records), cfg)
    ft.save_params(result.params, out / "model.ffe")

    ot_cfg = tp.OTConfig()
    dve_cfg = dv.DveConfig(steps=args.dve_steps)

    jobs = []
    for case_name in args.cases:
        for i, record in enumerate(tests[case_name]):
            for variant, use_dve in (("dve", True), ("no-dve", False)):
                jobs.append((case_name, i, variant, record, use_dve))

    def run_job(job):
        case_name, i, variant, record, use_dve = job
        flow, _, _ = estimate_record(record, result.params, ot_cfg, dve_cfg, use_dve=use_dve)
        report = mt.evaluate(FlowField(flow), record.gt_flow)
        return (case_name, i, variant, report)

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(run_job, jobs))
    else:
        outputs = [run_job(j) for j in jobs]

    for case_name, i, variant, report in outputs:
        rows.append(f"case={case_name}\tpair={i}\tvariant={variant}\t" + report.to_record())
    table = "\n".join(rows) + "\n"
    (out / "metrics_table.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    print(f"table written to {out / 'metrics_table.txt'}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "estimate": cmd_estimate,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
    "benchmark": cmd_benchmark,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (FileFormatError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FFEError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
