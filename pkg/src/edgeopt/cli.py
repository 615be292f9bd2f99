"""``edgeopt`` command line.

Every subcommand accepts ``--json`` (machine-readable result on stdout) and
``--threads`` (default ``$EDGEOPT_THREADS`` or 1).  The exit code is 0 iff
the command succeeded; failures print ``error [stage]: message`` on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys

import numpy as np

from . import __version__, exits, metrics
from .data import gen_synthetic, load_dataset, save_dataset
from .engine import count_macs, forward_array
from .errors import EdgeOptError, StageError
from .harness import env_threads, evaluate_graph, load_config, run_experiment, threshold_grid
from .modelio import load_model, save_model
from .models import ARCHITECTURES
from .prune import PruneConfig, prune_structured
from .quant import QuantPlan, apply_dq, apply_ptq, calibrate, dq_plan

EXIT_OK = 0
EXIT_FAILED = 1


def _shape(text):
    try:
        return tuple(int(s) for s in text.replace("x", ",").split(",") if s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}") from None


def _grid(text):
    """``a:b:n`` (linspace) or a comma list."""
    if ":" in text:
        a, b, n = text.split(":")
        return [float(t) for t in np.linspace(float(a), float(b), int(n))]
    return [float(t) for t in text.split(",") if t]


def _emit(args, result: dict, text: str = None):
    if args.json:
        print(json.dumps(result, indent=2, default=_jsonable))
    else:
        print(text if text is not None else "\n".join(f"{k}: {v}" for k, v in result.items()))


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, float) and math.isinf(o):
        return "inf"
    raise TypeError(f"not serializable: {type(o).__name__}")


def _load_cascade_or_model(args):
    if getattr(args, "cascade", None):
        return exits.load_cascade(args.cascade), None
    return None, load_model(args.model)


# --------------------------------------------------------------------------- subcommands

def cmd_gen_data(args):
    ds = gen_synthetic(args.classes, args.samples, args.shape, args.seed, args.separation, args.noise,
                       args.difficulty, args.global_separation, args.sample_seed)
    desc = save_dataset(ds, args.out, args.format)
    stem = os.path.splitext(args.out)[0]
    _emit(args, {"descriptor": stem + ".json", "samples": len(ds), "num_classes": ds.num_classes,
                 "shape": list(ds.images.shape[1:]), "format": desc["format"]})


def cmd_build_model(args):
    kwargs = {"input_shape": (1,) + tuple(args.input_shape), "num_classes": args.classes, "seed": args.seed}
    graph = ARCHITECTURES[args.arch](**kwargs)
    if args.fit_on:
        graph = exits.fit_classifier(graph, load_dataset(args.fit_on), epochs=args.epochs, seed=args.seed)
    size = save_model(graph, args.out)
    cost = count_macs(graph)
    _emit(args, {"model": args.out, "bytes": size, "layers": len(graph.layers), "params": cost.param_count,
                 "total_macs": cost.total_macs})


def cmd_train_exits(args):
    graph = load_model(args.model)
    cascade = exits.attach_exits(graph, args.attach, args.preset, args.seed, args.threshold,
                                 args.block_channels)
    cascade = exits.train_exit_heads(cascade, load_dataset(args.train), args.epochs, args.lr, args.seed,
                                     args.batch_size)
    manifest = exits.save_cascade(cascade, args.out)
    _emit(args, {"cascade": args.out, "heads": [
        {"attach_point": h.attach_point, "loss_first": h.loss_history[0], "loss_last": h.loss_history[-1]}
        for h in cascade.heads], "segments": manifest["segments"]})


def cmd_prune(args):
    graph = load_model(args.model)
    pruned, report = prune_structured(graph, PruneConfig(args.pr, args.cg, not args.no_protect_residual))
    size = save_model(pruned, args.out)
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(report.to_json())
    res = report.to_dict()
    res.update({"model": args.out, "bytes": size})
    _emit(args, res, f"{args.out}: {report.params_before} -> {report.params_after} params "
                     f"({report.compression_rate:.2f}x)")


def cmd_calibrate(args):
    graph = load_model(args.model)
    ds = load_dataset(args.calib)
    if args.samples:
        ds = ds.subset(slice(0, args.samples))
    plan = calibrate(graph, [ds.images[i:i + 1] for i in range(len(ds))], args.kinds)
    plan.save(args.out)
    _emit(args, {"plan": args.out, "tensors": len(plan.calibration_summary),
                 "quantized_kinds": sorted(k.value for k in plan.quantized_kinds)})


def cmd_quantize(args):
    mode = args.mode.upper()
    if args.cascade:
        cascade = exits.load_cascade(args.cascade)
        calib = load_dataset(args.calib) if args.calib else None
        q = exits.quantize_cascade(cascade, mode, args.kinds, calib)
        manifest = exits.save_cascade(q, args.out)
        _emit(args, {"cascade": args.out, "quantization": manifest["quantization"]})
        return
    graph = load_model(args.model)
    if mode == "PTQ":
        if args.plan:
            plan = QuantPlan.load(args.plan)
        elif args.calib:
            ds = load_dataset(args.calib)
            plan = calibrate(graph, [ds.images[i:i + 1] for i in range(len(ds))], args.kinds)
        else:
            raise EdgeOptError("PTQ needs --plan or --calib")
        q = apply_ptq(graph, plan)
    else:
        plan = dq_plan(graph, args.kinds)
        q = apply_dq(graph, args.kinds)
    size = save_model(q, args.out)
    _emit(args, {"model": args.out, "mode": mode, "bytes": size,
                 "quantized_layers": [layer.name for layer in q.layers if layer.quant is not None]})


def cmd_sweep(args):
    cascade = exits.load_cascade(args.cascade)
    ds = load_dataset(args.eval)
    grid = args.grid or threshold_grid({"num": 50}, cascade.num_classes)
    budget = math.inf if args.budget is None else args.budget
    rep = exits.sweep_thresholds(cascade, ds, grid, budget, args.threads)
    for path, text in ((args.out_json, rep.to_json()), (args.out_csv, rep.to_csv()), (args.plot, rep.plot_data())):
        if path:
            with open(path, "w") as fh:
                fh.write(text)
    if args.apply:
        idx = rep.acc_opt if args.apply == "acc_opt" else rep.inf_opt
        exits.save_cascade(cascade.with_thresholds([rep.grid[idx].threshold] * len(cascade.heads)), args.cascade)
    a, i = rep.acc_opt_point, rep.inf_opt_point
    _emit(args, rep.to_dict(),
          f"acc_opt: T={a.threshold:.6g} acc={a.accuracy:.2f}% exits={a.early_exit_rate:.2f}% "
          f"macs={a.expected_macs:.0f}\n"
          f"inf_opt: T={i.threshold:.6g} acc={i.accuracy:.2f}% exits={i.early_exit_rate:.2f}% "
          f"macs={i.expected_macs:.0f}")


def cmd_infer(args):
    cascade, graph = _load_cascade_or_model(args)
    if args.input:
        x = np.load(args.input).astype(np.float32)
        label = None
    else:
        ds = load_dataset(args.data)
        x, label = ds.images[args.index:args.index + 1], int(ds.labels[args.index])
    if x.ndim == 3:
        x = x[None]
    if cascade is not None:
        pred = exits.cascade_infer(cascade, x, on_untrained="fail")
        res = {"label": pred.label, "probs": pred.probs, "exit_index": pred.exit_index,
               "early": pred.exit_index < len(cascade.heads), "macs": pred.macs_executed,
               "entropies": pred.entropies, "segment_latencies": pred.segment_latencies}
    else:
        probs = exits.output_probs(graph, forward_array(graph, x))[0]
        res = {"label": int(np.argmax(probs)), "probs": probs, "macs": count_macs(graph).total_macs}
    if label is not None:
        res["true_label"] = label
    _emit(args, res, f"predicted {res['label']}" + (f" (true {label})" if label is not None else ""))


def cmd_eval(args):
    cascade, graph = _load_cascade_or_model(args)
    ds = load_dataset(args.eval)
    if cascade is not None:
        traces = exits.trace_dataset(cascade, ds.images, args.threads)
        recs = exits.records_for(traces, ds.labels, cascade.thresholds, cascade.segment_macs(),
                                 cascade.head_macs())
        size = cascade.serialized_bytes
        threshold = cascade.thresholds[0] if cascade.thresholds else None
    else:
        recs = evaluate_graph(graph, ds)
        size = os.path.getsize(args.model)
        threshold = None
    base_recs = base_bytes = base_total = None
    if args.baseline:
        base = load_model(args.baseline)
        base_recs = evaluate_graph(base, ds)
        base_bytes = os.path.getsize(args.baseline)
        base_total = sum(r.latency for r in base_recs)
    name = args.name or os.path.basename(os.path.normpath(args.cascade or args.model))
    s = metrics.summarize(name, recs, base_recs, base_bytes, size, base_total, cascade=cascade is not None,
                          threshold=threshold)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(metrics.summaries_to_json([s]))
    _emit(args, s.to_dict(), _table([s.display_row()]))


def _table(rows):
    cols = list(metrics.COLUMNS)
    cells = [[str(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def cmd_report(args):
    rows = []
    for path in args.summaries:
        with open(path) as fh:
            data = json.load(fh)
        rows.extend(data if isinstance(data, list) else [data])
    display = []
    for r in rows:
        d = dict(r)
        for k, v in d.items():
            if isinstance(v, float) and k != "threshold":
                d[k] = metrics.round2(v)
        display.append(d)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(metrics.COLUMNS), lineterminator="\n")
            w.writeheader()
            w.writerows(display)
    _emit(args, {"rows": rows}, _table(display))


def cmd_run(args):
    cfg = load_config(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    if args.threads_given:
        cfg.threads = args.threads
    res = run_experiment(cfg)
    _emit(args, {"output_dir": res.output_dir, "stages": res.stages, "summary": res.summary.to_dict(),
                 "artifacts": res.artifacts}, _table([r.display_row() for r in res.rows]))


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="print a JSON result on stdout")
    common.add_argument("--threads", type=int, default=None, help="parallel evaluation threads (default 1)")

    p = argparse.ArgumentParser(prog="edgeopt", description="Pruning, quantization and early-exit toolkit.")
    p.add_argument("--version", action="version", version=f"edgeopt {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="write a seeded synthetic dataset")
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--samples", type=int, default=400)
    s.add_argument("--shape", type=_shape, default=(3, 16, 16), help="C,H,W")
    s.add_argument("--seed", type=int, default=0, help="fixes the class structure")
    s.add_argument("--sample-seed", type=int, default=None, help="redraw samples of the same classes")
    s.add_argument("--separation", type=float, default=6.0)
    s.add_argument("--global-separation", type=float, default=0.0)
    s.add_argument("--difficulty", type=float, default=0.0)
    s.add_argument("--noise", type=float, default=1.0)
    s.add_argument("--format", choices=("csv", "idx"), default=None)
    s.add_argument("--out", required=True, help="data path; a .json descriptor is written next to it")
    s.set_defaults(func=cmd_gen_data, stage="gen-data")

    s = sub.add_parser("build-model", parents=[common], help="build a reference backbone")
    s.add_argument("--arch", choices=sorted(ARCHITECTURES), default="residual")
    s.add_argument("--input-shape", type=_shape, default=(3, 16, 16), help="C,H,W")
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--fit-on", help="dataset descriptor used to fit the classifier")
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_model, stage="build-model")

    s = sub.add_parser("train-exits", parents=[common], help="attach exit heads and train them")
    s.add_argument("--model", required=True)
    s.add_argument("--train", required=True)
    s.add_argument("--attach", required=True, type=lambda t: t.split(","), help="comma-separated tensors")
    s.add_argument("--preset", choices=exits.HEAD_PRESETS, default="simple")
    s.add_argument("--block-channels", type=int, default=None)
    s.add_argument("--threshold", type=float, default=0.0)
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--lr", type=float, default=0.1)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="cascade directory")
    s.set_defaults(func=cmd_train_exits, stage="train-exits")

    s = sub.add_parser("prune", parents=[common], help="L1 structured filter pruning")
    s.add_argument("--model", required=True)
    s.add_argument("--pr", type=float, required=True)
    s.add_argument("--cg", type=int, default=1)
    s.add_argument("--no-protect-residual", action="store_true")
    s.add_argument("--report")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prune, stage="prune")

    s = sub.add_parser("calibrate", parents=[common], help="derive a PTQ plan from calibration data")
    s.add_argument("--model", required=True)
    s.add_argument("--calib", required=True)
    s.add_argument("--kinds", default="full-graph", help="preset name or comma list of layer kinds")
    s.add_argument("--samples", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_calibrate, stage="calibrate")

    s = sub.add_parser("quantize", parents=[common], help="apply PTQ or DQ to a model or cascade")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--model")
    src.add_argument("--cascade")
    s.add_argument("--mode", choices=("ptq", "dq", "PTQ", "DQ"), required=True)
    s.add_argument("--plan")
    s.add_argument("--calib")
    s.add_argument("--kinds", default="full-graph")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_quantize, stage="quantize")

    s = sub.add_parser("sweep", parents=[common], help="threshold sweep with acc_opt / inf_opt selection")
    s.add_argument("--cascade", required=True)
    s.add_argument("--eval", required=True)
    s.add_argument("--grid", type=_grid, default=None, help="'a:b:n' or comma list (default 50 points on [0, ln n])")
    s.add_argument("--budget", type=float, default=None, help="accuracy budget for inf_opt (default unbounded)")
    s.add_argument("--out-json")
    s.add_argument("--out-csv")
    s.add_argument("--plot", help="gnuplot data file")
    s.add_argument("--apply", choices=("acc_opt", "inf_opt"), help="write the chosen threshold into the cascade")
    s.set_defaults(func=cmd_sweep, stage="sweep")

    s = sub.add_parser("infer", parents=[common], help="classify one sample")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--model")
    src.add_argument("--cascade")
    inp = s.add_mutually_exclusive_group(required=True)
    inp.add_argument("--input", help=".npy array of shape (C,H,W) or (1,C,H,W)")
    inp.add_argument("--data", help="dataset descriptor")
    s.add_argument("--index", type=int, default=0)
    s.set_defaults(func=cmd_infer, stage="infer")

    s = sub.add_parser("eval", parents=[common], help="batch-1 evaluation and metrics summary")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--model")
    src.add_argument("--cascade")
    s.add_argument("--eval", required=True)
    s.add_argument("--baseline", help="baseline model for loyalty, compression and speed-up")
    s.add_argument("--name")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval, stage="eval")

    s = sub.add_parser("report", parents=[common], help="merge summary JSON files into one table")
    s.add_argument("summaries", nargs="+")
    s.add_argument("--csv")
    s.set_defaults(func=cmd_report, stage="report")

    s = sub.add_parser("run", parents=[common], help="run a full experiment from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--output-dir")
    s.set_defaults(func=cmd_run, stage="run")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.threads_given = args.threads is not None
    try:
        if args.threads is None:
            args.threads = env_threads()
        if args.threads < 1:
            raise EdgeOptError("--threads must be >= 1")
        args.func(args)
    except StageError as e:
        print(f"error [{e.stage}]: {e.cause}", file=sys.stderr)
        return EXIT_FAILED
    except (EdgeOptError, ValueError, KeyError, OSError) as e:
        print(f"error [{args.stage}]: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
