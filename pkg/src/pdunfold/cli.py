"""Command line tying the pipeline together.

Subcommands: demo-data, degrade, extract-patches, train, restore,
evaluate, gradcheck, solve-cp.  Every command writes a JSON manifest next
to its outputs (command, arguments, inputs, outputs, version, timing) and
is deterministic for a fixed seed.  Exit codes: 0 success, 1 invariant or
threshold failure, 2 usage error, 3 I/O error.
"""

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .backprop import gradient_check
from .cp import (CPProblem, CPSettings, StepSizeError, cp_solve,
                 default_settings, objective, tv_analysis_operator)
from .imaging import (DegradationSpec, PatchPairSet, build_pair_set, degrade,
                      list_images, load_image, psnr, restore, synthetic_image,
                      write_image)
from .network import load_checkpoint, save_checkpoint
from .training import (GradientError, TrainConfig, init_state, load_state,
                       save_state, train)

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_IO = 3


class UsageError(Exception):
    """Bad arguments or config content; maps to exit code 2."""


def _write_manifest(out_dir, command, args, inputs, outputs, started,
                    extra=None):
    record = {
        "command": command,
        "tool_version": __version__,
        "arguments": {k: v for k, v in sorted(vars(args).items())
                      if k != "func"},
        "inputs": inputs,
        "outputs": outputs,
        "wall_seconds": round(time.perf_counter() - started, 3),
        "written_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    if extra:
        record.update(extra)
    path = os.path.join(out_dir, command.replace("-", "_") + "_manifest.json")
    with open(path, "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _line_plot(values, path, width=640, height=400, margin=24):
    """Render a plain line plot of a 1D series to a grayscale image file."""
    from .imaging import ImageTensor
    canvas = np.full((height, width), 255.0)
    canvas[margin, margin:width - margin] = 0.0
    canvas[height - margin, margin:width - margin] = 0.0
    canvas[margin:height - margin, margin] = 0.0
    values = np.asarray(values, dtype=float)
    if values.size:
        lo, hi = float(values.min()), float(values.max())
        span = hi - lo if hi > lo else 1.0
        xs = np.linspace(margin, width - margin - 1, values.size)
        ys = (height - margin - 1) - (values - lo) / span * (height - 2 * margin - 2)
        for i in range(values.size - 1):
            steps = max(int(abs(xs[i + 1] - xs[i])) + int(abs(ys[i + 1] - ys[i])), 1)
            for t in np.linspace(0.0, 1.0, steps + 1):
                r = int(round(ys[i] + t * (ys[i + 1] - ys[i])))
                c = int(round(xs[i] + t * (xs[i + 1] - xs[i])))
                canvas[max(0, r - 1):r + 1, max(0, c - 1):c + 1] = 0.0
    write_image(ImageTensor(canvas), path)


def _parse_scenarios(text):
    """"3:25,5:75" -> [(3, 25.0), (5, 75.0)]."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            blur_s, alpha_s = part.split(":")
            out.append((int(blur_s), float(alpha_s)))
        except ValueError:
            raise UsageError(
                "bad scenario %r, expected BLUR:ALPHA like 3:25" % part)
    if not out:
        raise UsageError("no scenarios given")
    return out


def _load_clean_images(directory):
    paths = list_images(directory)
    if not paths:
        raise UsageError("no PGM/PNG images in %s" % directory)
    return paths, [load_image(p) for p in paths]


def cmd_demo_data(args):
    started = time.perf_counter()
    train_dir = os.path.join(args.out_dir, "train")
    test_dir = os.path.join(args.out_dir, "test")
    os.makedirs(train_dir, exist_ok=True)
    os.makedirs(test_dir, exist_ok=True)
    outputs = []
    for i in range(args.train_count):
        path = os.path.join(train_dir, "synth_%02d.pgm" % i)
        write_image(synthetic_image(args.side, seed=args.seed + i), path)
        outputs.append(path)
    for i in range(args.test_count):
        path = os.path.join(test_dir, "synth_%02d.pgm" % i)
        write_image(synthetic_image(args.side, seed=args.seed + 1000 + i), path)
        outputs.append(path)
    _write_manifest(args.out_dir, "demo-data", args, [], outputs, started)
    print("wrote %d train and %d test images under %s"
          % (args.train_count, args.test_count, args.out_dir))
    return EXIT_OK


def cmd_degrade(args):
    started = time.perf_counter()
    paths, images = _load_clean_images(args.in_dir)
    os.makedirs(args.out_dir, exist_ok=True)
    spec = DegradationSpec(args.blur, args.alpha, args.seed)
    rng = np.random.default_rng(args.seed)
    outputs, table = [], []
    for path, img in zip(paths, images):
        z = degrade(img, spec, rng=rng)
        stem = os.path.splitext(os.path.basename(path))[0]
        out_path = os.path.join(args.out_dir, stem + ".pgm")
        write_image(z, out_path)
        outputs.append(out_path)
        table.append({"image": os.path.basename(path),
                      "psnr_db": round(psnr(img, z.clipped()), 4)})
    mean_db = float(np.mean([row["psnr_db"] for row in table]))
    _write_manifest(args.out_dir, "degrade", args, paths, outputs, started,
                    extra={"per_image": table, "mean_psnr_db": round(mean_db, 4),
                           "scenario": spec.label()})
    print("degraded %d images (%s), mean PSNR %.2f dB"
          % (len(paths), spec.label(), mean_db))
    return EXIT_OK


def cmd_extract_patches(args):
    started = time.perf_counter()
    paths, images = _load_clean_images(args.clean_dir)
    spec = DegradationSpec(args.blur, args.alpha, args.seed)
    pairs = build_pair_set(images, spec, args.count, args.patch_side,
                           pipeline=args.pipeline, seed=args.seed)
    pairs.meta["sources"] = [os.path.basename(p) for p in paths]
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    pairs.save(args.out)
    _write_manifest(out_dir, "extract-patches", args, paths, [args.out],
                    started, extra={"patches": len(pairs),
                                    "pipeline": args.pipeline,
                                    "scenario": spec.label()})
    print("wrote %d patch pairs (%s, %s pipeline) to %s"
          % (len(pairs), spec.label(), args.pipeline, args.out))
    return EXIT_OK


def cmd_train(args):
    started = time.perf_counter()
    if args.config is None and args.resume is None:
        raise UsageError("give --config for a fresh run or --resume to continue")
    dataset = PatchPairSet.load(args.patches)
    if args.resume is not None:
        state = load_state(args.resume)
        if args.max_steps is not None:
            merged = state.config.to_dict()
            merged["max_steps"] = args.max_steps
            state.config = TrainConfig.from_dict(merged)
    else:
        try:
            with open(args.config) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError("config is not valid JSON: %s" % exc)
        if args.max_steps is not None:
            raw["max_steps"] = args.max_steps
        try:
            config = TrainConfig.from_dict(raw)
        except (TypeError, ValueError) as exc:
            raise UsageError("bad training config: %s" % exc)
        state = init_state(config, dataset.patch_side, len(dataset))

    best, report = train(None, dataset, state=state)

    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    meta = {
        "train_config": report["config"],
        "dataset_meta": dataset.meta,
        "best_step": report["best_step"],
        "best_window_loss": report["best_window_loss"],
        "final_loss": report["final_loss"],
        "backend": report["backend"],
    }
    save_checkpoint(best, args.out, meta=meta)
    outputs = [args.out]

    loss_csv = args.loss_csv or os.path.splitext(args.out)[0] + "_loss.csv"
    _write_csv(loss_csv, ["step", "loss"],
               [(i + 1, "%.10g" % v) for i, v in enumerate(report["loss_history"])])
    outputs.append(loss_csv)

    if args.state_out:
        save_state(state, args.state_out)
        outputs.append(args.state_out)

    if args.plot:
        plot_path = os.path.splitext(args.out)[0] + "_loss.pgm"
        _line_plot(report["loss_history"], plot_path)
        outputs.append(plot_path)

    _write_manifest(out_dir, "train", args, [args.patches], outputs, started,
                    extra={"best_step": report["best_step"],
                           "final_loss": report["final_loss"],
                           "steps_run": report["steps_run"],
                           "backend": report["backend"]})
    final = report["final_loss"]
    print("trained %d steps, final loss %s, best step %d, checkpoint %s"
          % (report["steps_run"],
             "n/a" if final is None else "%.4f" % final,
             report["best_step"], args.out))
    return EXIT_OK


def cmd_restore(args):
    started = time.perf_counter()
    net, meta = load_checkpoint(args.checkpoint)
    paths = list_images(args.in_dir)
    if not paths:
        raise UsageError("no PGM/PNG images in %s" % args.in_dir)
    os.makedirs(args.out_dir, exist_ok=True)
    reference = None
    if args.reference_dir:
        ref_paths = list_images(args.reference_dir)
        names = {os.path.splitext(os.path.basename(p))[0]: p for p in ref_paths}
        reference = names
    outputs, table = [], []
    for path in paths:
        img = load_image(path)
        out = restore(net, img, mode=args.mode, stride=args.stride).clipped()
        stem = os.path.splitext(os.path.basename(path))[0]
        out_path = os.path.join(args.out_dir, stem + "_restored.pgm")
        write_image(out, out_path)
        outputs.append(out_path)
        row = {"image": os.path.basename(path)}
        if reference and stem in reference:
            ref = load_image(reference[stem])
            row["psnr_db"] = round(psnr(ref, out), 4)
            row["input_psnr_db"] = round(psnr(ref, img), 4)
        table.append(row)
    _write_manifest(args.out_dir, "restore", args, paths, outputs, started,
                    extra={"per_image": table, "mode": args.mode,
                           "checkpoint_meta": meta})
    print("restored %d images (%s mode) into %s"
          % (len(paths), args.mode, args.out_dir))
    return EXIT_OK


def cmd_evaluate(args):
    started = time.perf_counter()
    net, meta = load_checkpoint(args.checkpoint)
    paths, images = _load_clean_images(args.test_dir)
    if args.scenarios:
        scenarios = _parse_scenarios(args.scenarios)
    else:
        ds_meta = meta.get("dataset_meta", {})
        blur, alpha = ds_meta.get("blur"), ds_meta.get("alpha")
        if not isinstance(blur, int) or alpha is None:
            raise UsageError("checkpoint lacks a training scenario; "
                             "pass --scenarios BLUR:ALPHA[,...]")
        scenarios = [(blur, float(alpha))]
    modes = (["independent", "averaged"] if args.mode == "both"
             else [args.mode])
    os.makedirs(args.out_dir, exist_ok=True)

    rows = []
    means = {}
    for blur, alpha in scenarios:
        spec = DegradationSpec(blur, alpha, args.seed)
        label = spec.label()
        rng = np.random.default_rng(args.seed)
        collected = {"degraded": []}
        for mode in modes:
            collected[mode] = []
        for path, img in zip(paths, images):
            name = os.path.basename(path)
            z = degrade(img, spec, rng=rng)
            db = psnr(img, z)
            rows.append((name, label, "degraded", "%.4f" % db))
            collected["degraded"].append(db)
            for mode in modes:
                stride = net.design.patch_side if mode == "independent" else args.stride
                out = restore(net, z, mode=mode,
                              stride=None if mode == "independent" else stride)
                db = psnr(img, out.clipped())
                rows.append((name, label, mode, "%.4f" % db))
                collected[mode].append(db)
        for method, values in collected.items():
            means[(method, label)] = float(np.mean(values))

    csv_path = os.path.join(args.out_dir, "evaluate.csv")
    _write_csv(csv_path, ["image", "scenario", "method", "psnr_db"], rows)
    labels = [DegradationSpec(b, a, 0).label() for b, a in scenarios]
    methods = ["degraded"] + modes
    summary_rows = [[m] + ["%.4f" % means[(m, lab)] for lab in labels]
                    for m in methods]
    summary_path = os.path.join(args.out_dir, "evaluate_summary.csv")
    _write_csv(summary_path, ["method"] + labels, summary_rows)
    outputs = [csv_path, summary_path]

    if args.plot:
        from .imaging import ImageTensor
        cell = 48
        grid = np.array([[means[(m, lab)] for lab in labels] for m in methods])
        lo, hi = grid.min(), grid.max()
        span = hi - lo if hi > lo else 1.0
        scaled = (grid - lo) / span * 255.0
        canvas = np.kron(scaled, np.ones((cell, cell)))
        plot_path = os.path.join(args.out_dir, "evaluate_heat.pgm")
        write_image(ImageTensor(canvas), plot_path)
        outputs.append(plot_path)

    _write_manifest(args.out_dir, "evaluate", args, [args.checkpoint] + paths,
                    outputs, started,
                    extra={"means": {"%s %s" % k: round(v, 4)
                                     for k, v in means.items()}})
    print("scenario means (dB):")
    for m in methods:
        print("  %-12s " % m +
              "  ".join("%s=%.2f" % (lab, means[(m, lab)]) for lab in labels))
    return EXIT_OK


def cmd_gradcheck(args):
    started = time.perf_counter()
    layer_counts = tuple(int(v) for v in args.layers.split(",") if v.strip())
    if not layer_counts:
        raise UsageError("--layers needs at least one layer count")
    report = gradient_check(seed=args.seed, trials=args.trials,
                            layer_counts=layer_counts, tol=args.tol,
                            step=args.step, inject_error=args.inject_error)
    if args.trials == 0:
        print("warning: 0 trials requested, PASS is vacuous")
    for line in report.summary_lines():
        print(line)
    os.makedirs(args.out_dir, exist_ok=True)
    report_path = os.path.join(args.out_dir, "gradcheck_report.json")
    with open(report_path, "w") as fh:
        json.dump({
            "passed": report.passed,
            "trials": report.trials,
            "tol": report.tol,
            "step": report.step,
            "max_rel": report.max_rel,
            "checked": report.checked,
            "noise_floor_passes": report.noise_floor_passes,
            "failures": report.failures,
            "wall_seconds": report.wall_seconds,
        }, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(args.out_dir, "gradcheck", args, [], [report_path], started,
                    extra={"passed": report.passed})
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_solve_cp(args):
    started = time.perf_counter()
    img = load_image(args.image)
    spec = DegradationSpec(args.blur, args.alpha, args.seed)
    op = spec.build_op(img.shape)
    z = degrade(img, spec, op=op)

    n = img.shape[0] * img.shape[1]
    if args.penalty == "tv":
        L = tv_analysis_operator(img.shape)
        if args.weight != 1.0:
            L = L * args.weight
    else:
        from scipy.sparse import csr_matrix
        L = csr_matrix((1, n))
    problem = CPProblem(op, z.pixels.ravel(), L)

    common = {"theta": args.theta, "max_iter": args.max_iter, "tol": args.tol}
    if args.tau is None and args.sigma is None:
        settings = default_settings(problem, **common)
    elif args.tau is not None and args.sigma is not None:
        settings = CPSettings(tau=args.tau, sigma=args.sigma, **common)
    else:
        raise UsageError("give both --tau and --sigma or neither")

    x, trace = cp_solve(problem, settings)

    from .imaging import ImageTensor
    restored = ImageTensor(x.reshape(img.shape), img.peak)
    os.makedirs(args.out_dir, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.image))[0]
    out_img = os.path.join(args.out_dir, stem + "_cp.pgm")
    write_image(restored, out_img)
    trace_csv = os.path.join(args.out_dir, stem + "_cp_trace.csv")
    _write_csv(trace_csv, ["iteration", "objective"],
               [(i + 1, "%.10g" % v) for i, v in enumerate(trace)])
    outputs = [out_img, trace_csv]
    if args.plot:
        plot_path = os.path.join(args.out_dir, stem + "_cp_trace.pgm")
        _line_plot(trace, plot_path)
        outputs.append(plot_path)

    obj_input = objective(problem, z.pixels.ravel())
    stats = {
        "iterations": int(trace.size),
        "objective_final": float(trace[-1]) if trace.size else None,
        "objective_at_input": float(obj_input),
        "psnr_degraded_db": round(psnr(img, z.clipped()), 4),
        "psnr_restored_db": round(psnr(img, restored.clipped()), 4),
        "tau": settings.tau, "sigma": settings.sigma, "theta": settings.theta,
    }
    _write_manifest(args.out_dir, "solve-cp", args, [args.image], outputs,
                    started, extra=stats)
    print("%d iterations, objective %.6g (input %.6g), PSNR %.2f -> %.2f dB"
          % (stats["iterations"], stats["objective_final"], obj_input,
             stats["psnr_degraded_db"], stats["psnr_restored_db"]))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pdunfold",
        description="Unrolled primal-dual restoration pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("demo-data", help="generate synthetic grayscale images")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--train-count", type=int, default=8)
    p.add_argument("--test-count", type=int, default=4)
    p.add_argument("--side", type=int, default=180)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_demo_data)

    p = sub.add_parser("degrade", help="blur and add noise to a directory of images")
    p.add_argument("--in-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--blur", type=int, choices=(1, 3, 5), default=3)
    p.add_argument("--alpha", type=float, default=25.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("extract-patches",
                       help="sample aligned clean/degraded patch pairs")
    p.add_argument("--clean-dir", required=True)
    p.add_argument("--out", required=True, help="output .npz path")
    p.add_argument("--count", type=int, default=2000)
    p.add_argument("--patch-side", type=int, default=10)
    p.add_argument("--blur", type=int, choices=(1, 3, 5), default=3)
    p.add_argument("--alpha", type=float, default=25.0)
    p.add_argument("--pipeline", choices=("global", "perpatch"),
                   default="global")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_extract_patches)

    p = sub.add_parser("train", help="train the unrolled network on patch pairs")
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--patches", required=True, help="patch pair .npz")
    p.add_argument("--out", required=True, help="output checkpoint .npz")
    p.add_argument("--loss-csv", help="loss curve CSV path")
    p.add_argument("--resume", help="training state .npz to continue")
    p.add_argument("--state-out", help="write final training state here")
    p.add_argument("--max-steps", type=int,
                   help="override max_steps from config or resumed state")
    p.add_argument("--plot", action="store_true",
                   help="write a loss-curve plot image")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("restore", help="restore degraded images with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in-dir", required=True, help="degraded images")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mode", choices=("independent", "averaged"),
                   default="averaged")
    p.add_argument("--stride", type=int, default=1,
                   help="averaged-mode window stride")
    p.add_argument("--reference-dir", help="clean images for PSNR reporting")
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("evaluate",
                       help="degrade clean test images and score restorations")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test-dir", required=True, help="clean test images")
    p.add_argument("--scenarios",
                   help="comma list BLUR:ALPHA, default: training scenario")
    p.add_argument("--mode", choices=("independent", "averaged", "both"),
                   default="both")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--plot", action="store_true",
                   help="write a PSNR heat map image")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck",
                       help="finite-difference audit of the analytic gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--layers", default="1,2,5",
                   help="comma list of layer counts to cycle")
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--step", type=float, default=1e-6)
    p.add_argument("--inject-error", type=float, default=0.0,
                   help="perturb one analytic derivative (negative control)")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("solve-cp",
                       help="restore one image with the convex reference solver")
    p.add_argument("--image", required=True, help="clean input image")
    p.add_argument("--blur", type=int, choices=(1, 3, 5), default=3)
    p.add_argument("--alpha", type=float, default=25.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--penalty", choices=("tv", "none"), default="tv")
    p.add_argument("--weight", type=float, default=1.0,
                   help="scale on the analysis operator")
    p.add_argument("--tau", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--theta", type=float, default=1.0)
    p.add_argument("--max-iter", type=int, default=2000)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--plot", action="store_true",
                   help="write an objective-trace plot image")
    p.set_defaults(func=cmd_solve_cp)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the message
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print("usage error: %s" % exc, file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print("I/O error: %s" % exc, file=sys.stderr)
        return EXIT_IO
    except (StepSizeError, GradientError, ValueError, RuntimeError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
