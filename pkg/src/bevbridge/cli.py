"""Command line entry point.

Exit codes: 0 ok, 1 a check or run failed, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

# reference sizes of the three added components, in parameters
REFERENCE_COUNTS = {"decoder": 1.33e6, "upsampler": 0.30e6, "ctab": 0.58e6, "total": 2.21e6}


class UsageError(Exception):
    pass


def _overrides(pairs: list[str] | None) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _load_cfg(args):
    from .config import TrainConfig, load_config, parse_pairs
    over = _overrides(getattr(args, "set", None))
    for flag in ("arm", "seed", "steps"):
        val = getattr(args, flag, None)
        if val is not None:
            over[flag] = str(val)
    try:
        if args.config:
            return load_config(args.config, over)
        return parse_pairs(over, TrainConfig())
    except (ValueError, OSError) as exc:
        raise UsageError(str(exc)) from None


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_table, module_names, run_suite
    if args.scope != "all" and args.scope not in module_names():
        raise UsageError(f"unknown module {args.scope!r}; choose 'all' or one of {', '.join(module_names())}")
    results = run_suite(args.scope, seed=args.seed, samples=args.samples)
    print(format_table(results))
    failed = [r for r in results if not r.passed]
    if failed:
        print("FAILED: " + ", ".join(f"{r.module}/{r.name}" for r in failed))
        return EXIT_FAIL
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_params(args) -> int:
    from .config import dims_preset
    from .model import build_model, param_ledger
    dims = dims_preset(args.preset)
    ledger = param_ledger(dims)
    counts = {"decoder": ledger.decoder, "upsampler": ledger.upsampler, "ctab": ledger.ctab, "total": ledger.total}
    print(f"preset: {args.preset}")
    print(f"{'component':<12} {'params':>12} {'reference':>12} {'rel. diff':>10}")
    for name, n in counts.items():
        ref = REFERENCE_COUNTS[name]
        print(f"{name:<12} {n:>12,d} {ref:>12,.0f} {100 * (n - ref) / ref:>+9.2f}%")
    if args.full:
        base = build_model(dims, "baseline", 0).num_parameters()
        full = build_model(dims, "ctab", 0).num_parameters()
        print(f"full model: baseline {base:,d}  ctab {full:,d}  difference {full - base:,d}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import RunDirExists, prepare_run_dir, train
    cfg = _load_cfg(args)
    root = Path(args.out)
    try:
        if args.resume:
            run_dir = root / cfg.run_name()
        else:
            run_dir = prepare_run_dir(root, cfg, force=args.force)
    except RunDirExists as exc:
        print(exc, file=sys.stderr)
        return EXIT_FAIL
    print(f"run directory: {run_dir}")
    report = train(cfg, run_dir, stop_at=args.stop_at, resume=args.resume, log=print)
    print(f"finished {report.steps_done} steps in {report.seconds:.1f} s")
    if report.metrics:
        print(json.dumps(report.metrics, indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import TrainData, eval_scenes
    from .det import write_boxes_csv
    from .synth import read_scenes
    from .train import evaluate, load_checkpoint, model_from_checkpoint
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    if args.scenes_file:
        scenes = read_scenes(args.scenes_file)
    elif args.train_pool:
        scenes = TrainData(cfg).pool
        if not scenes:
            raise UsageError("this run trained on fresh scenes; there is no fixed pool to evaluate")
    else:
        scenes = eval_scenes(replace(cfg, eval_scenes=args.count or cfg.eval_scenes))
    model = model_from_checkpoint(ckpt, use_ema=not args.live)
    result = evaluate(model, scenes, cfg, args.noise_seed if args.noise_seed is not None else cfg.eval_seed)
    summary = result.summary()
    print(json.dumps(summary, indent=2))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(summary, indent=2))
        with open(out / "detections.csv", "w", newline="") as fh:
            write_boxes_csv(fh, result.predictions)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import run_ablation
    from .train import RunDirExists
    cfg = _load_cfg(args)
    try:
        res = run_ablation(cfg, args.seeds, args.out, force=args.force, log=print)
    except RunDirExists as exc:
        print(exc, file=sys.stderr)
        return EXIT_FAIL
    print((res.out_dir / "ablation.csv").read_text())
    print(f"gate curves: {res.gate_csv}, {res.gate_svg}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    from .data import scene_config, sub_seed
    from .synth import generate_scene, write_scenes
    cfg = _load_cfg(args)
    scfg = scene_config(cfg.dims)
    scenes = (generate_scene(sub_seed(args.seed, 3, i), scfg) for i in range(args.count))
    n = write_scenes(args.out, scenes)
    print(f"wrote {n} scenes to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bevbridge", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite at float64")
    g.add_argument("scope", nargs="?", default="all", help="'all' or a module name")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--samples", type=int, default=20, help="coordinates checked per tensor")
    g.set_defaults(func=cmd_gradcheck)

    pr = sub.add_parser("params", help="parameter counts of the added components")
    pr.add_argument("--preset", choices=("paper", "toy"), default="paper")
    pr.add_argument("--full", action="store_true", help="also count both full models")
    pr.set_defaults(func=cmd_params)

    def config_args(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")

    t = sub.add_parser("train", help="train one arm")
    config_args(t)
    t.add_argument("--arm", choices=("baseline", "ctab"))
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--out", default="runs")
    t.add_argument("--force", action="store_true", help="overwrite a finished run")
    t.add_argument("--resume", action="store_true", help="continue from the run's checkpoint")
    t.add_argument("--stop-at", type=int, help="stop after this many steps, leaving a resumable checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--scenes-file", help="scene file written by gen-data")
    e.add_argument("--train-pool", action="store_true", help="evaluate on the run's fixed training scenes")
    e.add_argument("--count", type=int, help="number of held-out scenes")
    e.add_argument("--noise-seed", type=int)
    e.add_argument("--live", action="store_true", help="use live weights instead of the EMA shadow")
    e.add_argument("--out", help="directory for metrics.json and detections.csv")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="both arms over several seeds")
    config_args(a)
    a.add_argument("--seeds", type=int, nargs="+", required=True)
    a.add_argument("--steps", type=int)
    a.add_argument("--out", default="ablation")
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_ablate, arm=None, seed=None)

    d = sub.add_parser("gen-data", help="write synthetic scenes to a line-delimited file")
    config_args(d)
    d.add_argument("--out", required=True)
    d.add_argument("--count", type=int, default=16)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_gen_data, arm=None, steps=None)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # any internal failure must surface as a nonzero exit
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
