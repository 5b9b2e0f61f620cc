"""``casseg`` command-line entry point.

Exit codes: 0 success, 1 experiment/property failure, 2 usage or config error.
Diagnostics go to stderr; results go to files under ``--out`` (default
``$CASSEG_OUT_DIR/<subcommand>``, or ``runs/<subcommand>``).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import harness, nnet, synth
from .gridio import atomic_write_bytes

log = logging.getLogger("casseg")


class UsageError(Exception):
    pass


def _positive(name):
    def parse(text):
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be an integer") from None
        if v < 1:
            raise argparse.ArgumentTypeError(f"{name} must be >= 1")
        return v
    return parse


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="casseg", description="Class-agnostic segmentation loss toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default=None, help="output directory")
        if config:
            sp.add_argument("--config", default=None, help="JSON experiment config")
            sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                            help="dotted-path config override (repeatable)")

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(g, config=False)
    g.add_argument("--kind", choices=("shapes", "toy"), default="shapes")
    g.add_argument("--count", type=_positive("--count"), default=50)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--regions", type=int, choices=(2, 3), default=2)
    g.add_argument("--flip-fraction", type=float, default=0.0)

    t = sub.add_parser("train", help="train one network")
    common(t)

    e = sub.add_parser("eval", help="evaluate a trained checkpoint on clean test data")
    common(e)
    e.add_argument("--checkpoint", required=True)

    x = sub.add_parser("experiment", help="run a preset experiment")
    common(x)
    x.add_argument("--preset", required=True, choices=harness.PRESETS)
    x.add_argument("--jobs", type=_positive("--jobs"), default=1)

    gc = sub.add_parser("grad-check", help="finite-difference gradient check")
    common(gc, config=False)
    gc.add_argument("--instances", type=_positive("--instances"), default=50)

    cp = sub.add_parser("check-properties", help="verify the loss properties")
    common(cp)
    return p


def out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get("CASSEG_OUT_DIR", "runs")) / args.command


def load_config(args, defaults: harness.ExperimentConfig | None = None) -> harness.ExperimentConfig:
    d = (defaults or harness.ExperimentConfig()).to_dict()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} does not exist")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        data = dict(d["data"], **loaded.pop("data", {}))
        d.update(loaded)
        d["data"] = data
    try:
        d = harness.apply_overrides(d, getattr(args, "overrides", []))
        d["seed"] = args.seed
        return harness.ExperimentConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def cmd_gen_data(args) -> int:
    out = out_dir(args)
    if args.kind == "toy":
        tr, te = synth.gen_toy_gaussians(seed=args.seed)
        for name, s in (("train", tr), ("test", te)):
            rows = "".join(f"{x!r},{y!r},{c}\n" for (x, y), c in zip(s.points.tolist(), s.class_id.tolist()))
            atomic_write_bytes(out / f"toy_{name}.csv", ("x,y,class_id\n" + rows).encode())
        return 0
    if args.size < 16:
        raise UsageError("--size must be at least 16")
    if not 0.0 <= args.flip_fraction <= 1.0:
        raise UsageError("--flip-fraction must lie in [0, 1]")
    samples = synth.gen_shapes(args.count, args.size, args.regions, args.seed)
    samples = synth.flip_labels(samples, args.flip_fraction, args.seed)
    synth.save_dataset(out, samples, {"kind": "shapes", "seed": args.seed, "size": args.size,
                                      "regions_per_image": args.regions, "flip_fraction": args.flip_fraction})
    return 0


def cmd_train(args) -> int:
    cfg = replace(load_config(args), out_dir=str(out_dir(args)))
    _, tl = harness.train(cfg)
    out = Path(cfg.out_dir)
    atomic_write_bytes(out / "config.json", harness.dump_json(cfg.to_dict()))
    atomic_write_bytes(out / "loss_curve.svg", harness.loss_curve_svg(tl.losses, title=f"{cfg.loss} training loss").encode())
    print(f"trained {len(tl.losses)} steps, final loss {tl.losses[-1] if tl.losses else float('nan'):.6g}", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args)
    params, spec, _ = nnet.load_checkpoint(args.checkpoint)
    if tuple(spec) != harness.network_spec(cfg):
        raise UsageError("checkpoint architecture does not match the config")
    if cfg.experiment == "toy":
        tr, te = synth.gen_toy_gaussians(cfg.data.n1, cfg.data.n2, cfg.data.var, cfg.seed)
        report = {"confusion": harness.toy_confusion(cfg, params, tr, te)}
    else:
        ev = harness.evaluate(cfg, params, harness.prepare_shapes(cfg))
        row = {"cell": "eval", "loss": cfg.loss, "alpha": cfg.alpha, "flip_fraction": cfg.flip_fraction,
               "steps": 0, "final_loss": float("nan"), **ev}
        atomic_write_bytes(out_dir(args) / "metrics.csv", harness.metrics_csv([row]).encode())
        report = ev
    atomic_write_bytes(out_dir(args) / "report.json", harness.dump_json(report))
    return 0


def cmd_experiment(args) -> int:
    cfg = load_config(args, harness.preset_config(args.preset, args.seed))
    report = harness.run_preset(args.preset, args.seed, out_dir(args), cfg, args.jobs)
    if args.preset == "properties" and not report["all_passed"]:
        print("property check failed", file=sys.stderr)
        return 1
    return 0


def cmd_grad_check(args) -> int:
    res = harness.gradient_check(args.seed, instances=args.instances)
    print(f"max relative error {res['max_rel_err']:.3e}")
    if args.out:
        atomic_write_bytes(Path(args.out) / "report.json", harness.dump_json(res))
    return 0 if res["max_rel_err"] < 1e-5 else 1


def cmd_check_properties(args) -> int:
    cfg = load_config(args)
    report = harness.run_property_checks(args.seed, cfg)
    out = out_dir(args)
    atomic_write_bytes(out / "report.json", harness.dump_json(report))
    for name, entry in report.items():
        if isinstance(entry, dict):
            print(f"{'PASS' if entry['passed'] else 'FAIL'} {name}", file=sys.stderr)
    return 0 if report["all_passed"] else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
    "grad-check": cmd_grad_check,
    "check-properties": cmd_check_properties,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"casseg: error: {exc}", file=sys.stderr)
        return 2
    except (harness.TrainingDiverged, harness.BoundViolation, nnet.NonFiniteError) as exc:
        print(f"casseg: experiment failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
