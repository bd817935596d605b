"""Command-line entry point: ``scafuzz {generate,simulate,train,analyze,report}``.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 internal error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import features, pipeline, scoring, targets
from .config import ConfigError, RunConfig
from .device import execute, synthesize_trace, theoretical_scores, write_trace

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
BRANCH_MODEL = "branch.knnm"
DISTANCE_MODEL = "distance.knnm"

log = logging.getLogger("scafuzz")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# flag -> RunConfig field; flags given on the command line override the config file
_OVERRIDES = {
    "snr": "snr_db",
    "noise_sigma": "noise_sigma",
    "samples_per_cycle": "samples_per_cycle",
    "distance_gain": "distance_gain",
    "version": "version",
    "program_seed": "program_seed",
    "inputs": "n_inputs",
    "input_seed": "input_seed",
    "mean": "mean_count",
    "sweep": "sweep_count",
    "alpha": "alpha",
    "groups": "groups",
    "method": "method",
    "vote": "vote",
    "quantization": "quantization",
    "k": "k",
    "train_branches": "train_branches",
    "train_seed": "train_seed",
    "noise_seed": "noise_seed",
    "dedup_threshold": "dedup_threshold",
    "aes_runs": "aes_runs",
    "workers": "workers",
}


def _add_run_flags(p):
    p.add_argument("--config", type=Path, help="JSON run configuration")
    g = p.add_argument_group("device")
    g.add_argument("--snr", type=float, help="branch-window SNR in dB (sets the noise level)")
    g.add_argument("--noise-sigma", type=float, help="noise standard deviation (overrides --snr)")
    g.add_argument("--samples-per-cycle", type=int)
    g.add_argument("--distance-gain", type=float)
    g = p.add_argument_group("target and inputs")
    g.add_argument("--aes", action="store_true", help="use the AES-like target")
    g.add_argument("--version", type=int)
    g.add_argument("--program-seed", type=int)
    g.add_argument("--inputs", type=int, help="number of random inputs")
    g.add_argument("--input-seed", type=int)
    g = p.add_argument_group("pipeline")
    g.add_argument("--mean", type=int, help="captures per mean trace")
    g.add_argument("--sweep", type=int, help="mean traces per sweep")
    g.add_argument("--alpha", type=float)
    g.add_argument("--groups", type=int, help="vote groups per input")
    g.add_argument("--method", choices=pipeline.METHODS)
    g.add_argument("--vote", choices=pipeline.VOTES)
    g.add_argument("--quantization", choices=("round", "tolerance"))
    g.add_argument("--k", type=int)
    g.add_argument("--train-branches", type=int)
    g.add_argument("--train-seed", type=int)
    g.add_argument("--noise-seed", type=int)
    g.add_argument("--dedup-threshold", type=float)
    g.add_argument("--aes-runs", type=int)
    g.add_argument("--workers", type=int, help="worker processes (default: $SCAFUZZ_WORKERS or 1)")


def _load_config(args) -> RunConfig:
    base = RunConfig.read(args.config) if getattr(args, "config", None) else RunConfig()
    data = {f.name: getattr(base, f.name) for f in fields(RunConfig)}
    for flag, key in _OVERRIDES.items():
        v = getattr(args, flag, None)
        if v is not None:
            data[key] = v
    if getattr(args, "noise_sigma", None) is not None:
        data["snr_db"] = None
    if getattr(args, "snr", None) is not None:
        data["noise_sigma"] = None
    if getattr(args, "aes", False):
        data["target"] = "aes"
    return RunConfig.from_dict(data)


def _load_models(cfg, models_dir, device):
    if models_dir is None:
        return cfg.train(device)
    d = Path(models_dir)
    return pipeline.Models(features.read_model(d / BRANCH_MODEL), features.read_model(d / DISTANCE_MODEL))


def _load_program(cfg, path):
    return targets.read_manifest(path) if path else cfg.program()


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_generate(args):
    if args.aes:
        prog = targets.aes_target()
    else:
        if args.version not in targets.VERSION_BIAS:
            raise UsageError(f"--version must be 1..5, got {args.version}")
        prog = targets.generate_synthetic_program(args.version, args.seed)
    targets.write_manifest(args.out, prog)
    print(f"{args.out}: {len(prog)} blocks, {targets.static_transition_count(prog)} transitions")


def cmd_simulate(args):
    cfg = _load_config(args)
    device = cfg.device()
    prog = _load_program(cfg, args.program)
    if args.input:
        try:
            inputs = [bytes.fromhex(h) for h in args.input]
        except ValueError as exc:
            raise UsageError(f"--input expects hex strings: {exc}") from exc
    else:
        inputs = cfg.inputs(prog.input_width)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, data in enumerate(inputs):
        rec = execute(prog, data, device.samples_per_cycle)
        tr = synthesize_trace(device, rec, pipeline.derive_seed(cfg.noise_seed, i))
        write_trace(out / f"trace_{i:04d}.ptrc", tr)
        lines.append(f"{i} {data.hex()} {' '.join(map(str, rec.block_ids))}")
    (out / "inputs.txt").write_text("\n".join(lines) + "\n")
    oracle = theoretical_scores(prog, inputs)
    scoring.write_text(out / "oracle.csv", scoring.scores_to_csv(oracle, oracle))
    print(f"{len(inputs)} traces written to {out} (noise sigma {device.noise_sigma:.6g})")


def cmd_train(args):
    cfg = _load_config(args)
    device = cfg.device()
    models = cfg.train(device)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    features.write_model(out / BRANCH_MODEL, models.branch)
    features.write_model(out / DISTANCE_MODEL, models.distance)
    mcc, acc = pipeline.held_out_quality(device, models, seed=cfg.train_seed + 1000)
    print(f"held-out branch MCC {mcc:.4f}, distance accuracy {acc:.4f} (noise sigma {device.noise_sigma:.6g})")


def cmd_analyze(args):
    cfg = _load_config(args)
    device = cfg.device()
    prog = _load_program(cfg, args.program)
    models = _load_models(cfg, args.models, device)
    inputs = cfg.inputs(prog.input_width)
    spec = cfg.session(device, models)
    scores, oracle = pipeline.run_session(prog, inputs, spec, cfg.method, cfg.vote, cfg.quant(), cfg.workers)
    out = args.out or cfg.output or "scores.csv"
    scoring.write_text(out, scoring.scores_to_csv(scores, oracle))
    m = scoring.evaluate(scores, oracle)
    print(
        f"{cfg.method} mean={cfg.mean_count} sweep={cfg.sweep_count} vote={cfg.vote}: "
        f"mse {m.mse:.4f} correlation {m.correlation:.4f} crucial_errors {m.crucial_errors}"
    )


def cmd_report(args):
    cfg = _load_config(args)
    device = cfg.device()
    prog = cfg.program()
    models = _load_models(cfg, args.models, device)
    out = Path(args.out or cfg.output or "report.csv")
    if cfg.target == "aes":
        counts = pipeline.detected_transitions(prog, device, models, cfg.aes_runs, cfg.preprocessing(), cfg.noise_seed)
        static = targets.static_transition_count(prog)
        text = "target,static_transitions,runs,mean_detected,min_detected,max_detected\n"
        text += f"aes,{static},{len(counts)},{np.mean(counts):.2f},{min(counts)},{max(counts)}\n"
        scoring.write_text(out, text)
        print(f"aes: {np.mean(counts):.2f} of {static} transitions detected on average over {len(counts)} runs")
        return
    inputs = cfg.inputs(prog.input_width)
    rows, oracle = pipeline.report_grid(
        prog,
        inputs,
        device,
        models,
        [tuple(c) for c in cfg.cells],
        cfg.methods,
        cfg.votes,
        cfg.groups,
        cfg.alpha,
        cfg.noise_seed,
        cfg.quant(),
        cfg.workers,
        cfg.exhaustive_candidates,
    )
    scoring.write_text(out, scoring.report_to_csv(rows))
    oracle_out = Path(args.oracle_out) if args.oracle_out else out.with_name(out.stem + "_oracle.csv")
    scoring.write_text(oracle_out, scoring.scores_to_csv(oracle, oracle))
    ok = [r for r in rows if r.ok]
    print(f"{out}: {len(rows)} cells ({len(rows) - len(ok)} failed)")
    if ok:
        best = max(ok, key=lambda r: (r.correlation, -r.crucial_errors))
        print(
            f"best cell: {best.method} mean={best.mean_count} sweep={best.sweep_count} vote={best.vote} "
            f"correlation {best.correlation:.4f} crucial_errors {best.crucial_errors}"
        )


def build_parser():
    p = _Parser(prog="scafuzz", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a program manifest")
    g.add_argument("--version", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--aes", action="store_true")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("simulate", help="write power traces for inputs")
    _add_run_flags(s)
    s.add_argument("--program", help="program manifest (default: from the config)")
    s.add_argument("--input", action="append", help="input as hex (repeatable); default: random inputs")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train the branch and distance classifiers")
    _add_run_flags(t)
    t.add_argument("--out-dir", required=True)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("analyze", help="score inputs through the full pipeline")
    _add_run_flags(a)
    a.add_argument("--program", help="program manifest (default: from the config)")
    a.add_argument("--models", help="directory holding the two model files (default: train now)")
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    r = sub.add_parser("report", help="preprocessing x reconstruction x vote grid")
    _add_run_flags(r)
    r.add_argument("--models")
    r.add_argument("--out")
    r.add_argument("--oracle-out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"scafuzz: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"scafuzz {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError, OSError) as exc:
        print(f"scafuzz {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"scafuzz {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
