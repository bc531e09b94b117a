"""Command-line entry point: ``catalyst-gfn <subcommand> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 pipeline error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

from .bulk import StructureError
from .config import ConfigError, load_config
from .env import EnvError, SurfaceEnv
from .gflownet import TrainingDiverged, load_checkpoint, save_checkpoint, train
from .pipeline import (
    PipelineError,
    RewardPipeline,
    cut_surface_xyz,
    enumerate_config,
    filter_file,
    read_records,
    sample_specs,
    write_records,
    write_report,
)
from .proxy import ProxyError
from .surface import GeometryError

logger = logging.getLogger("catalyst_gfn")

EXIT_OK, EXIT_USAGE, EXIT_PIPELINE = 0, 1, 2

CHECKPOINT = "checkpoint.json"
TRAIN_LOG = "train_log.csv"
SAMPLES = "samples.jsonl"
KEPT = "samples.kept.jsonl"
ANNOTATED = "samples.annotated.jsonl"
MARGINALS = "marginals.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = {"default": argparse.SUPPRESS} if suppress else {}
    p.add_argument("--config", help="run configuration (JSON); defaults are used when omitted", **d)
    p.add_argument("--seed", type=int, help="master seed, overrides the config", **d)
    p.add_argument("--out-dir", help="output directory, overrides the config", **d)
    p.add_argument("--threads", type=int, help="worker threads for sampling and rewards (default 1)", **d)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress", **d)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="catalyst-gfn", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    parser.set_defaults(config=None, seed=None, out_dir=None, threads=1, verbose=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train the sampler with the full reward path")
    _global_flags(p, suppress=True)

    p = sub.add_parser("sample", help="draw samples from a checkpoint and score them")
    _global_flags(p, suppress=True)
    p.add_argument("-n", type=int, default=1000, help="number of samples (default 1000)")
    p.add_argument("--checkpoint", help=f"default: <out-dir>/{CHECKPOINT}")
    p.add_argument("--output", help=f"default: <out-dir>/{SAMPLES}")

    p = sub.add_parser("filter", help="apply the stability filters to a samples file")
    _global_flags(p, suppress=True)
    p.add_argument("--input", help=f"default: <out-dir>/{SAMPLES}")

    p = sub.add_parser("report", help="write report.csv, report.svg and report.json")
    _global_flags(p, suppress=True)
    p.add_argument("--input", help=f"default: <out-dir>/{KEPT}")

    p = sub.add_parser("enumerate", help="exact element marginals and log Z")
    _global_flags(p, suppress=True)
    p.add_argument("--uniform", action="store_true", help="debug: replace every reward by 1")

    p = sub.add_parser("cut-surface", help="write one slab as extended XYZ")
    _global_flags(p, suppress=True)
    p.add_argument("--element", required=True)
    p.add_argument("--space-group", type=int, required=True)
    p.add_argument("--lattice-a", type=float, required=True, help="lattice parameter (A)")
    p.add_argument("--miller", type=int, nargs=3, required=True, metavar=("H", "K", "L"))
    p.add_argument("--offset", type=float, default=0.0)
    p.add_argument("--face", choices=("top", "bottom"), default="top")
    p.add_argument("--n-layers", type=int, default=4)
    p.add_argument("--min-thickness", type=float, default=8.0)
    p.add_argument("--output", help="default: stdout")
    return parser


def _path(args, config, explicit, default_name):
    return explicit if explicit else os.path.join(config.out_dir, default_name)


def _config_echo(config) -> dict:
    echo = config.to_json()
    echo.pop("out_dir")  # keep checkpoints byte-identical across output locations
    return echo


def cmd_train(args, config) -> int:
    env = SurfaceEnv(config.search_space)
    tcfg = config.trainer_config()
    os.makedirs(config.out_dir, exist_ok=True)
    pipe = RewardPipeline(config, threads=args.threads)

    def progress(rec):
        if rec["step"] % 500 == 0:
            logger.info("step %d  loss %.4f  log_z %.4f", rec["step"], rec["loss"], rec["log_z"])

    try:
        state, log = train(env, tcfg, pipe.rewards, callback=progress)
    finally:
        pipe.close()
    save_checkpoint(os.path.join(config.out_dir, CHECKPOINT), state, tcfg, _config_echo(config))
    with open(os.path.join(config.out_dir, TRAIN_LOG), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "log_z"])
        for rec in log:
            w.writerow([rec["step"], repr(rec["loss"]), repr(rec["log_z"])])
    print(f"trained {state.step} steps; log_z = {state.params.log_z:.6f}; wrote {config.out_dir}/{CHECKPOINT}")
    return EXIT_OK


def cmd_sample(args, config) -> int:
    if args.n < 0:
        raise UsageError("-n must be non-negative")
    ckpt = _path(args, config, args.checkpoint, CHECKPOINT)
    if not os.path.isfile(ckpt):
        raise PipelineError(f"checkpoint not found: {ckpt}")
    try:
        state, _, _ = load_checkpoint(ckpt)
    except (ValueError, KeyError, TypeError) as exc:
        raise PipelineError(f"cannot load checkpoint {ckpt}: {exc}") from exc
    env = SurfaceEnv(config.search_space)
    p = state.params
    if p.input_dim != env.feature_dim or tuple(p.arities) != tuple(env.arities):
        raise PipelineError(f"checkpoint {ckpt} was trained on a different search space")
    specs = sample_specs(env, p, args.n, config.seed, threads=args.threads)
    pipe = RewardPipeline(config, threads=args.threads)
    try:
        records = pipe.records(specs)
    finally:
        pipe.close()
    out = _path(args, config, args.output, SAMPLES)
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    write_records(out, records)
    print(f"wrote {len(records)} samples to {out}")
    return EXIT_OK


def cmd_filter(args, config) -> int:
    src = _path(args, config, args.input, SAMPLES)
    base = os.path.dirname(src) or "."
    kept, annotated = os.path.join(base, KEPT), os.path.join(base, ANNOTATED)
    if os.path.abspath(kept) == os.path.abspath(src):
        raise UsageError(f"input must not be named {KEPT}")
    counts = filter_file(src, kept, annotated, config.relaxation.threshold)
    summary = ", ".join(f"{k} {v}" for k, v in counts.items())
    print(f"{summary}; wrote {kept} and {annotated}")
    return EXIT_OK


def cmd_report(args, config) -> int:
    src = _path(args, config, args.input, KEPT)
    records = read_records(src)
    if not records:
        raise PipelineError(f"no samples in {src}")
    rows = write_report(records, config.out_dir)
    for r in rows:
        print(f"{r.composition:>3} {r.space_group}  eta {r.proxy_overpotential:.4f}  {r.count:5d}  {r.percentage:6.2f}%")
    return EXIT_OK


def cmd_enumerate(args, config) -> int:
    m = enumerate_config(config, uniform=args.uniform)
    os.makedirs(config.out_dir, exist_ok=True)
    path = os.path.join(config.out_dir, MARGINALS)
    obj = {**m.to_json(), "uniform": bool(args.uniform),
           "terminal_states": SurfaceEnv(config.search_space).count_terminal_states()}
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")
    for e, v in sorted(m.element_probs.items(), key=lambda kv: -kv[1]):
        print(f"{e:>3} {v:.6f}")
    print(f"log Z = {m.log_z:.6f}; wrote {path}")
    return EXIT_OK


def cmd_cut_surface(args, config) -> int:
    text = cut_surface_xyz(
        args.element, args.space_group, args.lattice_a, tuple(args.miller), args.offset, args.face == "top",
        n_layers=args.n_layers, min_thickness=args.min_thickness,
    )
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "filter": cmd_filter,
    "report": cmd_report,
    "enumerate": cmd_enumerate,
    "cut-surface": cmd_cut_surface,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        config = load_config(args.config, seed=args.seed, out_dir=args.out_dir)
        return COMMANDS[args.command](args, config)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (GeometryError, StructureError, EnvError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE if args.command == "cut-surface" else EXIT_PIPELINE
    except (PipelineError, ProxyError, TrainingDiverged, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
