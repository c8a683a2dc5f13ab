"""``direct-store`` command line: run one experiment and write its CSV.

    direct-store model [--uber 1e-10,1e-15] [--curves]
    direct-store kv-cluster --replicas 3 --uber 1e-6 --workload mixed --seed 0
    direct-store blockfs --files 100 --block-size 8MiB --uber 1e-9 --mode direct --reads 100

Every subcommand takes ``--spec FILE``, an INI file with an ``[injector]``
section (``uber``, ``mode``, ``seed``, ``scope-glob``) and an optional section
named after the subcommand; flags given on the command line win over the file.
The exit status is 0 only when all of the run's consistency checks pass.
"""

import argparse
import configparser
import sys
from dataclasses import replace

from .error_model import parse_size
from .experiments import (WORKLOADS, BlockfsSpec, KvSpec, ModelSpec, run_blockfs_experiment, run_kv_experiment,
                          run_model_curves, run_model_table, write_csv)
from .fault_injection import InjectorConfig

EXIT_OK, EXIT_CHECKS, EXIT_USAGE = 0, 1, 2


def _float_list(text):
    return tuple(float(x) for x in str(text).replace(",", " ").split())


def _bytes(text):
    return parse_size(text) // 8


def _bool(text):
    return str(text).strip().lower() in ("1", "true", "yes", "on")


# per-section keys: ini name -> (spec field, converter)
_MODEL_KEYS = {"ubers": ("ubers", _float_list), "block-size": ("block_size", str),
               "chunk-size": ("chunk_size", str), "replicas": ("replicas", int),
               "modes": ("modes", lambda s: tuple(s.replace(",", " ").split())), "trials": ("trials", int),
               "seed": ("seed", int)}
_KV_KEYS = {"replicas": ("replicas", int), "workload": ("workload", str), "ops": ("ops", int),
            "keys": ("keys", int), "value-size": ("value_size", int), "seed": ("seed", int),
            "block-capacity": ("block_capacity", int), "target-file-size": ("target_file_size", int),
            "flush-bytes": ("flush_bytes", int), "think-ms": ("think_ms", float)}
_BLOCKFS_KEYS = {"files": ("files", int), "block-size": ("block_size", _bytes), "mode": ("mode", str),
                 "reads": ("reads", int), "seed": ("seed", int), "batch": ("batch", int),
                 "payloads": ("payloads", int), "resume-from-offset": ("resume_from_offset", _bool)}


def read_spec(path):
    parser = configparser.ConfigParser()
    if path is not None:
        with open(path) as fh:
            parser.read_file(fh)
    return parser


def _section(parser, name, keys, spec):
    if not parser.has_section(name):
        return spec
    sec = parser[name]
    unknown = set(sec) - set(keys)
    if unknown:
        raise ValueError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
    return replace(spec, **{keys[k][0]: keys[k][1](v) for k, v in sec.items()})


def _injector(parser, uber, mode, seed, scope):
    """Injector from ``[injector]`` with the subsystem's defaults for missing keys."""
    sec = parser["injector"] if parser.has_section("injector") else {}
    unknown = set(sec) - {"uber", "mode", "seed", "scope-glob", "freeze-epoch", "include-logs"}
    if unknown:
        raise ValueError(f"unknown key(s) in [injector]: {', '.join(sorted(unknown))}")
    return InjectorConfig(
        uber=float(uber if uber is not None else sec.get("uber", 0.0)),
        mode=sec.get("mode", mode),
        seed=int(sec.get("seed", seed)),
        scope=sec.get("scope-glob", scope),
        freeze_epoch=_bool(sec.get("freeze-epoch", "no")),
        include_logs=_bool(sec.get("include-logs", "no")),
    )


def _apply_flags(spec, args, names):
    kw = {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}
    return replace(spec, **kw)


def cmd_model(args, parser):
    spec = _section(parser, "model", _MODEL_KEYS, ModelSpec())
    if args.uber is not None:
        spec = replace(spec, ubers=args.uber)
    elif not parser.has_section("model") or "ubers" not in parser["model"]:
        if parser.has_section("injector") and "uber" in parser["injector"]:
            spec = replace(spec, ubers=(float(parser["injector"]["uber"]),))
    spec = _apply_flags(spec, args, ["trials", "seed"])
    if args.curves:
        sec = parser["model"] if parser.has_section("model") else {}
        return run_model_curves(sec.get("block-size", "8MiB"), sec.get("chunk-size", "512B"), spec.replicas,
                                args.uber)
    return run_model_table(spec)


def cmd_kv(args, parser):
    spec = _section(parser, "kv-cluster", _KV_KEYS, KvSpec())
    spec = _apply_flags(spec, args, ["replicas", "workload", "seed", "ops", "keys"])
    inj = _injector(parser, args.uber, spec.mode, spec.seed, spec.scope)
    spec = replace(spec, uber=inj.uber, mode=inj.mode, scope=inj.scope)
    return run_kv_experiment(spec, inj)


def cmd_blockfs(args, parser):
    spec = _section(parser, "blockfs", _BLOCKFS_KEYS, BlockfsSpec())
    spec = _apply_flags(spec, args, ["files", "block_size", "mode", "reads", "seed", "resume_from_offset"])
    inj = _injector(parser, args.uber, spec.injection, spec.seed, "*")
    spec = replace(spec, uber=inj.uber, injection=inj.mode)
    return run_blockfs_experiment(spec, inj)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--spec", metavar="FILE", help="INI file with [injector] and per-experiment settings")
    common.add_argument("--out", metavar="PATH", default="-", help="CSV output path (default: stdout)")
    common.add_argument("--quiet", action="store_true", help="do not print the summary to stderr")

    p = argparse.ArgumentParser(prog="direct-store", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("model", parents=[common], help="closed-form error table (and Monte Carlo check)")
    m.add_argument("--uber", type=_float_list, help="comma-separated UBER values")
    m.add_argument("--trials", type=int, help="Monte Carlo trials per row (0 disables)")
    m.add_argument("--seed", type=int)
    m.add_argument("--curves", action="store_true", help="emit failure curves over an UBER grid instead")
    m.set_defaults(run=cmd_model)

    kv = sub.add_parser("kv-cluster", parents=[common], help="replicated key-value shard under injection")
    kv.add_argument("--replicas", type=int)
    kv.add_argument("--uber", type=float)
    kv.add_argument("--workload", choices=sorted(WORKLOADS))
    kv.add_argument("--seed", type=int)
    kv.add_argument("--ops", type=int, help="client operations to issue")
    kv.add_argument("--keys", type=int, help="key space size")
    kv.set_defaults(run=cmd_kv)

    bf = sub.add_parser("blockfs", parents=[common], help="replicated block store read experiment")
    bf.add_argument("--files", type=int)
    bf.add_argument("--block-size", type=_bytes, help="e.g. 8MiB or 65536")
    bf.add_argument("--uber", type=float)
    bf.add_argument("--mode", choices=("direct", "legacy"))
    bf.add_argument("--reads", type=int)
    bf.add_argument("--seed", type=int)
    bf.add_argument("--resume-from-offset", action="store_true", default=None,
                    help="legacy retries resume at the failing chunk")
    bf.set_defaults(run=cmd_blockfs)
    return p


def main(argv=None):
    p = build_parser()
    args = p.parse_args(argv)
    try:
        config = read_spec(args.spec)
        result = args.run(args, config)
    except (ValueError, OSError, configparser.Error) as exc:
        print(f"direct-store: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.out == "-":
        write_csv(result, sys.stdout)
    else:
        with open(args.out, "w", newline="") as fh:
            write_csv(result, fh)
    if not args.quiet:
        for k, v in result.summary.items():
            print(f"{k}: {v}", file=sys.stderr)
        for c in result.checks:
            print(f"check {c.name}: {'pass' if c.ok else 'FAIL'} {c.detail}".rstrip(), file=sys.stderr)
    return EXIT_OK if result.ok else EXIT_CHECKS


if __name__ == "__main__":
    sys.exit(main())
