"""Command line entry point: ``cdrflow <subcommand> [options]``.

Exit codes: 0 ok, 1 error, 2 export policy violation.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .matrix import MODES
from .pipeline import (
    EXIT_ERROR,
    EXIT_OK,
    StageError,
    load_pipeline_config,
    run_aggregate,
    run_export,
    run_pseudonymize,
    run_rollup,
    run_synth,
)
from .policy import ExportPolicy, load_policy, suppress_files
from .records import CdrError
from .synth import config_from_mapping, read_flat_config

log = logging.getLogger("cdrflow")


def _common(default=None) -> argparse.ArgumentParser:
    # Subcommands use SUPPRESS so a global flag given before the subcommand
    # is not reset by the subparser's own default.
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, default=default, help="flat key = value config; explicit flags win")
    p.add_argument("--threads", type=int, default=default,
                   help="aggregation worker processes (output is identical for any N)")
    p.add_argument("-v", "--verbose", action="store_true", default=default if default else False)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common(argparse.SUPPRESS)
    ap = argparse.ArgumentParser(prog="cdrflow", description=__doc__.splitlines()[0], parents=[_common()])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic raw CDRs")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--truth", type=Path)
    s.add_argument("--registry", type=Path, help="also write a matching tower registry here")

    s = sub.add_parser("pseudonymize", parents=[common], help="raw CDRs -> de-identified records")
    s.add_argument("--in", dest="input", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--epoch")
    s.add_argument("--registry", type=Path, help="quarantine rows whose tower is not in this registry")
    s.add_argument("--rejects", type=Path, help="quarantine file (default: <in>.rejects.csv)")

    s = sub.add_parser("aggregate", parents=[common], help="de-identified records -> tower matrices")
    s.add_argument("--in", dest="input", type=Path, required=True)
    s.add_argument("--mode", choices=MODES)
    s.add_argument("--bridge-gap", type=int)
    s.add_argument("--utc-offset-minutes", type=int)
    s.add_argument("--out-presence", type=Path, required=True)
    s.add_argument("--out-transitions", type=Path, required=True)

    s = sub.add_parser("rollup", parents=[common], help="tower matrices -> region/window matrices")
    s.add_argument("--presence", type=Path, required=True)
    s.add_argument("--transitions", type=Path, required=True)
    s.add_argument("--registry", type=Path)
    s.add_argument("--window", dest="window_days", type=int)
    s.add_argument("--origin-day", type=int)
    s.add_argument("--out-dir", type=Path, required=True)

    s = sub.add_parser("suppress", parents=[common], help="drop cells below k into a release directory")
    s.add_argument("--in", dest="inputs", type=Path, nargs="+", required=True)
    s.add_argument("--out-dir", type=Path, required=True)
    s.add_argument("--k", type=int)

    s = sub.add_parser("export", parents=[common], help="validate a release directory and copy it to the export zone")
    s.add_argument("--policy", type=Path)
    s.add_argument("--in", dest="input", type=Path, required=True)
    s.add_argument("--zone", type=Path, required=True)

    s = sub.add_parser("verify", parents=[common], help="recompute aggregates with the oracle and diff")
    s.add_argument("--raw", type=Path, required=True)
    s.add_argument("--key-file", type=Path)
    s.add_argument("--against", type=Path, required=True)
    s.add_argument("--registry", type=Path)
    s.add_argument("--epoch")

    s = sub.add_parser("pipeline", parents=[common], help="run every stage through the trust zones")
    s.add_argument("--start-at", choices=("pseudonymize", "aggregate"), default="pseudonymize")
    s.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value")
    return ap


def _settings(args) -> dict[str, str]:
    if args.config is None:
        return {}
    return read_flat_config(args.config, args.command)


def _pick(args, cfg: dict[str, str], name: str, default=None, cast=str):
    value = getattr(args, name, None)
    if value is not None:
        return value
    if name in cfg and cfg[name] != "":
        return cast(cfg[name])
    return default


def _cfg_path(args, cfg, name):
    value = getattr(args, name, None)
    if value is not None:
        return value
    if cfg.get(name):
        base = args.config.resolve().parent if args.config else Path.cwd()
        return base / cfg[name]
    return None


def cmd_synth(args, cfg) -> int:
    if not cfg:
        raise CdrError("synth needs --config with generator settings")
    run_synth(config_from_mapping(cfg), args.out, args.truth, args.registry)
    return EXIT_OK


def cmd_pseudonymize(args, cfg) -> int:
    epoch = _pick(args, cfg, "epoch")
    if not epoch:
        raise CdrError("--epoch is required")
    run_pseudonymize(args.input, args.out, epoch, _cfg_path(args, cfg, "key_file"),
                     _cfg_path(args, cfg, "registry"), args.rejects)
    return EXIT_OK


def cmd_aggregate(args, cfg) -> int:
    run_aggregate(
        args.input, args.out_presence, args.out_transitions,
        mode=_pick(args, cfg, "mode", "day-pair"),
        bridge_gap=_pick(args, cfg, "bridge_gap", 0, int),
        utc_offset_minutes=_pick(args, cfg, "utc_offset_minutes", 0, int),
        threads=_pick(args, cfg, "threads", 1, int),
    )
    return EXIT_OK


def cmd_rollup(args, cfg) -> int:
    registry = _cfg_path(args, cfg, "registry")
    if registry is None:
        raise CdrError("--registry is required")
    run_rollup(args.presence, args.transitions, registry, _pick(args, cfg, "window_days", 7, int),
               args.out_dir, _pick(args, cfg, "origin_day", None, int))
    return EXIT_OK


def cmd_suppress(args, cfg) -> int:
    k = _pick(args, cfg, "k", None, int) or _pick(args, cfg, "min_count_k", 10, int)
    suppress_files(args.inputs, args.out_dir, k)
    return EXIT_OK


def cmd_export(args, cfg) -> int:
    policy_path = _cfg_path(args, cfg, "policy")
    policy = load_policy(policy_path) if policy_path else ExportPolicy()
    return run_export(policy, args.input, args.zone)


def cmd_verify(args, cfg) -> int:
    from .verify import verify_zone
    registry = _cfg_path(args, cfg, "registry")
    if registry is None:
        raise CdrError("--registry is required")
    report = verify_zone(args.raw, args.against, registry, _cfg_path(args, cfg, "key_file"),
                         _pick(args, cfg, "epoch"))
    for line in report.lines():
        print(line)
    return EXIT_OK if report.ok else EXIT_ERROR


def cmd_pipeline(args, cfg) -> int:
    from .pipeline import run_pipeline
    if args.config is None:
        raise CdrError("pipeline needs --config")
    overrides = {}
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise CdrError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    pcfg = load_pipeline_config(args.config, overrides)
    threads = args.threads or int(overrides.get("threads", cfg.get("threads", 1)))
    return run_pipeline(pcfg, threads=threads, start_at=args.start_at)


COMMANDS = {
    "synth": cmd_synth,
    "pseudonymize": cmd_pseudonymize,
    "aggregate": cmd_aggregate,
    "rollup": cmd_rollup,
    "suppress": cmd_suppress,
    "export": cmd_export,
    "verify": cmd_verify,
    "pipeline": cmd_pipeline,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args, _settings(args))
    except StageError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except (CdrError, OSError, ValueError) as exc:
        log.error("%s: %s", args.command, exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
