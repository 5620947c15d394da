"""Command-line entry point ``fbflow <command> --config PATH``."""
from __future__ import annotations

import argparse
import re
import sys
from pathlib import Path

from . import __version__
from .io import COMMANDS, EXIT_CONFIG, ConfigError, RunReport, atomic_write, json_bytes, load_config, run


def _grid(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"\s*(\d+)\s*[xX]\s*(\d+)\s*", text)
    if not m:
        raise argparse.ArgumentTypeError(f"expected NWxNS, got {text!r}")
    return int(m.group(1)), int(m.group(2))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fbflow", description="Orbit-chart free-boundary solver.")
    ap.add_argument("--version", action="version", version=f"fbflow {__version__}")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="JSON configuration file")
    ap.add_argument("--out", help="output directory (overrides outputs.directory)")
    ap.add_argument("--grid", type=_grid, help="grid size as NWxNS")
    ap.add_argument("--tol", type=float, help="complementarity solver tolerance")
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else 0
    try:
        cfg = load_config(args.config).with_overrides(args.out, args.grid, args.tol)
    except ConfigError as exc:
        print(f"fbflow: config error: {exc}", file=sys.stderr)
        if args.out:
            report = RunReport(args.command, exit_code=EXIT_CONFIG, error=str(exc))
            atomic_write(Path(args.out) / "report.json", json_bytes(report.to_dict()))
        return EXIT_CONFIG
    report = run(cfg, args.command)
    for chk in report.checks:
        if chk["kind"] == "assertion" or not chk["passed"]:
            flag = "ok  " if chk["passed"] else ("FAIL" if chk["kind"] == "assertion" else "no  ")
            print(f"{flag} {chk['name']}: {chk['value']}")
    if report.error:
        print(f"fbflow: {report.error}", file=sys.stderr)
    print(f"fbflow: {args.command} finished with exit code {report.exit_code}; "
          f"artifacts in {cfg.outputs['directory']}")
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
