"""Command line entry point: ``quickclear run | quick-clear | analyze``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from quickclear.errors import ConfigError, ParseError, PortInUse, QuickClearError
from quickclear.harness.runner import RunManifest, analyze, quick_clear, run
from quickclear.harness.transcript import ChainBroken
from quickclear.scenario import Preset

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_CHAIN = 3
EXIT_PORT = 4


def _run_args(p: argparse.ArgumentParser, default_preset: str) -> None:
    p.add_argument("--preset", default=default_preset, choices=[x.value for x in Preset])
    p.add_argument("--mode", default="sim", type=str.upper, choices=["SIM", "LIVE"])
    p.add_argument("--seed", type=int)
    p.add_argument("--config", type=Path, help="JSON file overlaid on the preset")
    p.add_argument("--out", type=Path, help="artifact directory")
    p.add_argument("--duration-ms", type=int)
    p.add_argument("--udp-port", type=int)
    p.add_argument("--cmp-port", type=int)
    p.add_argument("--ws-port", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="quickclear", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    _run_args(sub.add_parser("run", help="run an experiment preset"), "exp1")
    _run_args(sub.add_parser("quick-clear", help="run and verify the Quick Clear chain"), "quick-clear")
    an = sub.add_parser("analyze", help="summarize raw records CSV files")
    an.add_argument("records", nargs="+", type=Path)
    an.add_argument("--out", type=Path, help="report path (.json or .csv)")
    return ap


def _manifest(a: argparse.Namespace) -> RunManifest:
    ports = {k: v for k, v in (("udp", a.udp_port), ("cmp", a.cmp_port), ("ws", a.ws_port)) if v is not None}
    return RunManifest(
        preset=a.preset,
        mode=a.mode,
        seed=a.seed,
        duration_ms=a.duration_ms,
        config_path=a.config,
        out_dir=a.out,
        ports=ports,
    )


def _print_report(report) -> None:
    print(f"{'hop':<8} {'sent':>6} {'recv':>6} {'drop%':>6} {'mean':>9} {'p50':>9} {'p95':>9}")
    for s in report:
        def f(v):
            return "-" if v is None else f"{v:.1f}"
        print(f"{s.hop.value:<8} {s.count_sent:>6} {s.count_received:>6} {s.drop_pct:>6.2f} "
              f"{f(s.mean_ms):>9} {f(s.median_ms):>9} {f(s.p95_ms):>9}")


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    a = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if a.command == "analyze":
            _print_report(analyze(a.records, a.out))
            return EXIT_OK
        m = _manifest(a)
        if a.command == "run":
            ro = run(m)
            _print_report(ro.report)
        else:
            try:
                ro = quick_clear(m)
            except ChainBroken as e:
                print(e.transcript.render())
                print(f"chain broken at {e.stage.value}", file=sys.stderr)
                return EXIT_CHAIN
            assert ro.transcript is not None
            print(ro.transcript.render())
        for name, path in sorted(ro.artifacts.items()):
            print(f"wrote {path}")
        return EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except PortInUse as e:
        print(f"port in use: {e}", file=sys.stderr)
        return EXIT_PORT
    except (ParseError, QuickClearError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    raise SystemExit(main())
