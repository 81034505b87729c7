"""``cmcancel`` command line: sweep-xi, compare, adjust, ingest."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .experiments import ConfigError, cmd_adjust, cmd_compare, cmd_ingest, cmd_sweep_xi, load_config
from .io import CouplingFormatError
from .misalign import PipelineError

EXIT_OK, EXIT_CONFIG, EXIT_PIPELINE, EXIT_IO = 0, 1, 2, 3

_COMMANDS = {"sweep-xi": cmd_sweep_xi, "compare": cmd_compare, "adjust": cmd_adjust}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cmcancel", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--threads", type=int, default=1, help="worker threads for Monte-Carlo batches")
    p = sub.add_parser("ingest")
    p.add_argument("path", help="coupling text file, one tap per line")
    p.add_argument("--out", default=".", help="output directory")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "ingest":
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            s = cmd_ingest(args.path, out)
            print(f"length={s['length']} energy={s['energy']:.6g} span_99.5%={s['span']}")
            return EXIT_OK
        if args.threads < 1:
            raise ConfigError("--threads: must be >= 1")
        cfg = load_config(args.config, seed=args.seed, output=args.out)
        cfg.output.mkdir(parents=True, exist_ok=True)
        result = _COMMANDS[args.command](cfg, cfg.output, threads=args.threads)
        if "T_opt" in result:
            print(f"T_opt={result['T_opt']}")
        if "report" in result:
            r = result["report"]
            print(f"T_trg={r.T_trg} L_hat={r.L_hat} T_opt={r.T_opt} xi {r.xi_before:.6g} -> {r.xi_after:.6g}")
        print(f"wrote results to {cfg.output}")
        return EXIT_OK
    except (ConfigError, CouplingFormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PipelineError as exc:
        print(f"pipeline rejected: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
