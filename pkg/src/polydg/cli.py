"""Command-line interface.

Subcommands: assemble, solve, march, partition, study, bench.  Each reads
an optional key=value config file (-c) plus repeatable -o key=value
overrides; see the README for the key glossary.
"""

from __future__ import annotations

import argparse
import sys

from .harness import ConfigError, RunConfig, run_assemble, run_bench, run_march, run_partition, run_solve, run_study


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", help="key=value config file")
    p.add_argument(
        "-o", "--override", action="append", default=[], metavar="KEY=VALUE",
        help="override a config entry (repeatable)",
    )


def _config_from(args: argparse.Namespace) -> RunConfig:
    overrides = {}
    for item in args.override:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, _, val = item.partition("=")
        overrides[key.strip()] = val.strip()
    return RunConfig.from_file(args.config, overrides)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="polydg",
        description="Interior-penalty dG assembly on polytopic meshes",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in (
        ("assemble", "assemble the system matrix and write Matrix Market + stats"),
        ("solve", "assemble, solve, and report errors when the solution is known"),
        ("march", "slab-by-slab space-time solve of a parabolic problem"),
        ("partition", "partitioned per-worker assembly with stack verification"),
        ("study", "convergence study over a mesh sequence"),
        ("bench", "timing comparison of both assembly approaches"),
    ):
        _add_common(sub.add_parser(name, help=doc))

    args = parser.parse_args(argv)
    try:
        config = _config_from(args)
        if args.command == "assemble":
            _, _, stats = run_assemble(config)
            print(stats.to_csv(), end="")
            print(f"matrix written to {config.out}.mtx", file=sys.stderr)
        elif args.command == "solve":
            result, report = run_solve(config)
            print(f"residual {result.residual:.3e} in {result.iterations} iterations")
            if report is not None:
                print(f"l2_error {report.l2:.6e}")
                print(f"energy_error {report.energy:.6e}")
            if not result.converged:
                print("warning: solver did not reach the tolerance", file=sys.stderr)
                return 2
        elif args.command == "march":
            solutions, err = run_march(config)
            print(f"marched {len(solutions)} slabs")
            if err is not None:
                print(f"l2l2_error {err:.6e}")
        elif args.command == "partition":
            partition, partials, gathered = run_partition(config)
            print(
                f"parts {partition.n_parts} "
                f"weights {','.join(f'{w:g}' for w in partition.weights)} "
                f"cut_interfaces {partition.cut_interfaces.size} "
                f"nnz {gathered.nnz}"
            )
        elif args.command == "study":
            rows = run_study(config)
            with open(f"{config.out}.study.csv", "r", encoding="utf-8") as fh:
                print(fh.read(), end="")
        elif args.command == "bench":
            stats = run_bench(config)
            for approach in sorted(stats):
                print(f"# approach {approach}")
                print(stats[approach].to_csv(), end="")
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
