"""``ebscfl`` command line: simulations, benchmarks and self-checks.

Exit codes: 0 success, 1 a check failed or the round was aborted, 2 bad
configuration or usage.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .kdc import ProtocolDims, keygen_selftest
from .protocol import RoundAborted
from .simcli.bench import GRIDS, EXPECTED_SLOPES, bench, trends_hold
from .simcli.config import ConfigError, RunConfig, load_config
from .simcli.equivalence import run_grid
from .simcli.report import (write_csv, write_dataclasses, write_gnuplot, write_metrics, write_records,
                            write_timings, write_weights, output_dir)
from .simcli.runner import MODES, simulate, twin_runs

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
SELFTEST_TOL = 1e-8

log = logging.getLogger("ebscfl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _layers(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("layers must be comma-separated integers, e.g. 2,2") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ebscfl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_output(sp):
        sp.add_argument("--out", help="output directory (overrides $EBSCFL_OUTPUT_DIR and the config)")
        return sp

    def with_config(sp):
        sp.add_argument("--config", type=Path, help="TOML run configuration")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--rounds", type=int, help="override the configured number of rounds")
        return with_output(sp)

    sp = with_output(sub.add_parser("keygen-selftest", help="check key-material invariants"))
    sp.add_argument("--n", type=int, default=4)
    sp.add_argument("--m", type=int, default=2)
    sp.add_argument("--l", type=int, default=8)
    sp.add_argument("--s", type=int, default=1)
    sp.add_argument("--seeds", type=int, default=5)

    with_config(sub.add_parser("run-plain", help="train with the plaintext robust aggregation"))
    sp = with_config(sub.add_parser("run-secure", help="train with the encrypted protocol"))
    sp.add_argument("--drop", type=int, action="append", default=[], metavar="CLIENT",
                    help="client that never submits (aborts the round)")
    sp = with_config(sub.add_parser("run-attack", help="attacked run plus its attack-free twin"))
    sp.add_argument("--mode", choices=MODES, default="secure")

    sp = with_output(sub.add_parser("bench", help="client/server scaling measurements"))
    sp.add_argument("--grid", choices=sorted(GRIDS), default="small")
    sp.add_argument("--seed", type=int, default=0)

    sp = with_output(sub.add_parser("equivalence", help="secure pipeline against the plaintext rule"))
    sp.add_argument("--n", type=int, nargs="+", default=[4])
    sp.add_argument("--m", type=int, nargs="+", default=[2])
    sp.add_argument("--l", type=int, nargs="+", default=[8])
    sp.add_argument("--seeds", type=int, default=20)
    sp.add_argument("--s", type=int, default=1)
    sp.add_argument("--layers", type=_layers)
    sp.add_argument("--weighting", choices=("cluster", "global"), default="cluster")
    sp.add_argument("--tol", type=float, default=1e-6)
    return p


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.rounds is not None:
        if args.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        cfg = replace(cfg, train=replace(cfg.train, rounds=args.rounds))
    return cfg


def _emit_run(result, out: Path, stem: str, na: float | None = None) -> None:
    rows = result.metrics(na)
    m = result.config.dims.m
    csv_name = f"{stem}.csv"
    write_metrics(out / csv_name, rows, m)
    write_weights(out / f"{stem}_weights.csv", result.history.series("weights"), result.history.series("clusters"))
    if any(r.seconds for r in rows):
        write_timings(out / f"{stem}_timings.csv", rows)
    write_gnuplot(out / f"{stem}.gp", csv_name, [f"param_error_{j}" for j in range(m)], stem)
    last = rows[-1]
    print(f"{stem}: rounds={len(rows)} final_accuracy={last.fa:.4f} max_accuracy={last.ma:.4f} "
          f"final_param_error={result.final_error:.4g} -> {out / csv_name}")


def cmd_keygen_selftest(args) -> int:
    out = output_dir(args.out)
    records, worst = [], 0.0
    for seed in range(args.seeds):
        dims = ProtocolDims(n=args.n, m=args.m, l=args.l, s=args.s)
        res = keygen_selftest(dims, seed)
        worst = max(worst, max(res.values()))
        records.append({"seed": seed, **res})
    write_records(out / "keygen_selftest.csv", "keygen-selftest", records)
    ok = worst <= SELFTEST_TOL
    print(f"keygen-selftest: worst residual {worst:.3g} ({'ok' if ok else 'FAIL'})")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_run(args, mode: str) -> int:
    cfg = _config(args)
    out = output_dir(args.out, cfg.output_dir)
    dropped = getattr(args, "drop", [])
    bad = [i for i in dropped if not 0 <= i < cfg.dims.n]
    if bad:
        raise ConfigError(f"--drop client(s) {bad} outside 0..{cfg.dims.n - 1}")
    try:
        result = simulate(cfg, mode, attack=False, dropped=dropped)
    except RoundAborted as exc:
        print(exc, file=sys.stderr)
        return EXIT_FAIL
    _emit_run(result, out, f"run_{mode}")
    return EXIT_OK


def cmd_run_attack(args) -> int:
    cfg = _config(args)
    if not cfg.attack.active:
        raise ConfigError("run-attack needs an [attack] section with a kind and a positive fraction")
    out = output_dir(args.out, cfg.output_dir)
    attacked, clean = twin_runs(cfg, args.mode)
    na = clean.final_accuracy
    _emit_run(clean, out, f"attack_{args.mode}_twin")
    _emit_run(attacked, out, f"attack_{args.mode}", na)
    last = attacked.metrics(na)[-1]
    print(f"NA={na:.4f} FA={last.fa:.4f} MA={last.ma:.4f} ASR={last.asr:.3f} AIR={last.air:.4f} "
          f"error ratio={attacked.final_error / clean.final_error:.3f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    out = output_dir(args.out)
    report = bench(args.grid, args.seed)
    write_records(out / "bench.csv", "bench", report.rows)
    checks = trends_hold(report)
    write_csv(out / "bench_slopes.csv", "bench-slopes", ["name", "measured", "reference"],
              [[k, v, EXPECTED_SLOPES.get(k, math.nan)] for k, v in sorted(report.slopes.items())])
    for k, v in sorted(report.slopes.items()):
        print(f"{k:>24s}: {v:7.3f}" + (f"  (reference {EXPECTED_SLOPES[k]:g})" if k in EXPECTED_SLOPES else ""))
    for k, ok in checks.items():
        print(f"{k:>24s}: {'ok' if ok else 'FAIL'}")
    return EXIT_OK if all(checks.values()) else EXIT_FAIL


def cmd_equivalence(args) -> int:
    out = output_dir(args.out)
    try:
        cases = run_grid(args.n, args.m, args.l, range(args.seeds), s=args.s, layers=args.layers,
                         weighting=args.weighting)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    write_dataclasses(out / "equivalence.csv", "equivalence", cases)
    failed = [c for c in cases if not c.ok(args.tol)]
    worst = max(c.max_rel_error for c in cases)
    print(f"equivalence: {len(cases)} cases, worst relative error {worst:.3g}, {len(failed)} failing")
    return EXIT_OK if not failed else EXIT_FAIL


COMMANDS = {
    "keygen-selftest": cmd_keygen_selftest,
    "run-plain": lambda a: cmd_run(a, "plain"),
    "run-secure": lambda a: cmd_run(a, "secure"),
    "run-attack": cmd_run_attack,
    "bench": cmd_bench,
    "equivalence": cmd_equivalence,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr, end="")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
