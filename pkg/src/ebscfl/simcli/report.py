"""CSV emission with a versioned schema comment, plus gnuplot scripts for the curves."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .metrics import MetricsRow

SCHEMA_VERSION = 1
OUTPUT_ENV = "EBSCFL_OUTPUT_DIR"


def output_dir(flag: str | None, configured: str | None = None) -> Path:
    """``--out`` beats the environment variable, which beats the config file."""
    chosen = flag or os.environ.get(OUTPUT_ENV) or configured or "out"
    path = Path(chosen)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _fmt(value) -> str:
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(value)
    return str(value)


def write_csv(path: Path, schema: str, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    with open(path, "w", newline="") as fh:
        fh.write(f"# ebscfl {schema} schema v{SCHEMA_VERSION}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def read_csv(path: Path) -> tuple[str, list[dict[str, str]]]:
    with open(path, newline="") as fh:
        comment = fh.readline().strip()
        return comment, list(csv.DictReader(fh))


def metrics_header(m: int) -> list[str]:
    cols = ["round", "fa", "ma", "asr", "air"]
    for name in ("loss", "accuracy", "param_error"):
        cols += [f"{name}_{j}" for j in range(m)]
    return cols + ["client_bytes", "server_bytes"]


def metrics_table(rows: Sequence[MetricsRow]) -> list[list]:
    return [[r.round, r.fa, r.ma, r.asr, r.air, *r.loss, *r.accuracy, *r.param_error, r.client_bytes,
             r.server_bytes] for r in rows]


def write_metrics(path: Path, rows: Sequence[MetricsRow], m: int) -> Path:
    return write_csv(path, "metrics", metrics_header(m), metrics_table(rows))


def write_timings(path: Path, rows: Sequence[MetricsRow]) -> Path:
    phases = sorted({k for r in rows for k in r.seconds})
    return write_csv(path, "timings", ["round", *phases],
                     [[r.round, *(r.seconds.get(p, math.nan) for p in phases)] for r in rows])


def write_weights(path: Path, weights, clusters) -> Path:
    """Raw per-round weight and cluster traces, one column pair per client."""
    n = weights.shape[1]
    header = ["round", *(f"w_{i}" for i in range(n)), *(f"c_{i}" for i in range(n))]
    return write_csv(path, "weights", header,
                     [[k, *map(float, w), *map(int, c)] for k, (w, c) in enumerate(zip(weights, clusters))])


def write_records(path: Path, schema: str, records: Sequence[Mapping]) -> Path:
    header = list(records[0]) if records else []
    return write_csv(path, schema, header, [[rec[h] for h in header] for rec in records])


def write_dataclasses(path: Path, schema: str, items: Sequence) -> Path:
    return write_records(path, schema, [asdict(x) for x in items])


def write_gnuplot(path: Path, csv_name: str, columns: Sequence[str], title: str) -> Path:
    """Script plotting ``columns`` against the first column of ``csv_name``."""
    plots = ", ".join(f"'{csv_name}' using 1:'{c}' with lines title '{c}'" for c in columns)
    path.write_text(
        "set datafile separator ','\n"
        "set datafile commentschars '#'\n"
        "set key autotitle columnhead\n"
        f"set title '{title}'\n"
        "set xlabel 'round'\n"
        f"set terminal pngcairo size 900,540\nset output '{path.stem}.png'\n"
        f"plot {plots}\n"
    )
    return path
