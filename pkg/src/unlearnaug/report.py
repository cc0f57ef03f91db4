"""Report rows, aggregates and their CSV/JSON serialisation."""

from __future__ import annotations

import csv
import io
import json
import os
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError
from .evaluation import METRICS, MetricsRecord, metric_gap

COLUMNS = ("dataset", "method", "policy", "forget_mode", "forget_param", "seed",
           "UA", "RA", "TA", "MIA", "RTE", "gap_UA", "gap_RA", "gap_TA", "gap_MIA", "AG", "gap_mode")
AGG_KEYS = ("dataset", "method", "policy", "forget_mode", "forget_param")
RETRAIN = "Retrain"


def _sort_key(row: dict) -> tuple:
    return (row["dataset"], row["method"], row["policy"], row["forget_mode"], float(row["forget_param"]),
            int(row.get("seed", 0)))


def _group_key(row: dict) -> tuple:
    return (row["dataset"], row["policy"], row["forget_mode"], row["forget_param"])


def _as_record(row: dict) -> MetricsRecord:
    return MetricsRecord(row["UA"], row["RA"], row["TA"], row["MIA"], row.get("RTE") or 0.0,
                         row["method"], row["policy"], int(row["seed"]))


def build_rows(results: Iterable[dict], gap_mode: str = "per-seed", include_rte: bool = True) -> list[dict]:
    """One report row per run, with gaps measured against the matching retrain runs.

    ``results`` are dicts carrying the key columns plus UA/RA/TA/MIA/RTE.
    Per-seed gaps compare against the retrain run with the same seed;
    of-means gaps compare against the mean over that cell's retrain runs.
    Rows without a matching retrain reference get empty gap fields.
    """
    if gap_mode not in ("per-seed", "of-means"):
        raise InputError(f"unknown gap mode {gap_mode!r}")
    results = list(results)
    retrains: dict[tuple, dict[int, dict]] = defaultdict(dict)
    for r in results:
        if r["method"] == RETRAIN:
            retrains[_group_key(r)][int(r["seed"])] = r
    rows = []
    for r in results:
        ref = retrains.get(_group_key(r), {})
        gaps: dict[str, float | None] = {m: None for m in METRICS}
        if gap_mode == "per-seed" and int(r["seed"]) in ref:
            gaps = {m: abs(r[m] - ref[int(r["seed"])][m]) for m in METRICS}
        elif gap_mode == "of-means" and ref:
            gaps = {m: abs(r[m] - float(np.mean([x[m] for x in ref.values()]))) for m in METRICS}
        ag = None if gaps["UA"] is None else (gaps["UA"] + gaps["RA"] + gaps["TA"] + gaps["MIA"]) / 4
        row = {k: r[k] for k in COLUMNS[:6]}
        row.update({m: float(r[m]) for m in METRICS})
        row["RTE"] = float(r["RTE"]) if include_rte and r.get("RTE") is not None else None
        row.update({f"gap_{m}": gaps[m] for m in METRICS})
        row["AG"] = ag
        row["gap_mode"] = gap_mode
        rows.append(row)
    rows.sort(key=_sort_key)
    return rows


def _std(values: Sequence[float]) -> float:
    # sample standard deviation; a single run has no spread
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def aggregate(results: Iterable[dict], gap_mode: str = "per-seed", include_rte: bool = True) -> list[dict]:
    """Mean and standard deviation per (dataset, method, policy, forget spec), with gaps in both modes."""
    results = list(results)
    groups: dict[tuple, list[dict]] = defaultdict(list)
    for r in results:
        groups[tuple(r[k] for k in AGG_KEYS)].append(r)
    out = []
    for key, runs in groups.items():
        retrain = groups.get((key[0], RETRAIN) + key[2:], [])
        row = dict(zip(AGG_KEYS, key))
        row["n"] = len(runs)
        for m in METRICS + ("RTE",):
            if m == "RTE" and not include_rte:
                row["RTE_mean"] = row["RTE_std"] = None
                continue
            vals = [float(r.get(m) or 0.0) for r in runs]
            row[f"{m}_mean"] = float(np.mean(vals))
            row[f"{m}_std"] = _std(vals)
        gaps = {}
        for mode in ("per-seed", "of-means"):
            try:
                gaps[mode] = metric_gap([_as_record(r) for r in runs], [_as_record(r) for r in retrain], mode)
            except InputError:
                gaps[mode] = None
        chosen = gaps[gap_mode]
        for m in METRICS:
            row[f"gap_{m}"] = None if chosen is None else getattr(chosen, m)
        row["AG_per_seed"] = None if gaps["per-seed"] is None else gaps["per-seed"].AG
        row["AG_of_means"] = None if gaps["of-means"] is None else gaps["of-means"].AG
        row["gap_mode"] = gap_mode
        for m in METRICS:
            cell = f"{row[f'{m}_mean']:.2f} ± {row[f'{m}_std']:.2f}"
            if chosen is not None:
                cell += f" ({getattr(chosen, m):.2f})"
            row[f"{m}_table"] = cell
        out.append(row)
    out.sort(key=lambda r: _sort_key(r))
    return out


# ---------------------------------------------------------------- serialisation


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def render(rows: Sequence[dict], fmt: str, columns: Sequence[str] | None = None) -> str:
    columns = list(columns or rows[0].keys())
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(c)) for c in columns])
        return buf.getvalue()
    if fmt == "json":
        clean = [{c: (float(row[c]) if isinstance(row.get(c), np.floating) else row.get(c)) for c in columns}
                 for row in rows]
        return json.dumps(clean, indent=2, ensure_ascii=False) + "\n"
    raise InputError(f"unknown report format {fmt!r}")


def emit_report(rows: Sequence[dict], fmt: str, path: str | Path, columns: Sequence[str] = COLUMNS) -> Path:
    """Write ``rows`` as CSV or JSON; an unwritable path raises ``OSError``."""
    if not rows:
        raise InputError("cannot emit an empty report")
    path = Path(path)
    _atomic_write(path, render(rows, fmt, columns))
    return path


def read_csv_report(path: str | Path) -> list[dict]:
    """Parse a report CSV back, converting numeric columns."""
    numeric = {"UA", "RA", "TA", "MIA", "RTE", "gap_UA", "gap_RA", "gap_TA", "gap_MIA", "AG"}
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for raw in csv.DictReader(fh):
            row: dict = {}
            for k, v in raw.items():
                if k in numeric:
                    row[k] = float(v) if v != "" else None
                elif k == "seed":
                    row[k] = int(v)
                elif k == "forget_param":
                    row[k] = float(v)
                else:
                    row[k] = v
            rows.append(row)
    return rows


def write_reports(results: Sequence[dict], out_dir: str | Path, gap_mode: str = "per-seed",
                  include_rte: bool = False) -> dict[str, str]:
    """Emit report and aggregate files in both formats, plus a timing table.

    Wall-clock RTE only lands in the report files when ``include_rte`` is set;
    otherwise it goes to ``timings.csv`` so the reports stay byte-reproducible.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = build_rows(results, gap_mode, include_rte)
    agg = aggregate(results, gap_mode, include_rte)
    paths = {}
    for fmt in ("csv", "json"):
        paths[f"report.{fmt}"] = str(emit_report(rows, fmt, out / f"report.{fmt}"))
        paths[f"aggregate.{fmt}"] = str(emit_report(agg, fmt, out / f"aggregate.{fmt}", list(agg[0].keys())))
    timing_rows = sorted(({k: r[k] for k in COLUMNS[:6]} | {"RTE": r.get("RTE")} for r in results), key=_sort_key)
    paths["timings.csv"] = str(emit_report(timing_rows, "csv", out / "timings.csv", list(COLUMNS[:6]) + ["RTE"]))
    return paths
