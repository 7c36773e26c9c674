"""Plot-ready CSV and JSON exports of a diffusion series."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

from .diffusion import SERIES_FIELDS, DiffusionSeries

CSV_COLUMNS = ("species", "region_kind", "quadrant", "segment", "angle_lo", "angle_hi",
               "property", "step", "time_s", "M", "MSQ", "msd", "d", "n_eff", "w_sum")


def _num(x: float) -> str:
    # repr is the shortest string that round-trips the double exactly
    return repr(float(x)) if not math.isnan(x) else "nan"


def csv_rows(series: DiffusionSeries):
    for row in series.rows():
        region = row["region"]
        lo, hi = region.bounds
        seg = region.kind == "quadrant-segment"
        yield [series.species, region.kind,
               region.quadrant if seg else "", region.segment if seg else "",
               _num(lo), _num(hi), row["property"], row["step"], _num(row["time_s"]),
               _num(row["M"]), _num(row["MSQ"]), _num(row["msd"]), _num(row["d"]),
               int(row["n_eff"]), _num(row["w_sum"])]


def write_csv(series: DiffusionSeries, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        writer.writerows(csv_rows(series))
    return path


def _clean(values):
    return [None if math.isnan(v) else v for v in values]


def to_document(series: DiffusionSeries) -> dict:
    regions = []
    for i, region in enumerate(series.regions):
        lo, hi = region.bounds
        entry = {
            "label": region.label,
            "kind": region.kind,
            "quadrant": region.quadrant,
            "segment": region.segment,
            "angle_lo": lo,
            "angle_hi": hi,
            "origin": region.origin,
            "particles": series.region_sizes[i],
            "series": {},
        }
        for j, prop in enumerate(series.properties):
            entry["series"][prop] = {
                name: (getattr(series, name)[i, j].astype(int).tolist() if name == "n_eff"
                       else _clean(getattr(series, name)[i, j].tolist()))
                for name in SERIES_FIELDS
            }
        regions.append(entry)
    return {
        "species": series.species,
        "properties": list(series.properties),
        "steps": series.steps.tolist(),
        "time_s": series.times.tolist(),
        "regions": regions,
    }


def write_json(series: DiffusionSeries, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(to_document(series), indent=1) + "\n")
    return path


def read_csv(path) -> list[dict]:
    """Rows of an exported CSV with numeric columns parsed."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            for key in ("angle_lo", "angle_hi", "time_s", "M", "MSQ", "msd", "d", "w_sum"):
                row[key] = float(row[key])
            for key in ("step", "n_eff"):
                row[key] = int(row[key])
            for key in ("quadrant", "segment"):
                row[key] = int(row[key]) if row[key] != "" else None
            out.append(row)
    return out
