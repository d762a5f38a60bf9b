"""Dataset ingestion, configuration handling, and result serialization."""

from __future__ import annotations

import csv
import hashlib
import json
import os

import numpy as np

from .kernels import Location
from .model import SpatialDataset

GEORGIA_TEMPLATE_COLUMNS = ["id", "lat", "lon", "y", "x1", "x2", "x3", "z1", "z2", "z3"]
GEORGIA_TEMPLATE_NOTES = [
    "# y: median monthly housing cost for occupied housing units",
    "# x1: unemployment percentage (adults 18-64); x2: per-capita property taxes;",
    "# x3: median home market value (thousand dollars)",
    "# z1: White population percentage; z2: median age; z3: population (thousands)",
]
SCHEMA_VERSION = 1


def load_dataset(path: str, x_cols: list[str] | None = None,
                 z_cols: list[str] | None = None, y_col: str = "y",
                 id_col: str = "id", lat_col: str = "lat", lon_col: str = "lon",
                 intercept: bool = False) -> SpatialDataset:
    """Read a site-per-row CSV into a SpatialDataset.

    Column roles (regression vs auxiliary) come from the arguments, never
    inferred. Defaults: every ``x*`` column is a regression covariate and every
    ``z*`` column an auxiliary covariate. Lines starting with '#' are skipped.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = [c.strip() for c in rows[0]]
    if x_cols is None:
        x_cols = [c for c in header if c.startswith("x")]
    if z_cols is None:
        z_cols = [c for c in header if c.startswith("z")]
    for col in [id_col, lat_col, lon_col, y_col, *x_cols, *z_cols]:
        if col not in header:
            raise ValueError(f"{path}: missing column {col!r}")
    idx = {c: header.index(c) for c in header}

    ids, lats, lons, ys, xs, zs = [], [], [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")

        def cell(col):
            raw = row[idx[col]].strip()
            try:
                return float(raw)
            except ValueError:
                raise ValueError(
                    f"{path}:{lineno}: non-numeric value {raw!r} in column {col!r}")

        ids.append(row[idx[id_col]].strip())
        lats.append(cell(lat_col))
        lons.append(cell(lon_col))
        ys.append(cell(y_col))
        xs.append([cell(c) for c in x_cols])
        zs.append([cell(c) for c in z_cols])

    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate site ids")
    locs = [Location(id=i, lat=la, lon=lo) for i, la, lo in zip(ids, lats, lons)]
    x = np.array(xs)
    if intercept:
        x = np.column_stack([np.ones(len(ids)), x])
    z = np.array(zs) if z_cols else np.empty((len(ids), 0))
    return SpatialDataset(y=np.array(ys), x=x, z_aux=z, locs=locs)


def save_dataset(data: SpatialDataset, path: str) -> None:
    """Serialize a dataset to the CSV schema accepted by load_dataset."""
    p = data.p
    j = data.n_aux
    header = ["id", "lat", "lon", "y"] + [f"x{i+1}" for i in range(p)] \
        + [f"z{i+1}" for i in range(j)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, loc in enumerate(data.locs):
            row = [loc.id, repr(loc.lat), repr(loc.lon), repr(float(data.y[i]))]
            row += [repr(float(v)) for v in data.x[i]]
            row += [repr(float(v)) for v in data.z_aux[i]] if j else []
            writer.writerow(row)


def config_hash(config: dict) -> str:
    """Stable short hash of a configuration mapping."""
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _header_lines(seed, cfg_hash) -> list[str]:
    return [f"# seed: {seed}", f"# config: {cfg_hash}"]


def emit_fit(report, outdir: str, seed, cfg_hash: str,
             site_ids: list[str], trace_rows: list[dict]) -> None:
    """Write fit.json, labels.csv, and trace.csv for one fitted chain."""
    os.makedirs(outdir, exist_ok=True)
    doc = {"schema_version": SCHEMA_VERSION, "seed": seed, "config_hash": cfg_hash,
           "report": report.to_dict()}
    with open(os.path.join(outdir, "fit.json"), "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")

    with open(os.path.join(outdir, "labels.csv"), "w", newline="") as fh:
        for line in _header_lines(seed, cfg_hash):
            fh.write(line + "\n")
        writer = csv.writer(fh)
        writer.writerow(["id", "cluster"])
        for sid, lab in zip(site_ids, report.modal_labels):
            writer.writerow([sid, lab + 1])

    if trace_rows:
        with open(os.path.join(outdir, "trace.csv"), "w", newline="") as fh:
            for line in _header_lines(seed, cfg_hash):
                fh.write(line + "\n")
            writer = csv.DictWriter(fh, fieldnames=list(trace_rows[0].keys()))
            writer.writeheader()
            for row in trace_rows:
                writer.writerow(row)


def emit_metrics(results, aggregates: dict, outdir: str, seed, cfg_hash: str) -> None:
    """Write replicate-level metrics.csv and aggregate metrics.json."""
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "metrics.csv"), "w", newline="") as fh:
        for line in _header_lines(seed, cfg_hash):
            fh.write(line + "\n")
        writer = csv.writer(fh)
        writer.writerow(["rep_id", "rand_index", "k_hat", "lpml", "failed", "error"])
        for r in results:
            writer.writerow([r.rep_id, repr(float(r.ri)), r.k_hat,
                             repr(float(r.lpml)), int(r.failed), r.error])
    doc = {"schema_version": SCHEMA_VERSION, "seed": seed, "config_hash": cfg_hash,
           "aggregates": aggregates}
    with open(os.path.join(outdir, "metrics.json"), "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2, default=float)
        fh.write("\n")


def write_georgia_template(path: str) -> None:
    """Emit the expected CSV header for the housing-cost dataset schema."""
    with open(path, "w", newline="") as fh:
        for line in GEORGIA_TEMPLATE_NOTES:
            fh.write(line + "\n")
        fh.write(",".join(GEORGIA_TEMPLATE_COLUMNS) + "\n")


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    import yaml
    with open(path) as fh:
        cfg = yaml.safe_load(fh) or {}
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return cfg
