"""Run manifests, checksums and report files.

A run directory holds ``manifest.json`` plus report files. The manifest's
``run_id`` is a SHA-256 over its reproducible part (config, inputs, seeds,
library version; not wall-clock and not the output directory), so reruns with the same seed produce the
same ``run_id`` and byte-identical reports. Every CSV starts with a
``# run_id=...`` comment line and every JSON file carries a ``run_id`` key.
``checksums.sha256`` lists the SHA-256 of every output file.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

from .. import __version__

FORMATS = ("csv", "json", "plotdata")
# where a run is written does not change what it computes
LOCATION_KEYS = ("output_dir", "checkpoint_dir")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _jsonable(x):
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if hasattr(x, "item") and not isinstance(x, (str, bytes)):
        return _jsonable(x.item())
    return x


def _without(d: dict, keys) -> dict:
    return {k: v for k, v in d.items() if k not in keys}


@dataclass
class RunManifest:
    config: dict
    inputs: dict = field(default_factory=dict)
    stages: list = field(default_factory=list)
    version: str = __version__
    started: float = field(default_factory=time.time)
    finished: float | None = None

    @property
    def reproducible(self) -> dict:
        config = {k: (_without(v, LOCATION_KEYS) if isinstance(v, dict) else v) for k, v in self.config.items()}
        return {"config": config, "inputs": self.inputs, "version": self.version}

    @property
    def run_id(self) -> str:
        return sha256_json(_jsonable(self.reproducible))

    def add_stage(self, name: str, **info):
        self.stages.append(dict(stage=name, **info))

    def to_dict(self) -> dict:
        return _jsonable({"run_id": self.run_id, "config": self.config, "inputs": self.inputs,
                          "version": self.version, "stages": self.stages,
                          "wall_clock": {"started": self.started, "finished": self.finished}})

    def write(self, directory) -> Path:
        path = Path(directory) / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


@dataclass
class Table:
    columns: list
    rows: list = field(default_factory=list)

    def add(self, *values):
        if len(values) != len(self.columns):
            raise ValueError(f"row has {len(values)} values for {len(self.columns)} columns")
        self.rows.append(list(values))

    def records(self) -> list:
        return [dict(zip(self.columns, r)) for r in self.rows]


@dataclass
class ReportBundle:
    """Named tables, plot series and a summary dict for one run."""

    name: str
    manifest: RunManifest
    tables: dict = field(default_factory=dict)
    plots: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)


def _cell(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(float(v))
    if v is None:
        return ""
    if hasattr(v, "item"):
        return _cell(v.item())
    return str(v)


def write_table_csv(table: Table, path, run_id: str) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(f"# run_id={run_id}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table.columns)
        for row in table.rows:
            w.writerow([_cell(v) for v in row])
    return path


def read_table_csv(path) -> tuple:
    """Returns ``(run_id, columns, rows as strings)``."""
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        run_id = first.split("=", 1)[1] if first.startswith("# run_id=") else None
        rows = list(csv.reader(fh))
    return run_id, rows[0] if rows else [], rows[1:]


def write_report(bundle: ReportBundle, directory, formats=FORMATS) -> list:
    """Write tables (csv/json), plot series (plotdata) and the checksum list.

    Empty tables still produce a header-only CSV.
    """
    for f in formats:
        if f not in FORMATS:
            raise ValueError(f"unknown report format {f!r}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    run_id = bundle.manifest.run_id
    written = []
    if "csv" in formats:
        for name in sorted(bundle.tables):
            written.append(write_table_csv(bundle.tables[name], directory / f"{name}.csv", run_id))
    if "json" in formats:
        payload = {"run_id": run_id, "report": bundle.name, "summary": bundle.summary,
                   "tables": {n: bundle.tables[n].records() for n in sorted(bundle.tables)}}
        p = directory / f"{bundle.name}.json"
        p.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")
        written.append(p)
    if "plotdata" in formats:
        for name in sorted(bundle.plots):
            written.append(write_table_csv(bundle.plots[name], directory / f"{name}.plot.csv", run_id))
    bundle.manifest.finished = time.time()
    written.append(bundle.manifest.write(directory))
    files = sorted(set(written) | {Path(a) for a in bundle.artifacts})
    lines = [f"{sha256_file(p)}  {p.relative_to(directory) if p.is_relative_to(directory) else p}"
             for p in files if p.name != "manifest.json"]
    check = directory / "checksums.sha256"
    check.write_text("\n".join(lines) + ("\n" if lines else ""))
    return written + [check]


def verify_checksums(directory) -> list:
    """Re-hash every listed file; return the names whose hash changed or that are missing."""
    directory = Path(directory)
    bad = []
    for line in (directory / "checksums.sha256").read_text().splitlines():
        digest, name = line.split("  ", 1)
        p = directory / name
        if not p.exists() or sha256_file(p) != digest:
            bad.append(name)
    return bad


def mark_failed(directory, stage: str, exc: BaseException) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    p = directory / "FAILED"
    p.write_text(f"stage: {stage}\nerror: {type(exc).__name__}: {exc}\n")
    return p
