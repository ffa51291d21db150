"""CSV metric logs and run manifests.

CSVs always carry a header row; the column set is fixed by the first row
written. Manifests use the same INI format as config files and pin the
config snapshot, seeds, timestamps and checkpoint content hashes so a run
can be reproduced or chained from its manifest alone.
"""

from __future__ import annotations

import configparser
import csv
import datetime
import io
import os

from . import __version__
from .errors import ContractError

MANIFEST_NAME = "manifest.ini"
CSV_SCHEMA_VERSION = "1"


class CsvLogger:
    def __init__(self, path: str):
        self.path = path
        self.columns: list[str] | None = None
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)

    def append(self, row: dict):
        fresh = self.columns is None
        if fresh:
            self.columns = list(row.keys())
        mode = "w" if fresh else "a"
        with open(self.path, mode, newline="") as f:
            w = csv.DictWriter(f, fieldnames=self.columns, extrasaction="ignore")
            if fresh:
                w.writeheader()
            w.writerow(row)


def write_rows(path: str, rows: list[dict]):
    if not rows:
        raise ContractError("refusing to write an empty CSV")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        w.writeheader()
        for r in rows:
            w.writerow(r)


def read_rows(path: str) -> list[dict]:
    with open(path, newline="") as f:
        return [dict(r) for r in csv.DictReader(f)]


def write_manifest(out_dir: str, command: str, seed: int, config_path: str | None,
                   artifacts: dict[str, str], hashes: dict[str, str],
                   extra: dict | None = None) -> str:
    cp = configparser.ConfigParser()
    cp["run"] = {
        "command": command,
        "seed": str(seed),
        "package_version": __version__,
        "csv_schema": CSV_SCHEMA_VERSION,
        "timestamp_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    if config_path:
        cp["run"]["config"] = config_path
    cp["artifacts"] = {k: str(v) for k, v in artifacts.items()}
    cp["hashes"] = {k: str(v) for k, v in hashes.items()}
    if extra:
        cp["results"] = {k: str(v) for k, v in extra.items()}
    path = os.path.join(out_dir, MANIFEST_NAME)
    os.makedirs(out_dir, exist_ok=True)
    with open(path, "w") as f:
        cp.write(f)
    return path


def read_manifest(path: str) -> dict:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise ContractError(f"manifest not found: {path!r}")
    return {section: dict(cp[section]) for section in cp.sections()}


def manifest_checkpoint(path: str) -> str:
    """Checkpoint stem referenced by a manifest (for command chaining)."""
    m = read_manifest(path)
    stem = m.get("artifacts", {}).get("checkpoint")
    if not stem:
        raise ContractError(f"manifest {path!r} lists no checkpoint artifact")
    return stem
