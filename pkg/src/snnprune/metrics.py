"""Per-epoch metrics CSV."""

from __future__ import annotations

import csv
from pathlib import Path

COLUMNS = ("epoch", "phase", "loss", "acc", "s", "y", "z", "resource", "counted_sparsity")


class MetricsWriter:
    """Appends one row per call and flushes; the header is written only to an empty file."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not self.path.exists() or self.path.stat().st_size == 0
        self._fh = open(self.path, "a", newline="")
        self._w = csv.DictWriter(self._fh, fieldnames=COLUMNS)
        if fresh:
            self._w.writeheader()
            self._fh.flush()

    def append(self, row: dict):
        self._w.writerow({k: row[k] for k in COLUMNS})
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        for k in COLUMNS:
            if k != "phase":
                r[k] = float(r[k])
        r["epoch"] = int(r["epoch"])
    return rows
