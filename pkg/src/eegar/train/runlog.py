"""Append-only metrics written as JSON lines and CSV side by side."""

from __future__ import annotations

import csv
import json
from pathlib import Path


class MetricsLog:
    def __init__(self, run_dir=None, columns: tuple[str, ...] = ("step", "lr", "loss")):
        self.columns = tuple(columns)
        self.rows: list[dict] = []
        self.dir = Path(run_dir) if run_dir is not None else None
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)
            self._rewrite()

    def _rewrite(self) -> None:
        with open(self.dir / "metrics.jsonl", "w", encoding="utf-8") as fh:
            for r in self.rows:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        with open(self.dir / "metrics.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow(_cells(r, self.columns))

    def append(self, row: dict) -> None:
        unknown = set(row) - set(self.columns)
        if unknown:
            raise KeyError(f"metrics columns {sorted(unknown)} not declared")
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ValueError(f"step {row['step']} does not follow {self.rows[-1]['step']}")
        self.rows.append(row)
        if self.dir is None:
            return
        with open(self.dir / "metrics.jsonl", "a", encoding="utf-8") as fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
        with open(self.dir / "metrics.csv", "a", encoding="utf-8", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(_cells(row, self.columns))

    def truncate(self, last_step: int) -> None:
        """Drop rows after ``last_step`` (used when resuming from a checkpoint)."""
        self.rows = [r for r in self.rows if r["step"] <= last_step]
        if self.dir is not None:
            self._rewrite()

    @classmethod
    def load(cls, run_dir, columns) -> "MetricsLog":
        log = cls(None, columns)
        path = Path(run_dir) / "metrics.jsonl"
        if path.exists():
            log.rows = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line]
        log.dir = Path(run_dir)
        return log

    def last(self, key: str):
        for r in reversed(self.rows):
            if r.get(key) is not None:
                return r[key]
        return None


def _cells(row: dict, columns) -> list:
    return ["" if row.get(c) is None else repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns]
