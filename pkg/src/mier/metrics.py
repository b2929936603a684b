"""Append-only run metrics with a stable CSV schema."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

FIELD_NAMES = (
    "run_id",
    "phase",
    "iteration",
    "samples_collected",
    "model_meta_loss",
    "critic_loss",
    "actor_loss",
    "mean_return",
    "synthetic_transitions_used",
    "wall_seconds",
)


@dataclass
class MetricsRow:
    run_id: str
    phase: str
    iteration: int
    samples_collected: int
    model_meta_loss: float = math.nan
    critic_loss: float = math.nan
    actor_loss: float = math.nan
    mean_return: float = math.nan
    synthetic_transitions_used: int = 0
    wall_seconds: float = 0.0


assert tuple(f.name for f in fields(MetricsRow)) == FIELD_NAMES


def _format(value) -> str:
    if isinstance(value, float):
        return repr(value)  # shortest round-trip decimal, '.' separator
    return str(value)


class MetricsWriter:
    """Writes the header once, then one line per row."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", encoding="utf-8", newline="\n")
        self._fh.write(",".join(FIELD_NAMES) + "\n")
        self._fh.flush()

    def write(self, row: MetricsRow):
        values = [_format(getattr(row, name)) for name in FIELD_NAMES]
        self._fh.write(",".join(values) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path: str | Path) -> list[MetricsRow]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != ",".join(FIELD_NAMES):
        raise ValueError(f"unexpected metrics header in {path}")
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        rows.append(
            MetricsRow(
                run_id=parts[0],
                phase=parts[1],
                iteration=int(parts[2]),
                samples_collected=int(parts[3]),
                model_meta_loss=float(parts[4]),
                critic_loss=float(parts[5]),
                actor_loss=float(parts[6]),
                mean_return=float(parts[7]),
                synthetic_transitions_used=int(parts[8]),
                wall_seconds=float(parts[9]),
            )
        )
    return rows
