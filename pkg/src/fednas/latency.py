"""Per-hardware latency lookup tables.

File format: CSV with header ``profile,layer,candidate,latency_ms``; one
record per (profile, layer index, candidate index). A table must cover every
(layer, candidate) pair of the model it is used with.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

from .errors import ConfigError


@dataclass
class LatencyTable:
    profile: str
    values: dict[tuple[int, int], float] = field(default_factory=dict)

    def set(self, layer: int, candidate: int, latency_ms: float) -> None:
        if latency_ms < 0:
            raise ConfigError(f"negative latency for ({layer}, {candidate})")
        self.values[(layer, candidate)] = float(latency_ms)

    def get(self, layer: int, candidate: int) -> float:
        try:
            return self.values[(layer, candidate)]
        except KeyError:
            raise ConfigError(
                f"latency table '{self.profile}' missing entry for layer {layer}, "
                f"candidate {candidate}") from None

    def validate_for(self, model) -> None:
        for i, cands in enumerate(model.layer_candidates):
            for j in range(len(cands)):
                self.get(i, j)


def load_latency_tables(path) -> dict[str, LatencyTable]:
    tables: dict[str, LatencyTable] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = {"profile", "layer", "candidate", "latency_ms"}
        if reader.fieldnames is None or not expected.issubset(reader.fieldnames):
            raise ConfigError(f"latency table {path} must have columns {sorted(expected)}")
        for row in reader:
            prof = row["profile"]
            table = tables.setdefault(prof, LatencyTable(profile=prof))
            table.set(int(row["layer"]), int(row["candidate"]), float(row["latency_ms"]))
    if not tables:
        raise ConfigError(f"latency table {path} is empty")
    return tables


def save_latency_tables(path, tables: dict[str, LatencyTable]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["profile", "layer", "candidate", "latency_ms"])
        for prof in sorted(tables):
            for (layer, cand), ms in sorted(tables[prof].values.items()):
                writer.writerow([prof, layer, cand, repr(ms)])
