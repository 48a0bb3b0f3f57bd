"""Experiment reports: canonical JSON plus an aligned text rendering.

Reports hold only deterministic quantities so a re-run reproduces them
byte for byte; wall-clock timings go to a separate sidecar file.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .serial import canonical_dumps, read_json


@dataclass
class Report:
    kind: str
    config_digest: str
    rows: list = field(default_factory=list)
    timing: dict | None = None

    def as_dict(self) -> dict:
        return {"kind": self.kind, "config_digest": self.config_digest,
                "rows": self.rows, "timing": self.timing}


def _format_cell(value) -> str:
    if isinstance(value, bool):
        return str(value)
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def render_table(rows) -> str:
    """Align rows of dicts into a fixed-width text table."""
    if not rows:
        return "(no rows)\n"
    columns: list = []
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    # Round-tripped rows arrive key-sorted; keep identity columns leading.
    for lead in ("n", "scene"):
        if lead in columns:
            columns.insert(0, columns.pop(columns.index(lead)))
    grid = [[_format_cell(row.get(c, "")) for c in columns] for row in rows]
    widths = [max(len(c), *(len(g[i]) for g in grid))
              for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for g in grid:
        lines.append("  ".join(v.ljust(w) for v, w in zip(g, widths)).rstrip())
    return "\n".join(lines) + "\n"


def render_report(report: Report) -> str:
    head = f"{report.kind}  (config {report.config_digest[:12]})"
    return head + "\n" + render_table(report.rows)


def write_report(report: Report, directory, stem: str | None = None) -> Path:
    """Write <stem>.json and <stem>.txt under directory; returns the json path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = stem or report.kind
    json_path = directory / f"{stem}.json"
    json_path.write_text(canonical_dumps(report.as_dict()) + "\n")
    (directory / f"{stem}.txt").write_text(render_report(report))
    return json_path


def read_report(path) -> Report:
    raw = read_json(path)
    return Report(raw["kind"], raw["config_digest"], raw["rows"],
                  raw.get("timing"))
