"""Tab-separated result tables with a JSON sidecar, plus trace CSV export."""
from __future__ import annotations

import csv
import json
from pathlib import Path

from . import __version__
from .errors import DomainError
from .experiment import ResultRow, ResultTable

COLUMNS = ("scenario", "strategy", "samples", "A-All", "A-Avg", "A-i", "seconds", "extras")


class ReportParseError(DomainError):
    """Malformed result file; ``line`` is 1-based."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _fmt(x: float) -> str:
    return repr(float(x))


def _row_line(r: ResultRow, timing: bool) -> str:
    per_task = ",".join(_fmt(p) for p in r.per_task)
    seconds = _fmt(r.seconds) if (timing and r.seconds is not None) else "-"
    extras = ";".join(f"{k}={_fmt(v)}" for k, v in sorted(r.extras.items()))
    return "\t".join([r.scenario, r.strategy, str(r.samples), _fmt(r.a_all), _fmt(r.a_avg),
                      per_task, seconds, extras])


def render(table: ResultTable, timing: bool = True) -> str:
    """The delimited-text form of ``table``; every row is checked first."""
    for r in table.rows:
        r.check()
    lines = [
        "# tamoo result table",
        f"# version={table.version}",
        f"# spec_hash={table.spec_hash}",
        f"# seed={table.seed}",
        "\t".join(COLUMNS),
    ]
    lines += [_row_line(r, timing) for r in table.rows]
    return "\n".join(lines) + "\n"


def table_dict(table: ResultTable, timing: bool = True) -> dict:
    return {
        "version": table.version,
        "spec_hash": table.spec_hash,
        "seed": table.seed,
        "rows": [
            {"scenario": r.scenario, "strategy": r.strategy, "samples": r.samples, "a_all": r.a_all,
             "a_avg": r.a_avg, "per_task": list(r.per_task),
             "seconds": r.seconds if timing else None, "extras": dict(sorted(r.extras.items()))}
            for r in table.rows
        ],
    }


def write_report(table: ResultTable, path, timing: bool = True, sidecar: bool = True) -> Path:
    """Write ``table`` to ``path`` (TSV) and ``path.json``.

    Refuses rows that break the table invariants.  With ``timing=False`` the
    wall-clock column is blanked so equal-seed runs give identical bytes.
    """
    path = Path(path)
    text = render(table, timing)
    path.write_text(text)
    if sidecar:
        Path(str(path) + ".json").write_text(json.dumps(table_dict(table, timing), indent=2) + "\n")
    return path


def _float(tok: str, lineno: int, what: str) -> float:
    try:
        return float(tok)
    except ValueError:
        raise ReportParseError(lineno, f"bad {what} value {tok!r}") from None


def parse_report(text: str) -> ResultTable:
    table = ResultTable(version="")
    header_seen = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        if raw.startswith("#"):
            body = raw[1:].strip()
            if "=" in body:
                key, _, value = body.partition("=")
                if key == "version":
                    table.version = value
                elif key == "spec_hash":
                    table.spec_hash = value
                elif key == "seed":
                    try:
                        table.seed = int(value)
                    except ValueError:
                        raise ReportParseError(lineno, f"bad seed {value!r}") from None
            continue
        fields = raw.split("\t")
        if not header_seen:
            if tuple(fields) != COLUMNS:
                raise ReportParseError(lineno, "expected column header")
            header_seen = True
            continue
        if len(fields) != len(COLUMNS):
            raise ReportParseError(lineno, f"expected {len(COLUMNS)} fields, got {len(fields)}")
        scenario, strategy, samples, a_all, a_avg, per_task, seconds, extras = fields
        try:
            n = int(samples)
        except ValueError:
            raise ReportParseError(lineno, f"bad sample count {samples!r}") from None
        extra = {}
        for item in filter(None, extras.split(";")):
            key, sep, value = item.partition("=")
            if not sep:
                raise ReportParseError(lineno, f"bad extras entry {item!r}")
            extra[key] = _float(value, lineno, key)
        row = ResultRow(
            scenario, strategy, n, _float(a_all, lineno, "A-All"), _float(a_avg, lineno, "A-Avg"),
            tuple(_float(p, lineno, "A-i") for p in per_task.split(",") if p),
            None if seconds == "-" else _float(seconds, lineno, "seconds"), extra,
        )
        try:
            row.check()
        except DomainError as exc:
            raise ReportParseError(lineno, str(exc)) from None
        table.rows.append(row)
    if not header_seen:
        raise ReportParseError(max(1, len(text.splitlines())), "missing column header")
    return table


def read_report(path) -> ResultTable:
    return parse_report(Path(path).read_text())


def write_trace_csv(trace: dict, path) -> Path:
    """One row per iteration: losses, weights and gradient norms for every task."""
    path = Path(path)
    losses, weights, norms = trace["losses"], trace["weights"], trace["grad_norms"]
    m = len(losses[0]) if losses else 0
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration"] + [f"{k}_{i + 1}" for k in ("loss", "weight", "grad_norm") for i in range(m)])
        for t, (lo, we, gn) in enumerate(zip(losses, weights, norms)):
            w.writerow([t, *map(repr, map(float, lo)), *map(repr, map(float, we)), *map(repr, map(float, gn))])
    return path


def format_table(table: ResultTable) -> str:
    """Fixed-width human rendering of a table."""
    out = [f"spec {table.spec_hash}  seed {table.seed}  version {table.version or __version__}"]
    out.append(f"{'scenario':<10}{'strategy':<10}{'n':>6}{'A-All':>9}{'A-Avg':>9}  per-task")
    for r in table.rows:
        tasks = " ".join(f"{p:6.2f}" for p in r.per_task)
        out.append(f"{r.scenario:<10}{r.strategy:<10}{r.samples:>6}{r.a_all:>9.2f}{r.a_avg:>9.2f}  {tasks}")
        if r.extras:
            out.append(" " * 20 + "  ".join(f"{k}={v:.4g}" for k, v in sorted(r.extras.items())))
    return "\n".join(out)
