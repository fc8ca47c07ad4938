"""CSV and JSON renderings of simulation metrics."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, fields
from fractions import Fraction

from .scaling import SweepRow
from .sim import Metrics, SessionMetrics


def _plain(v):
    if isinstance(v, Fraction):
        return float(v)
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def metrics_json(m: Metrics) -> str:
    return json.dumps(_plain(asdict(m)), indent=2, sort_keys=True)


def sessions_csv(m: Metrics) -> str:
    cols = [f.name for f in fields(SessionMetrics)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for s in m.sessions:
        w.writerow([_plain(getattr(s, c)) if getattr(s, c) is not None else "" for c in cols])
    return buf.getvalue()


def sweep_csv(rows: list[SweepRow]) -> str:
    cols = [f.name for f in fields(SweepRow)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow(["" if getattr(r, c) is None else getattr(r, c) for c in cols])
    return buf.getvalue()
