"""Tidy CSV emission for trade-off curves and training trajectories."""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

from .errors import InputError

TRADEOFF_COLUMNS = ("axis_value", "fidelity", "diversity", "kl_to_target", "tv_to_target", "loss_kind", "seed")
TRAJECTORY_COLUMNS = ("step", "loss", "mean_logp_pos", "mean_logp_neg", "kl_to_target", "loss_kind")
KINDS = ("tradeoff_curve", "trajectory")


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def _read(path) -> list[dict]:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"metrics file not found: {p}")
    rows = []
    with open(p) as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise InputError(f"{p}:{n}: invalid JSON ({e.msg})") from e
    return rows


def emit_plot_data(paths, kind: str) -> str:
    """CSV text with one row per point, ordered by (loss_kind, axis_value/step)."""
    if kind not in KINDS:
        raise InputError(f"plot kind must be one of {KINDS}, got {kind!r}")
    rows = [r for p in paths for r in _read(p)]
    cols = TRADEOFF_COLUMNS if kind == "tradeoff_curve" else TRAJECTORY_COLUMNS
    if kind == "tradeoff_curve":
        rows = [r for r in rows if r.get("status", "ok") == "ok"]
        rows.sort(key=lambda r: (r["loss_kind"], r["axis_value"]))
    else:
        rows.sort(key=lambda r: (r["loss_kind"], r["step"]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        try:
            w.writerow([_fmt(r[c]) for c in cols])
        except KeyError as e:
            raise InputError(f"record lacks column {e.args[0]!r}: {r}") from e
    return buf.getvalue()
