"""Serialization of value fields and CSV export of named slices.

Binary layout: a plain-text header of ``key: value`` lines terminated by a
blank line, followed by the raw little-endian float64 array, row-major.
The header describes the grid (t/e/p axes as first, step, count) and the
provenance, so a dump is self-describing.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .value_pde import Grid, ValueField

_MAGIC = "fbsde-lab value field v1"


def _axis_desc(nodes: np.ndarray) -> str:
    step = float(nodes[1] - nodes[0]) if len(nodes) > 1 else 0.0
    return json.dumps({"first": float(nodes[0]), "step": step, "count": len(nodes)})


def dump_field(field: ValueField, path) -> None:
    """Write the field as text header + flat binary payload."""
    g = field.grid
    header = [
        f"format: {_MAGIC}",
        f"t_nodes: {json.dumps([float(x) for x in g.t_nodes])}",
        f"e_axis: {_axis_desc(g.e_nodes)}",
        f"p_dims: {g.dim}",
    ]
    for k, p in enumerate(g.p_nodes):
        header.append(f"p_axis_{k}: {_axis_desc(p)}")
    header.append(f"shape: {json.dumps(list(field.values.shape))}")
    header.append(f"provenance: {json.dumps(field.provenance, default=str)}")
    blob = "\n".join(header) + "\n\n"
    with open(path, "wb") as fh:
        fh.write(blob.encode("utf-8"))
        fh.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())


def _axis_from_desc(desc: str) -> np.ndarray:
    d = json.loads(desc)
    return d["first"] + d["step"] * np.arange(d["count"])


def load_field(path) -> ValueField:
    raw = Path(path).read_bytes()
    sep = raw.index(b"\n\n")
    head, payload = raw[:sep].decode("utf-8"), raw[sep + 2:]
    kv = {}
    for line in head.splitlines():
        key, _, val = line.partition(": ")
        kv[key] = val
    if kv.get("format") != _MAGIC:
        raise ValueError(f"not a {_MAGIC} file")
    t_nodes = np.asarray(json.loads(kv["t_nodes"]), dtype=float)
    e_nodes = _axis_from_desc(kv["e_axis"])
    dims = int(kv["p_dims"])
    p_nodes = tuple(_axis_from_desc(kv[f"p_axis_{k}"]) for k in range(dims))
    shape = tuple(json.loads(kv["shape"]))
    values = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    grid = Grid(t_nodes=t_nodes, e_nodes=e_nodes, p_nodes=p_nodes)
    return ValueField(grid=grid, values=values,
                      provenance=json.loads(kv["provenance"]))


def write_csv(path, header: list[str], rows) -> None:
    """Comma-separated, '.' decimal, header row; atomic via temp rename."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])
    tmp.replace(path)


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (np.integer,)):
        return int(x)
    return x


def export_slice_csv(field: ValueField, path, t: float, p=None) -> None:
    """One named (t, p) slice as (e, v) rows."""
    sl = field.values_at(t)
    if field.dim >= 1:
        if p is None:
            raise ValueError("full fields need a p node for slice export")
        for k, nodes in enumerate(field.grid.p_nodes):
            i = int(np.argmin(np.abs(nodes - np.atleast_1d(p)[k])))
            sl = sl[i]
    write_csv(path, ["e", "v"], zip(field.grid.e_nodes, sl))


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(x) for x in row])
    return buf.getvalue()
