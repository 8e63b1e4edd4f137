"""Snapshots of grid functions and extension fields, and CSV tables.

Binary snapshots are ``magic | uint32 header length | JSON header |
little-endian float64 values`` in C order, so they round-trip bit-exactly.
CSV snapshots carry the same header as a ``#`` comment line and write
floats with ``repr``, which also round-trips exactly.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .extension import ExtensionField
from .fracop import ContractError, GridFunction, TailModel

GRID_MAGIC = b"FRACGRD1"
EXT_MAGIC = b"FRACEXT1"


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


@dataclass
class CsvBlock:
    """A named table with fixed columns; ``text`` is deterministic."""

    name: str
    columns: Sequence[str]
    rows: list = field(default_factory=list)

    def add(self, *values):
        if len(values) != len(self.columns):
            raise ValueError(f"{self.name}: expected {len(self.columns)} values, got {len(values)}")
        self.rows.append(tuple(values))

    @property
    def text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_fmt(v) for v in r])
        return buf.getvalue()

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.text)
        return path


def read_csv(path) -> tuple[list[str], list[dict]]:
    """Columns and rows (as dicts of strings) of a CSV table; ``#`` lines are skipped."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    rows = list(reader)
    return list(reader.fieldnames or []), rows


def _grid_header(u: GridFunction) -> dict:
    return {"dim": u.dim, "shape": list(u.shape), "spacing": float(u.spacing),
            "origin": [float(o) for o in u.origin], "tail": u.tail.to_dict()}


def _grid_from_header(hdr: dict, values: np.ndarray) -> GridFunction:
    return GridFunction(values.reshape(hdr["shape"]), hdr["spacing"], tuple(hdr["origin"]),
                        TailModel.from_dict(hdr["tail"]))


def _pack(magic: bytes, header: dict, arrays) -> bytes:
    hb = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    return magic + struct.pack("<I", len(hb)) + hb + body


def _unpack(data: bytes, magic: bytes):
    if data[:len(magic)] != magic:
        raise ContractError("not a snapshot of the expected kind")
    k = len(magic)
    (n,) = struct.unpack("<I", data[k:k + 4])
    header = json.loads(data[k + 4:k + 4 + n].decode())
    return header, np.frombuffer(data[k + 4 + n:], dtype="<f8")


def save_grid(path, u: GridFunction):
    Path(path).write_bytes(_pack(GRID_MAGIC, _grid_header(u), [u.values]))


def load_grid(path) -> GridFunction:
    hdr, vals = _unpack(Path(path).read_bytes(), GRID_MAGIC)
    return _grid_from_header(hdr, vals.copy())


def save_grid_csv(path, u: GridFunction):
    """One row per node: coordinates then value, C order."""
    names = [f"x{d}" for d in range(u.dim)] + ["value"]
    X = u.coords()
    block = CsvBlock("grid", names)
    for idx in np.ndindex(*u.shape):
        block.add(*[float(x[idx]) for x in X], float(u.values[idx]))
    Path(path).write_text("# " + json.dumps(_grid_header(u), sort_keys=True) + "\n" + block.text)


def load_grid_csv(path) -> GridFunction:
    with open(path) as fh:
        first = fh.readline()
    if not first.startswith("# "):
        raise ContractError("CSV snapshot lacks its header line")
    hdr = json.loads(first[2:])
    _, rows = read_csv(path)
    vals = np.array([float(r["value"]) for r in rows])
    return _grid_from_header(hdr, vals)


def save_extension(path, E: ExtensionField):
    hdr = {"base": _grid_header(E.base), "zmesh": [float(z) for z in E.zmesh], "R": float(E.R), "s": float(E.s)}
    Path(path).write_bytes(_pack(EXT_MAGIC, hdr, [E.base.values, E.values]))


def load_extension(path) -> ExtensionField:
    hdr, vals = _unpack(Path(path).read_bytes(), EXT_MAGIC)
    nb = int(np.prod(hdr["base"]["shape"]))
    base = _grid_from_header(hdr["base"], vals[:nb].copy())
    values = vals[nb:].reshape(tuple(hdr["base"]["shape"]) + (len(hdr["zmesh"]),)).copy()
    return ExtensionField(base, np.array(hdr["zmesh"]), values, hdr["R"], hdr["s"])


def save_extension_csv(path, E: ExtensionField):
    """Rows of (x..., z, value) over the full nodal mesh, z = 0 included."""
    hdr = {"base": _grid_header(E.base), "zmesh": [float(z) for z in E.zmesh], "R": float(E.R), "s": float(E.s)}
    names = [f"x{d}" for d in range(E.dim)] + ["z", "value"]
    X = E.base.coords()
    zn = E.znodes
    nodal = E.nodal
    block = CsvBlock("extension", names)
    for idx in np.ndindex(*nodal.shape):
        block.add(*[float(x[idx[:-1]]) for x in X], float(zn[idx[-1]]), float(nodal[idx]))
    Path(path).write_text("# " + json.dumps(hdr, sort_keys=True) + "\n" + block.text)
