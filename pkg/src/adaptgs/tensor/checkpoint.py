"""Flat named-array container.

Layout: a text manifest, one line per array ``name<TAB>f64<TAB>extents<TAB>offset``
(extents comma-separated, empty for scalars; offset in bytes from the start of
the data block), terminated by a line ``END``. Lines starting with ``#`` carry
free-form ``key<TAB>json`` metadata and are not arrays. The data block follows
immediately: little-endian float64, row-major, arrays back to back.
"""
from __future__ import annotations

import json
import os
from collections import OrderedDict

import numpy as np

MAGIC = "ADAPTGS-PARAMS 1"


def save_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    lines = [MAGIC]
    for key, value in (meta or {}).items():
        lines.append(f"#{key}\t{json.dumps(value)}")
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        if any(c in name for c in "\t\n"):
            raise ValueError(f"invalid array name {name!r}")
        a = np.array(arr, dtype="<f8", order="C")
        lines.append(f"{name}\tf64\t{','.join(str(n) for n in a.shape)}\t{offset}")
        blobs.append(a.tobytes())
        offset += a.nbytes
    lines.append("END")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load_arrays(path, with_meta: bool = False):
    with open(path, "rb") as fh:
        raw = fh.read()
    head_end = raw.find(b"\nEND\n")
    if not raw.startswith(MAGIC.encode()) or head_end < 0:
        raise ValueError(f"{path}: not a parameter container")
    data = raw[head_end + len(b"\nEND\n"):]
    out = OrderedDict()
    meta = {}
    for line in raw[:head_end].decode("utf-8").split("\n")[1:]:
        if line.startswith("#"):
            key, _, value = line[1:].partition("\t")
            meta[key] = json.loads(value)
            continue
        name, dtype, extents, offset = line.split("\t")
        if dtype != "f64":
            raise ValueError(f"{path}: unsupported dtype {dtype}")
        shape = tuple(int(n) for n in extents.split(",")) if extents else ()
        count = int(np.prod(shape)) if shape else 1
        start = int(offset)
        if start + 8 * count > len(data):
            raise ValueError(f"{path}: array {name} runs past end of file")
        out[name] = np.frombuffer(data, dtype="<f8", count=count, offset=start).reshape(shape).astype(np.float64)
    return (out, meta) if with_meta else out
