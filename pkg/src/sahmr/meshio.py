"""ASCII OBJ and little-endian binary PLY reading/writing."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ConfigError, MissingInputError

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _require(path):
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"no such file: {path}")
    return path


def write_obj(path, vertices, faces=None):
    lines = [f"v {x:.9f} {y:.9f} {z:.9f}" for x, y, z in np.asarray(vertices, dtype=np.float64)]
    if faces is not None:
        lines += [f"f {i + 1} {j + 1} {k + 1}" for i, j, k in np.asarray(faces)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path):
    verts, faces = [], []
    for line in _require(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            # fan-triangulate polygons
            faces += [[idx[0], idx[i], idx[i + 1]] for i in range(1, len(idx) - 1)]
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def write_ply(path, vertices, faces=None, labels=None):
    """Binary little-endian PLY with double coordinates and optional int labels."""
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    props = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if labels is not None:
        props.append(("label", "<i4"))
    rec = np.empty(len(v), dtype=props)
    rec["x"], rec["y"], rec["z"] = v.T
    if labels is not None:
        rec["label"] = np.asarray(labels, dtype=np.int32)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(v)}",
              "property double x", "property double y", "property double z"]
    if labels is not None:
        header.append("property int label")
    f = np.zeros((0, 3), dtype=np.int64) if faces is None else np.asarray(faces).reshape(-1, 3)
    if faces is not None:
        header += [f"element face {len(f)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())
        if faces is not None:
            frec = np.empty(len(f), dtype=[("n", "u1"), ("i", "<i4", (3,))])
            frec["n"] = 3
            frec["i"] = f
            fh.write(frec.tobytes())


def read_ply(path):
    """Return ``(vertices, faces, extra)`` where ``extra`` maps the remaining
    vertex properties to arrays."""
    data = _require(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ConfigError(f"{path}: not a PLY file")
    body_start = data.index(b"\n", end) + 1
    lines = data[:end].decode("ascii").splitlines()
    fmt, elements = None, []
    for line in lines:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append([parts[1], int(parts[2]), []])
        elif parts[0] == "property":
            elements[-1][2].append(parts[1:])
    if fmt not in ("binary_little_endian", "ascii"):
        raise ConfigError(f"{path}: unsupported PLY format {fmt}")

    verts, faces, extra = np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), {}
    if fmt == "ascii":
        tokens = data[body_start:].split()
        pos = 0
        for name, count, props in elements:
            rows = []
            for _ in range(count):
                row = []
                for prop in props:
                    if prop[0] == "list":
                        n = int(tokens[pos]); pos += 1
                        row.append([float(t) for t in tokens[pos:pos + n]]); pos += n
                    else:
                        row.append(float(tokens[pos])); pos += 1
                rows.append(row)
            if name == "vertex":
                names = [p[-1] for p in props]
                arr = np.array(rows, dtype=np.float64).reshape(count, len(names))
                verts = arr[:, [names.index(k) for k in "xyz"]]
                extra = {k: arr[:, i] for i, k in enumerate(names) if k not in "xyz"}
            elif name == "face":
                faces = np.array([r[0] for r in rows], dtype=np.int64).reshape(-1, 3)
        return verts, faces, extra

    pos = body_start
    for name, count, props in elements:
        if any(p[0] == "list" for p in props):
            if len(props) != 1:
                raise ConfigError(f"{path}: mixed list properties unsupported")
            _, ctype, itype, _pname = props[0]
            ct, it = np.dtype("<" + _PLY_TYPES[ctype]), np.dtype("<" + _PLY_TYPES[itype])
            rec_dt = np.dtype([("n", ct), ("i", it, (3,))])
            if count and int(np.frombuffer(data, ct, 1, pos)[0]) != 3:
                raise ConfigError(f"{path}: only triangle faces are supported")
            rec = np.frombuffer(data, rec_dt, count, pos)
            if count and np.any(rec["n"] != 3):
                raise ConfigError(f"{path}: only triangle faces are supported")
            if name == "face":
                faces = rec["i"].astype(np.int64)
            pos += rec_dt.itemsize * count
            continue
        dt = np.dtype([(p[1], "<" + _PLY_TYPES[p[0]]) for p in props])
        rec = np.frombuffer(data, dt, count, pos)
        pos += dt.itemsize * count
        if name == "vertex":
            verts = np.stack([rec[k].astype(np.float64) for k in "xyz"], axis=1)
            extra = {k: rec[k].copy() for k in dt.names if k not in "xyz"}
    return verts, faces, extra
