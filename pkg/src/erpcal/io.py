"""Artifact files: CSV tables, VTK legacy polydata and versioned key/value text.

Every writer accepts a ``meta`` mapping that is embedded as ``# key=value``
comment lines (CSV, text) or in the VTK title line, so each artifact
records the hash of the configuration that produced it.  Numbers are
written with ``repr`` so files are byte-identical across reruns.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .mesh import TriMesh


class ArtifactError(ValueError):
    pass


def config_hash(config) -> str:
    """Stable short hash of a JSON-serialisable configuration."""
    blob = json.dumps(config, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def fmt(x) -> str:
    if isinstance(x, (str, np.str_)):
        return str(x)
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if np.isnan(x):
        return ""
    if x == int(x) and abs(x) < 1e15:
        return str(int(x)) if x != 0 or np.copysign(1, x) > 0 else "0"
    return repr(x)


def _meta_lines(meta):
    return [f"# {k}={v}" for k, v in (meta or {}).items()]


def write_csv(path, columns: dict, meta: dict | None = None):
    """Write equal-length columns; NaN is written as an empty field."""
    names = list(columns)
    cols = [np.asarray(columns[n]) if not isinstance(columns[n], list) else columns[n] for n in names]
    n = len(cols[0]) if cols else 0
    if any(len(c) != n for c in cols):
        raise ArtifactError("columns differ in length")
    lines = _meta_lines(meta) + [",".join(names)]
    lines += [",".join(fmt(c[i]) for c in cols) for i in range(n)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv(path) -> tuple:
    """Return ``(columns, meta)``; numeric columns become float arrays."""
    meta, rows, header = {}, [], None
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            if "=" in line:
                k, v = line[1:].strip().split("=", 1)
                meta[k.strip()] = v.strip()
            continue
        if header is None:
            header = [h.strip() for h in line.split(",")]
        else:
            rows.append(line.split(","))
    if header is None:
        raise ArtifactError(f"{path}: no header line")
    cols = {}
    for j, name in enumerate(header):
        raw = [r[j].strip() if j < len(r) else "" for r in rows]
        try:
            cols[name] = np.array([float(v) if v else np.nan for v in raw])
        except ValueError:
            cols[name] = np.array(raw, dtype=object)
    return cols, meta


def require_columns(cols: dict, names, path="table"):
    missing = [n for n in names if n not in cols]
    if missing:
        raise ArtifactError(f"{path}: missing columns {missing}")


def write_vtk(path, mesh: TriMesh, arrays: dict, meta: dict | None = None):
    """VTK legacy ASCII polydata with named per-vertex scalar arrays."""
    title = "erpcal " + " ".join(f"{k}={v}" for k, v in (meta or {}).items())
    out = ["# vtk DataFile Version 3.0", title[:255], "ASCII", "DATASET POLYDATA",
           f"POINTS {mesh.n_vertices} double"]
    out += [" ".join(repr(float(c)) for c in p) for p in mesh.vertices]
    out.append(f"POLYGONS {mesh.n_triangles} {4 * mesh.n_triangles}")
    out += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    if arrays:
        out.append(f"POINT_DATA {mesh.n_vertices}")
        for name, values in arrays.items():
            values = np.asarray(values, dtype=float)
            if values.shape != (mesh.n_vertices,):
                raise ArtifactError(f"array {name} has shape {values.shape}")
            out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            out += [repr(float(v)) for v in values]
    Path(path).write_text("\n".join(out) + "\n")


def read_vtk(path) -> tuple:
    """Read a file written by :func:`write_vtk`; returns ``(mesh, arrays, meta)``."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# vtk"):
        raise ArtifactError(f"{path}: not a VTK legacy file")
    meta = dict(tok.split("=", 1) for tok in lines[1].split()[1:] if "=" in tok)
    i = 4
    kw, n, _ = lines[i].split()
    if kw != "POINTS":
        raise ArtifactError(f"{path}: expected POINTS")
    n = int(n)
    verts = np.array([[float(x) for x in lines[i + 1 + j].split()] for j in range(n)])
    i += n + 1
    kw, m, _ = lines[i].split()
    if kw != "POLYGONS":
        raise ArtifactError(f"{path}: expected POLYGONS")
    m = int(m)
    tris = np.array([[int(x) for x in lines[i + 1 + j].split()[1:4]] for j in range(m)])
    i += m + 1
    arrays = {}
    while i < len(lines):
        parts = lines[i].split()
        if parts and parts[0] == "SCALARS":
            arrays[parts[1]] = np.array([float(v) for v in lines[i + 2:i + 2 + n]])
            i += 2 + n
        else:
            i += 1
    return TriMesh(verts, tris), arrays, meta


def write_keyvalue(path, kind: str, version: int, values: dict, meta: dict | None = None):
    """Versioned text: a ``kind version`` line, meta comments, then ``key = value``.

    Array values are written space-separated on one line.
    """
    lines = [f"{kind} {version}"] + _meta_lines(meta)
    for k, v in values.items():
        if isinstance(v, (list, tuple, np.ndarray)):
            v = " ".join(fmt(x) if not isinstance(x, (float, np.floating)) else repr(float(x))
                         for x in np.asarray(v).ravel())
        elif isinstance(v, (float, np.floating)):
            v = repr(float(v))
        lines.append(f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_keyvalue(path, kind: str, version: int) -> tuple:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 2 or head[0] != kind:
        raise ArtifactError(f"{path}: not a {kind} file")
    if int(head[1]) != version:
        raise ArtifactError(f"{path}: {kind} version {head[1]}, expected {version}")
    values, meta = {}, {}
    for line in lines[1:]:
        if line.startswith("#"):
            if "=" in line:
                k, v = line[1:].split("=", 1)
                meta[k.strip()] = v.strip()
        elif "=" in line:
            k, v = line.split("=", 1)
            values[k.strip()] = v.strip()
    return values, meta


def floats(s: str) -> np.ndarray:
    return np.array([float(x) for x in s.split()]) if s else np.zeros(0)
