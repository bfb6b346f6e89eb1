"""OBJ and binary-PLY mesh files, plus point-cloud loading.

Only positions and faces are handled. Polygons with more than three sides
are fan-triangulated with a warning. OBJ indices are converted between the
format's 1-based (and negative-relative) convention and 0-based arrays at the
boundary. PLY is the binary little-endian flavor; extra vertex properties
are skipped by stride.
"""

from __future__ import annotations

import logging
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

_PLY_SCALARS = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def _fan(indices: list[int], where: str) -> list[list[int]]:
    if len(indices) < 3:
        raise DataError(f"{where}: face with fewer than 3 vertices")
    if len(indices) > 3:
        log.warning("%s: %d-gon fan-triangulated", where, len(indices))
    return [[indices[0], indices[i], indices[i + 1]] for i in range(1, len(indices) - 1)]


def load_obj(path) -> tuple[np.ndarray, np.ndarray]:
    verts: list[list[float]] = []
    tris: list[list[int]] = []
    with open(path, "r") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tag, *rest = line.split()
            if tag == "v":
                if len(rest) < 3:
                    raise DataError(f"{path}:{lineno}: vertex needs 3 coordinates")
                try:
                    verts.append([float(x) for x in rest[:3]])
                except ValueError as e:
                    raise DataError(f"{path}:{lineno}: bad vertex coordinate ({e})") from e
            elif tag == "f":
                idx = []
                for token in rest:
                    head = token.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError as e:
                        raise DataError(f"{path}:{lineno}: bad face index '{token}'") from e
                    if i == 0:
                        raise DataError(f"{path}:{lineno}: OBJ indices are 1-based, got 0")
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                tris.extend(_fan(idx, f"{path}:{lineno}"))
            # other tags (vn, vt, o, g, usemtl, s, mtllib) carry no geometry
    v = np.array(verts, dtype=np.float64).reshape(-1, 3)
    t = np.array(tris, dtype=np.int64).reshape(-1, 3)
    if t.size and (t.min() < 0 or t.max() >= len(v)):
        raise DataError(f"{path}: face index out of range")
    return v, t


def save_obj(path, verts: np.ndarray, tris: np.ndarray | None = None) -> None:
    verts = np.asarray(verts, dtype=np.float64)
    with open(path, "w") as f:
        for x, y, z in verts:
            f.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
        if tris is not None:
            for a, b, c in np.asarray(tris, dtype=np.int64):
                f.write(f"f {a + 1} {b + 1} {c + 1}\n")


def _parse_ply_header(f, path):
    def next_line():
        raw = f.readline()
        if not raw:
            raise DataError(f"{path}: truncated PLY header")
        return raw.decode("ascii").strip()

    if next_line() != "ply":
        raise DataError(f"{path}: not a PLY file (missing 'ply' magic)")
    fmt = next_line().split()
    if fmt[:2] != ["format", "binary_little_endian"]:
        raise DataError(f"{path}: only binary_little_endian PLY is supported")
    elements = []  # (name, count, [(prop_name, dtype) | ('list', count_dt, item_dt, name)])
    while True:
        line = next_line()
        if line == "end_header":
            break
        parts = line.split()
        if parts[0] == "comment":
            continue
        if parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise DataError(f"{path}: property before element in header")
            if parts[1] == "list":
                elements[-1][2].append(("list", parts[2], parts[3], parts[4]))
            else:
                elements[-1][2].append((parts[1], parts[2]))
        else:
            raise DataError(f"{path}: unsupported PLY header line '{line}'")
    return elements


def _read_exact(f, n: int, path, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise DataError(f"{path}: truncated PLY payload while reading {what}")
    return buf


def load_ply(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as f:
        elements = _parse_ply_header(f, path)
        verts = np.zeros((0, 3))
        tris: list[list[int]] = []
        for name, count, props in elements:
            has_list = any(p[0] == "list" for p in props)
            if not has_list:
                dt = np.dtype([(p_name, "<" + _PLY_SCALARS[p_type]) for p_type, p_name in
                               ((p[0], p[1]) for p in props)])
                data = np.frombuffer(
                    _read_exact(f, dt.itemsize * count, path, f"element '{name}'"), dtype=dt
                )
                if name == "vertex":
                    for axis in ("x", "y", "z"):
                        if axis not in dt.names:
                            raise DataError(f"{path}: vertex element missing '{axis}'")
                    verts = np.stack(
                        [data["x"], data["y"], data["z"]], axis=1
                    ).astype(np.float64)
            else:
                # list properties force row-by-row reads
                for row in range(count):
                    idx_row = None
                    for p in props:
                        if p[0] == "list":
                            _, count_t, item_t, _pname = p
                            cdt = np.dtype("<" + _PLY_SCALARS[count_t])
                            m = int(np.frombuffer(
                                _read_exact(f, cdt.itemsize, path, f"{name} row {row}"),
                                dtype=cdt,
                            )[0])
                            idt = np.dtype("<" + _PLY_SCALARS[item_t])
                            vals = np.frombuffer(
                                _read_exact(f, idt.itemsize * m, path, f"{name} row {row}"),
                                dtype=idt,
                            )
                            if name == "face":
                                idx_row = [int(x) for x in vals]
                        else:
                            sdt = np.dtype("<" + _PLY_SCALARS[p[0]])
                            _read_exact(f, sdt.itemsize, path, f"{name} row {row}")
                    if name == "face" and idx_row is not None:
                        tris.extend(_fan(idx_row, f"{path}: face {row}"))
        extra = f.read(1)
        if extra:
            log.warning("%s: trailing bytes after declared PLY elements", path)
    t = np.array(tris, dtype=np.int64).reshape(-1, 3)
    if t.size and (t.min() < 0 or t.max() >= len(verts)):
        raise DataError(f"{path}: face index out of range")
    return verts, t


def save_ply(path, verts: np.ndarray, tris: np.ndarray | None = None) -> None:
    verts = np.asarray(verts, dtype=np.float32)
    tris = np.zeros((0, 3), dtype=np.int64) if tris is None else np.asarray(tris, dtype=np.int64)
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(verts)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"element face {len(tris)}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(verts.astype("<f4").tobytes())
        for a, b, c in tris:
            f.write(struct.pack("<Biii", 3, a, b, c))


def load_mesh(path) -> tuple[np.ndarray, np.ndarray]:
    """Load (verts (V, 3) float64, tris (F, 3) int64) from .obj or .ply."""
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return load_obj(path)
    if suffix == ".ply":
        return load_ply(path)
    raise DataError(f"{path}: unsupported mesh format '{suffix}' (use .obj or .ply)")


def save_mesh(path, verts: np.ndarray, tris: np.ndarray | None = None) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        save_obj(path, verts, tris)
    elif suffix == ".ply":
        save_ply(path, verts, tris)
    else:
        raise DataError(f"{path}: unsupported mesh format '{suffix}' (use .obj or .ply)")


def load_points(path) -> np.ndarray:
    """Vertex positions of a mesh file as a point cloud; faces are ignored."""
    verts, _ = load_mesh(path)
    if len(verts) == 0:
        raise DataError(f"{path}: no points found")
    return verts
