"""Mesh file I/O: PLY (ASCII and binary little-endian) and OBJ export.

PLY vertices are stored as doubles so positions round-trip bit-exactly;
colors are stored as the standard uchar red/green/blue properties, so color
round-trips are exact on the 8-bit lattice (quantized once on first write).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .geometry import MeshError, TriMesh

_PLY_SCALARS = {
    "char": "b", "uchar": "B", "int8": "b", "uint8": "B",
    "short": "h", "ushort": "H", "int16": "h", "uint16": "H",
    "int": "i", "uint": "I", "int32": "i", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def colors_to_bytes(colors: np.ndarray) -> np.ndarray:
    """Quantize [0, 1] float colors to uint8."""
    return np.clip(np.rint(np.asarray(colors) * 255.0), 0, 255).astype(np.uint8)


def write_ply(mesh: TriMesh, path, binary: bool = True) -> None:
    path = Path(path)
    rgb = colors_to_bytes(mesh.colors)
    fmt = "binary_little_endian" if binary else "ascii"
    header = "\n".join(
        [
            "ply",
            f"format {fmt} 1.0",
            f"element vertex {mesh.n_vertices}",
            "property double x",
            "property double y",
            "property double z",
            "property uchar red",
            "property uchar green",
            "property uchar blue",
            f"element face {mesh.n_faces}",
            "property list uchar int vertex_indices",
            "end_header",
        ]
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii") + b"\n")
        if binary:
            for v, c in zip(mesh.vertices, rgb):
                fh.write(struct.pack("<dddBBB", *v, *c))
            for f in mesh.faces:
                fh.write(struct.pack("<Biii", 3, *f))
        else:
            lines = []
            for v, c in zip(mesh.vertices, rgb):
                lines.append(f"{v[0]!r} {v[1]!r} {v[2]!r} {c[0]} {c[1]} {c[2]}")
            for f in mesh.faces:
                lines.append(f"3 {f[0]} {f[1]} {f[2]}")
            fh.write(("\n".join(lines) + "\n").encode("ascii"))


def read_ply(path) -> TriMesh:
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header")
    if end < 0:
        raise MeshError(f"{path}: not a PLY file (no end_header)")
    header_lines = data[:end].decode("ascii").splitlines()
    body = data[end:]
    body = body[body.index(b"\n") + 1 :]

    if not header_lines or header_lines[0].strip() != "ply":
        raise MeshError(f"{path}: missing ply magic")
    fmt = None
    elements: list[tuple[str, int, list[tuple[str, ...]]]] = []
    for line in header_lines[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            elements[-1][2].append(tuple(parts[1:]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise MeshError(f"{path}: unsupported PLY format {fmt}")

    vertices, colors, faces = [], [], []
    if fmt == "ascii":
        tokens = body.decode("ascii").split()
        pos = 0
        for name, count, props in elements:
            for _ in range(count):
                if name == "vertex":
                    row = {}
                    for p in props:
                        row[p[-1]] = float(tokens[pos])
                        pos += 1
                    vertices.append([row["x"], row["y"], row["z"]])
                    colors.append([row.get("red", 127), row.get("green", 127), row.get("blue", 127)])
                elif name == "face":
                    n = int(tokens[pos])
                    pos += 1
                    faces.append([int(tokens[pos + k]) for k in range(n)])
                    pos += n
                else:
                    pos += len(props)
    else:
        offset = 0
        for name, count, props in elements:
            if name == "vertex":
                fmt_str = "<" + "".join(_PLY_SCALARS[p[0]] for p in props)
                size = struct.calcsize(fmt_str)
                names = [p[-1] for p in props]
                for _ in range(count):
                    row = dict(zip(names, struct.unpack_from(fmt_str, body, offset)))
                    offset += size
                    vertices.append([row["x"], row["y"], row["z"]])
                    colors.append([row.get("red", 127), row.get("green", 127), row.get("blue", 127)])
            elif name == "face":
                count_code = _PLY_SCALARS[props[0][1]]
                idx_code = _PLY_SCALARS[props[0][2]]
                idx_size = struct.calcsize(idx_code)
                for _ in range(count):
                    (n,) = struct.unpack_from("<" + count_code, body, offset)
                    offset += struct.calcsize(count_code)
                    faces.append(list(struct.unpack_from(f"<{n}{idx_code}", body, offset)))
                    offset += n * idx_size
            else:
                raise MeshError(f"{path}: unsupported element {name}")

    for f in faces:
        if len(f) != 3:
            raise MeshError(f"{path}: non-triangular face with {len(f)} vertices")
    verts = np.array(vertices, dtype=np.float64).reshape(-1, 3)
    cols = np.array(colors, dtype=np.float64).reshape(-1, 3) / 255.0
    return TriMesh(verts, np.array(faces, dtype=np.int64).reshape(-1, 3), cols)


def write_obj(mesh: TriMesh, path) -> None:
    """OBJ export (positions and faces only) for viewer compatibility."""
    lines = [f"v {v[0]!r} {v[1]!r} {v[2]!r}" for v in mesh.vertices]
    lines += [f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}" for f in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")
