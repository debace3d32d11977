"""Mesh and point-cloud I/O (OBJ, PLY) plus the small text formats used for
ground truth: flow files, landmark files and vertex masks."""

from __future__ import annotations

import os
import sys

import numpy as np

from .geometry import DEFAULT_KNN, Surface


class MeshFormatError(ValueError):
    pass


def _ext(path) -> str:
    ext = os.path.splitext(str(path))[1].lower()
    if ext not in (".obj", ".ply"):
        raise MeshFormatError(f"unsupported mesh extension {ext!r} (use .obj or .ply)")
    return ext


def load_surface(path, knn: int = DEFAULT_KNN) -> Surface:
    """Read an OBJ or PLY file; point clouds get k-nearest-neighbour edges."""
    ext = _ext(path)
    points, faces = _read_obj(path) if ext == ".obj" else _read_ply(path)
    if len(points) == 0:
        raise MeshFormatError(f"{path}: no vertices")
    return Surface(points, faces if len(faces) else None, knn=knn)


def _read_obj(path):
    points, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    points.append([float(x) for x in parts[1:4]])
                    if len(points[-1]) != 3:
                        raise ValueError("vertex needs three coordinates")
                elif parts[0] == "f":
                    n = len(points)
                    idx = []
                    for tok in parts[1:]:
                        k = int(tok.split("/")[0])
                        idx.append(k - 1 if k > 0 else n + k)
                    if len(idx) < 3:
                        raise ValueError("face needs at least three vertices")
                    for t in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[t], idx[t + 1]])
            except ValueError as exc:
                raise MeshFormatError(f"{path}:{lineno}: malformed record: {exc}") from None
    faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) and (faces.min() < 0 or faces.max() >= len(points)):
        raise MeshFormatError(f"{path}: face index out of range")
    return np.array(points, dtype=np.float64).reshape(-1, 3), faces


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply_header(fh, path):
    if fh.readline().strip() != b"ply":
        raise MeshFormatError(f"{path}: not a PLY file")
    fmt, elements = None, []
    while True:
        raw = fh.readline()
        if not raw:
            raise MeshFormatError(f"{path}: unterminated header")
        parts = raw.decode("ascii", "replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise MeshFormatError(f"{path}: property before element")
            if parts[1] == "list":
                elements[-1][2].append((parts[4], "list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]]))
            else:
                elements[-1][2].append((parts[2], "scalar", _PLY_TYPES[parts[1]], None))
        elif parts[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise MeshFormatError(f"{path}: unsupported PLY format {fmt!r}")
    return fmt, elements


def _read_ply(path):
    with open(path, "rb") as fh:
        try:
            fmt, elements = _parse_ply_header(fh, path)
        except (KeyError, IndexError, ValueError) as exc:
            if isinstance(exc, MeshFormatError):
                raise
            raise MeshFormatError(f"{path}: malformed header: {exc}") from None
        body = fh.read()
    if fmt == "ascii":
        return _read_ply_ascii(body, elements, path)
    return _read_ply_binary(body, elements, "<" if fmt == "binary_little_endian" else ">", path)


def _collect(name, rows, props, points, faces, path):
    if name == "vertex":
        names = [p[0] for p in props]
        try:
            cols = [names.index(c) for c in "xyz"]
        except ValueError:
            raise MeshFormatError(f"{path}: vertex element lacks x/y/z") from None
        points.extend([[float(r[c]) for c in cols] for r in rows])
    elif name == "face":
        li = next((i for i, p in enumerate(props) if p[1] == "list"), None)
        if li is None:
            raise MeshFormatError(f"{path}: face element has no index list")
        for r in rows:
            idx = [int(k) for k in r[li]]
            for t in range(1, len(idx) - 1):
                faces.append([idx[0], idx[t], idx[t + 1]])


def _read_ply_ascii(body, elements, path):
    lines = iter(body.decode("ascii", "replace").splitlines())
    points, faces = [], []
    lineno = 0
    for name, count, props in elements:
        rows = []
        for _ in range(count):
            try:
                tokens = next(lines).split()
            except StopIteration:
                raise MeshFormatError(f"{path}: truncated {name} data") from None
            lineno += 1
            row, pos = [], 0
            try:
                for _, kind, _, _ in props:
                    if kind == "list":
                        n = int(tokens[pos])
                        row.append(tokens[pos + 1 : pos + 1 + n])
                        if len(row[-1]) != n:
                            raise IndexError
                        pos += 1 + n
                    else:
                        float(tokens[pos])
                        row.append(tokens[pos])
                        pos += 1
            except (IndexError, ValueError):
                raise MeshFormatError(f"{path}: malformed {name} record at data line {lineno}") from None
            rows.append(row)
        _collect(name, rows, props, points, faces, path)
    return _finish(points, faces, path)


def _read_ply_binary(body, elements, order, path):
    points, faces = [], []
    off = 0
    for name, count, props in elements:
        if all(kind == "scalar" for _, kind, _, _ in props):
            dt = np.dtype([(p[0], order + p[2]) for p in props])
            need = dt.itemsize * count
            if off + need > len(body):
                raise MeshFormatError(f"{path}: truncated {name} data at byte {off}")
            arr = np.frombuffer(body, dtype=dt, count=count, offset=off)
            off += need
            if name == "vertex":
                try:
                    points.extend(np.stack([arr[c].astype(np.float64) for c in "xyz"], 1).tolist())
                except ValueError:
                    raise MeshFormatError(f"{path}: vertex element lacks x/y/z") from None
            continue
        rows = []
        for _ in range(count):
            row = []
            for _, kind, t1, t2 in props:
                try:
                    if kind == "list":
                        n = int(np.frombuffer(body, order + t1, 1, off)[0])
                        off += np.dtype(t1).itemsize
                        row.append(np.frombuffer(body, order + t2, n, off).tolist())
                        off += n * np.dtype(t2).itemsize
                    else:
                        row.append(np.frombuffer(body, order + t1, 1, off)[0])
                        off += np.dtype(t1).itemsize
                except ValueError:
                    raise MeshFormatError(f"{path}: truncated {name} data at byte {off}") from None
            rows.append(row)
        _collect(name, rows, props, points, faces, path)
    return _finish(points, faces, path)


def _finish(points, faces, path):
    points = np.array(points, dtype=np.float64).reshape(-1, 3)
    faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) and (faces.min() < 0 or faces.max() >= len(points)):
        raise MeshFormatError(f"{path}: face index out of range")
    return points, faces


def scalar_colors(values) -> np.ndarray:
    """Map scalars to RGB in [0, 1]: linear blue (min) to red (max) ramp."""
    v = np.asarray(values, dtype=np.float64)
    span = v.max() - v.min() if v.size else 0.0
    s = (v - v.min()) / span if span > 0 else np.zeros_like(v)
    return np.stack([s, np.zeros_like(s), 1.0 - s], axis=1)


def save_surface(surface: Surface, path, scalar=None, binary: bool = False) -> None:
    """Write OBJ or PLY by extension.

    A per-vertex ``scalar`` becomes the PLY vertex property ``quality`` or,
    for OBJ, vertex colours from :func:`scalar_colors`.
    """
    ext = _ext(path)
    pts = surface.points
    if scalar is not None:
        scalar = np.asarray(scalar, dtype=np.float64).ravel()
        if len(scalar) != len(pts):
            raise ValueError(f"scalar has {len(scalar)} values for {len(pts)} vertices")
    faces = surface.faces if surface.faces is not None else np.zeros((0, 3), dtype=np.int64)
    if ext == ".obj":
        with open(path, "w") as fh:
            if scalar is not None:
                rgb = scalar_colors(scalar)
                fh.write(f"# vertex colours: blue={scalar.min():.17g} red={scalar.max():.17g}\n")
                for p, c in zip(pts, rgb):
                    fh.write("v %.17g %.17g %.17g %.6f %.6f %.6f\n" % (*p, *c))
            else:
                for p in pts:
                    fh.write("v %.17g %.17g %.17g\n" % tuple(p))
            for f in faces + 1:
                fh.write("f %d %d %d\n" % tuple(f))
        return

    header = [
        "ply",
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
        f"element vertex {len(pts)}",
        "property double x",
        "property double y",
        "property double z",
    ]
    if scalar is not None:
        header.append("property double quality")
    if len(faces):
        header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    cols = pts if scalar is None else np.column_stack([pts, scalar])
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(cols, dtype="<f8").tobytes())
            if len(faces):
                rec = np.empty(len(faces), dtype=[("n", "u1"), ("i", "<i4", (3,))])
                rec["n"] = 3
                rec["i"] = faces
                fh.write(rec.tobytes())
        else:
            fmt = " ".join(["%.17g"] * cols.shape[1]) + "\n"
            fh.write("".join(fmt % tuple(r) for r in cols).encode("ascii"))
            fh.write("".join("3 %d %d %d\n" % tuple(f) for f in faces).encode("ascii"))


def _read_rows(path, ncols, kinds):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != ncols:
                raise MeshFormatError(f"{path}:{lineno}: expected {ncols} fields, got {len(parts)}")
            try:
                rows.append([k(x) for k, x in zip(kinds, parts)])
            except ValueError:
                raise MeshFormatError(f"{path}:{lineno}: malformed record") from None
    return rows


def load_flows(path) -> tuple[np.ndarray, np.ndarray]:
    """Flow file: one ``i tx ty tz`` line per source vertex with known motion."""
    rows = _read_rows(path, 4, (int, float, float, float))
    idx = np.array([r[0] for r in rows], dtype=np.int64)
    vec = np.array([r[1:] for r in rows], dtype=np.float64).reshape(-1, 3)
    return idx, vec


def save_flows(path, idx, vec) -> None:
    with open(path, "w") as fh:
        for i, v in zip(np.asarray(idx).tolist(), np.asarray(vec).reshape(-1, 3)):
            fh.write("%d %.17g %.17g %.17g\n" % (i, *v))


def load_landmarks(path) -> tuple[np.ndarray, np.ndarray]:
    """Landmark file: one ``src_index tgt_index`` pair per line."""
    rows = _read_rows(path, 2, (int, int))
    arr = np.array(rows, dtype=np.int64).reshape(-1, 2)
    return arr[:, 0], arr[:, 1]


def save_mask(path, mask) -> None:
    """One ``0``/``1`` line per vertex of the uncropped mesh."""
    with open(path, "w") as fh:
        fh.writelines("1\n" if m else "0\n" for m in np.asarray(mask, dtype=bool))


def load_mask(path) -> np.ndarray:
    rows = _read_rows(path, 1, (int,))
    return np.array([r[0] for r in rows], dtype=bool)


def write_json(obj, path) -> None:
    import json

    if path == "-":
        json.dump(obj, sys.stdout, indent=2)
        sys.stdout.write("\n")
        return
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")
