"""Minimal ASCII PLY reader/writer for xyz vertex clouds (float32 semantics)."""

from __future__ import annotations

import numpy as np

from .validation import check_points


def write_ply(path, points) -> None:
    """Write an (N, 3) cloud as ASCII PLY with float32 vertex properties."""
    pts = check_points(points).astype(np.float32)
    with open(path, "w", encoding="ascii") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {pts.shape[0]}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("end_header\n")
        for x, y, z in pts:
            f.write(f"{x:.9g} {y:.9g} {z:.9g}\n")


def read_ply(path) -> np.ndarray:
    """Read an ASCII PLY vertex cloud; returns (N, 3) float64 (float32-valued).

    Only the x/y/z properties of the vertex element are used; extra vertex
    properties are ignored. Raises ValueError on malformed files.
    """
    path = str(path)
    with open(path, "r", encoding="ascii", errors="replace") as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file (missing 'ply' magic)")

    n_vertices = None
    properties: list[str] = []
    in_vertex_element = False
    body_start = None
    for i, line in enumerate(lines[1:], start=1):
        tokens = line.split()
        if not tokens:
            continue
        if tokens[0] == "format":
            if tokens[1] != "ascii":
                raise ValueError(f"{path}: only ASCII PLY is supported, got {tokens[1]}")
        elif tokens[0] == "element":
            in_vertex_element = tokens[1] == "vertex"
            if in_vertex_element:
                n_vertices = int(tokens[2])
        elif tokens[0] == "property" and in_vertex_element:
            properties.append(tokens[-1])
        elif tokens[0] == "end_header":
            body_start = i + 1
            break
    if body_start is None or n_vertices is None:
        raise ValueError(f"{path}: malformed PLY header")
    for axis in ("x", "y", "z"):
        if axis not in properties:
            raise ValueError(f"{path}: vertex element lacks property '{axis}'")
    cols = [properties.index(a) for a in ("x", "y", "z")]

    rows = []
    for lineno, line in enumerate(lines[body_start : body_start + n_vertices], start=body_start + 1):
        values = line.split()
        if len(values) < len(properties):
            raise ValueError(f"{path}:{lineno}: expected {len(properties)} values, got {len(values)}")
        try:
            rows.append([np.float32(values[c]) for c in cols])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    if len(rows) != n_vertices:
        raise ValueError(f"{path}: header declares {n_vertices} vertices, found {len(rows)}")
    return np.asarray(rows, dtype=np.float64)
