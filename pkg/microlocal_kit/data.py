"""Reading and writing h-families: the MLK1 binary container and a small-case CSV layout."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import pandas as pd

from .hgrid import Grid, HFamily, SampledFunction
from .symcalc import axis_names

MAGIC = b"MLK1"
VERSION = 1

# magic, version, dim, member count
_HEADER = struct.Struct("<4sIII")


def save_family(family: HFamily, path: str | Path) -> Path:
    """Write a family to an MLK1 file.

    Layout (little-endian): header ``magic, version, dim, count``; per axis
    ``lo, hi`` as float64 and ``n_points`` as uint32; ``count`` float64 h
    values; then each member's values as complex128 in C order.

    Returns:
        The path written.
    """
    path = Path(path)
    grid = family.grid
    with path.open("wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, grid.dim, len(family)))
        for lo, hi, n in zip(grid.lo, grid.hi, grid.n_points):
            fh.write(struct.pack("<ddI", lo, hi, n))
        fh.write(np.asarray(family.h_values, dtype="<f8").tobytes())
        for member in family:
            fh.write(np.ascontiguousarray(member.values, dtype="<c16").tobytes())
    return path


def load_family(path: str | Path) -> HFamily:
    """Load an MLK1 file written by ``save_family``.

    Raises:
        FileNotFoundError: If the file doesn't exist.
        ValueError: If the magic, version or length is wrong.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Family file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path} is too short to be an MLK1 file")
    magic, version, dim, count = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ValueError(f"{path} is not an MLK1 file (magic {magic!r})")
    if version != VERSION:
        raise ValueError(f"Unsupported MLK1 version {version}")

    offset = _HEADER.size
    axis = struct.Struct("<ddI")
    lo, hi, n_points = [], [], []
    for _ in range(dim):
        a, b, n = axis.unpack_from(raw, offset)
        offset += axis.size
        lo.append(a)
        hi.append(b)
        n_points.append(n)
    grid = Grid(tuple(lo), tuple(hi), tuple(n_points))

    expected = offset + 8 * count + 16 * count * grid.size
    if len(raw) != expected:
        raise ValueError(f"{path} has {len(raw)} bytes, expected {expected}")
    h_values = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
    offset += 8 * count
    members = []
    for h in h_values:
        values = np.frombuffer(raw, dtype="<c16", count=grid.size, offset=offset)
        offset += 16 * grid.size
        members.append(SampledFunction(grid, values.reshape(grid.shape), float(h)))
    return HFamily(grid, tuple(float(h) for h in h_values), tuple(members))


def family_to_frame(family: HFamily) -> pd.DataFrame:
    """Long table with columns ``h, x | x1, x2, re, im``, one row per member and node."""
    columns = axis_names("x", family.grid.dim)
    nodes = [c.ravel() for c in family.grid.mesh()]
    frames = []
    for member in family:
        frame = pd.DataFrame({"h": member.h}, index=range(family.grid.size))
        for name, coords in zip(columns, nodes):
            frame[name] = coords
        frame["re"] = member.values.real.ravel()
        frame["im"] = member.values.imag.ravel()
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def save_family_csv(family: HFamily, path: str | Path) -> Path:
    path = Path(path)
    family_to_frame(family).to_csv(path, index=False, float_format="%.17g")
    return path


def load_family_csv(path: str | Path) -> HFamily:
    """Rebuild a family from the CSV layout of ``family_to_frame``.

    The grid is inferred from the node coordinates: ``lo`` is the smallest
    node, the spacing the difference of the first two, ``hi = lo + n * dx``.

    Raises:
        FileNotFoundError: If the file doesn't exist.
        ValueError: If values are missing, rows are duplicated or the members
            do not share one grid.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Family file not found: {path}")
    df = pd.read_csv(path)
    columns = ["x"] if "x" in df.columns else ["x1", "x2"]
    missing = {"h", "re", "im", *columns} - set(df.columns)
    if missing:
        raise ValueError(f"CSV is missing columns: {sorted(missing)}")

    # Validate: non-null entries
    if df[["h", "re", "im", *columns]].isnull().any().any():
        raise ValueError("Found null values in family CSV")

    # Validate: one row per (h, node)
    if df.duplicated(subset=["h", *columns]).any():
        raise ValueError("Found duplicate (h, node) rows in family CSV")

    lo, hi, n_points = [], [], []
    for name in columns:
        axis = np.unique(df[name].to_numpy())
        if len(axis) < 2:
            raise ValueError(f"Axis {name} has fewer than two nodes")
        dx = axis[1] - axis[0]
        lo.append(float(axis[0]))
        hi.append(float(axis[0] + len(axis) * dx))
        n_points.append(len(axis))
    grid = Grid(tuple(lo), tuple(hi), tuple(n_points))

    h_values = sorted(df["h"].unique(), reverse=True)
    members = []
    for h in h_values:
        part = df[df["h"] == h].sort_values(columns)
        if len(part) != grid.size:
            raise ValueError(f"Member h={h} has {len(part)} rows, expected {grid.size}")
        values = (part["re"].to_numpy() + 1j * part["im"].to_numpy()).reshape(grid.shape)
        members.append(SampledFunction(grid, values, float(h)))
    return HFamily(grid, tuple(float(h) for h in h_values), tuple(members))
