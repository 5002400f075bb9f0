"""Voxel volumes, coefficient fields and visualization exports.

On-disk volume format is a header/payload pair::

    <name>.json  {"dims": [nx, ny, nz], "spacing_mm": [...], "origin_mm": [...],
                  "dtype": "f32", "order": "x-fastest", "endianness": "little"}
    <name>.raw   nx*ny*nz little-endian values, x index varying fastest

``origin_mm`` is the lower corner of the image box; voxel ``(i, j, k)`` is
centred at ``origin + (i + 0.5, j + 0.5, k + 0.5) * spacing``.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, DomainError

_DTYPES = {"f32": "<f4", "f64": "<f8"}

SENTINEL = -9999.0


@dataclass(frozen=True, eq=False)
class VoxelVolume:
    """A 3D scalar grid with spacing/origin metadata.

    ``data`` is indexed ``[i, j, k]`` along (x, y, z).
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ConfigurationError(f"volume data must be 3D, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != 3 or len(origin) != 3:
            raise ConfigurationError("spacing and origin need three entries")
        if any(not s > 0 for s in spacing):
            raise ConfigurationError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self):
        return tuple(int(n) for n in self.data.shape)

    @property
    def lower(self):
        return np.asarray(self.origin)

    @property
    def upper(self):
        return np.asarray(self.origin) + np.asarray(self.dims) * np.asarray(self.spacing)

    def centers(self):
        """Voxel-centre coordinates, shape (nx*ny*nz, 3), x-fastest."""
        axes = [self.origin[a] + (np.arange(n) + 0.5) * self.spacing[a]
                for a, n in enumerate(self.dims)]
        X, Y, Z = np.meshgrid(*axes, indexing="ij")
        return np.stack([X.ravel(order="F"), Y.ravel(order="F"), Z.ravel(order="F")], axis=1)

    def interpolate(self, points):
        """Trilinear interpolation at ``points`` (Q, 3); clamps to the outer voxel centres."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        coords = (pts - self.lower) / np.asarray(self.spacing) - 0.5
        return ndimage.map_coordinates(self.data.astype(float), coords.T, order=1, mode="nearest")

    def with_data(self, data):
        return VoxelVolume(np.asarray(data).reshape(self.dims), self.spacing, self.origin, dict(self.meta))


def _paths(path):
    path = os.fspath(path)
    base = path[:-5] if path.endswith(".json") else path[:-4] if path.endswith(".raw") else path
    return base + ".json", base + ".raw"


def write_volume(volume, path, dtype="f32"):
    """Write ``volume`` as ``<path>.json`` + ``<path>.raw``; returns the header path."""
    if dtype not in _DTYPES:
        raise ConfigurationError(f"unknown dtype {dtype!r}")
    hdr_path, raw_path = _paths(path)
    header = {
        "dims": list(volume.dims),
        "spacing_mm": list(volume.spacing),
        "origin_mm": list(volume.origin),
        "dtype": dtype,
        "order": "x-fastest",
        "endianness": "little",
    }
    if volume.meta:
        header["meta"] = volume.meta
    payload = np.asarray(volume.data, dtype=_DTYPES[dtype]).ravel(order="F")
    with open(hdr_path, "w") as fh:
        json.dump(header, fh, indent=1)
    with open(raw_path, "wb") as fh:
        fh.write(payload.tobytes())
    return hdr_path


def read_volume(path, allow_nan=False):
    """Read a volume written by :func:`write_volume`.

    Raises ConfigurationError on an unknown dtype/order or a payload whose size
    disagrees with the header, and DomainError on NaNs unless ``allow_nan``.
    """
    hdr_path, raw_path = _paths(path)
    with open(hdr_path) as fh:
        header = json.load(fh)
    dtype = header.get("dtype")
    if dtype not in _DTYPES:
        raise ConfigurationError(f"unknown dtype {dtype!r} in {hdr_path}")
    if header.get("order", "x-fastest") != "x-fastest":
        raise ConfigurationError(f"unsupported order {header.get('order')!r}")
    if header.get("endianness", "little") != "little":
        raise ConfigurationError("only little-endian payloads are supported")
    dims = [int(n) for n in header["dims"]]
    with open(raw_path, "rb") as fh:
        raw = fh.read()
    itemsize = np.dtype(_DTYPES[dtype]).itemsize
    expected = math.prod(dims) * itemsize
    if len(raw) != expected:
        raise ConfigurationError(
            f"payload size mismatch for {raw_path}: header implies {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype=_DTYPES[dtype]).reshape(dims, order="F")
    if not allow_nan and np.isnan(data).any():
        raise DomainError(f"NaN values in {raw_path} (pass allow_nan=True to accept)")
    return VoxelVolume(data.copy(), tuple(header["spacing_mm"]), tuple(header["origin_mm"]),
                       header.get("meta", {}))


# -- spline coefficient fields ----------------------------------------------------------

def write_field(f, path):
    """Store a Field or VectorField as a header/payload pair (f64 tensor coefficients)."""
    from .spline_space import VectorField

    space = f.space
    comps = f.coef.reshape(3, -1) if isinstance(f, VectorField) else f.coef[None, :]
    full = np.zeros((comps.shape[0], space.n_total))
    full[:, space.active] = comps
    hdr_path, raw_path = _paths(path)
    header = {
        "kind": "spline_field",
        "degree": space.degree,
        "lower_mm": list(map(float, space.lower)),
        "upper_mm": list(map(float, space.upper)),
        "elements": list(map(int, space.shape)),
        "components": int(comps.shape[0]),
        "active": list(map(int, space.active)),
        "dtype": "f64",
        "order": "x-fastest",
        "endianness": "little",
    }
    with open(hdr_path, "w") as fh:
        json.dump(header, fh)
    with open(raw_path, "wb") as fh:
        fh.write(np.ascontiguousarray(full, dtype="<f8").tobytes())
    return hdr_path


def read_field(path, space=None):
    """Read a field written by :func:`write_field`.

    When ``space`` is given the stored layout must match it and the returned
    field shares that space object.
    """
    from .spline_space import Field, SplineSpace, VectorField

    hdr_path, raw_path = _paths(path)
    with open(hdr_path) as fh:
        header = json.load(fh)
    if header.get("kind") != "spline_field":
        raise ConfigurationError(f"{hdr_path} is not a spline field")
    active = np.asarray(header["active"], dtype=np.int64)
    if space is None:
        space = SplineSpace(header["lower_mm"], header["upper_mm"], header["elements"]).restrict(active)
    elif (list(space.shape) != list(header["elements"]) or space.n_cp != active.size
          or not np.array_equal(space.active, active)):
        raise ConfigurationError(f"field {hdr_path} was stored on a different spline space")
    ncomp = int(header["components"])
    raw = np.fromfile(raw_path, dtype="<f8")
    if raw.size != ncomp * space.n_total:
        raise ConfigurationError(f"payload size mismatch for {raw_path}")
    comps = raw.reshape(ncomp, space.n_total)[:, space.active]
    if ncomp == 1:
        return Field(space, comps[0].copy())
    return VectorField(space, comps.ravel().copy())


# -- structured-grid export ---------------------------------------------------------------

def export_structured_grid(path, fields, grid, domain=None, title="glymph export"):
    """Write fields sampled at voxel centres of ``grid`` as legacy-ASCII structured points.

    ``fields`` maps array names to Field or VectorField objects sharing one space.
    Points where the domain's level set is negative get the sentinel -9999.
    """
    from .spline_space import VectorField

    fields = dict(fields)
    if not fields:
        raise ConfigurationError("nothing to export")
    spaces = {id(f.space) for f in fields.values()}
    if len(spaces) != 1:
        raise ConfigurationError("all exported fields must share one spline space")
    pts = grid.centers()
    outside = np.zeros(len(pts), dtype=bool)
    if domain is not None:
        outside = domain.level_set(pts) < 0
    dims = grid.dims
    first = grid.lower + 0.5 * np.asarray(grid.spacing)
    lines = [
        "# vtk DataFile Version 3.0",
        title,
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        "DIMENSIONS %d %d %d" % dims,
        "ORIGIN %s %s %s" % tuple(_fmt(v) for v in first),
        "SPACING %s %s %s" % tuple(_fmt(v) for v in grid.spacing),
        "POINT_DATA %d" % len(pts),
    ]
    for name, f in fields.items():
        vals = np.asarray(f(pts))
        if isinstance(f, VectorField):
            vals = np.where(outside[:, None], SENTINEL, vals)
            lines.append(f"VECTORS {name} double")
            lines.extend(" ".join(_fmt(v) for v in row) for row in vals)
        else:
            vals = np.where(outside, SENTINEL, vals)
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend(_fmt(v) for v in vals)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def _fmt(v):
    s = "%.10g" % v
    return "0" if s == "-0" else s


# -- snapshot manifests -------------------------------------------------------------------

def write_manifest(path, snapshots, extra=None):
    """Write a snapshot manifest; ``snapshots`` is a list of (time_min, volume_path)."""
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    for t, p in snapshots:
        p = os.fspath(p)
        rel = os.path.relpath(os.path.abspath(p), base)
        entries.append({"time_min": float(t), "path": rel})
    doc = dict(extra or {})
    doc["snapshots"] = entries
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
    return path


def read_manifest(path):
    with open(path) as fh:
        doc = json.load(fh)
    if "snapshots" not in doc:
        raise ConfigurationError(f"{path} has no 'snapshots' list")
    return doc


def _check_uniform(times, rtol=1e-9):
    times = np.asarray(times, dtype=float)
    if times.size < 2:
        raise ConfigurationError("a snapshot series needs at least two snapshots")
    steps = np.diff(times)
    dt = steps[0]
    if not dt > 0 or np.any(np.abs(steps - dt) > rtol * max(1.0, abs(dt))):
        raise ConfigurationError(f"snapshot times are not uniformly spaced: {times.tolist()}")
    return float(dt)


def read_snapshot_series(manifest, domain=None, allow_nan=False):
    """Load the snapshots listed in ``manifest``.

    Returns ``(times, dt, items)`` where items are VoxelVolumes, or Fields
    projected with :func:`glymph.spline_space.l2_project` when ``domain`` is given.
    """
    doc = read_manifest(manifest) if not isinstance(manifest, dict) else manifest
    base = os.path.dirname(os.path.abspath(manifest)) if not isinstance(manifest, dict) else "."
    entries = doc["snapshots"]
    times = [float(e["time_min"]) for e in entries]
    dt = _check_uniform(times)
    vols = [read_volume(os.path.join(base, e["path"]), allow_nan=allow_nan) for e in entries]
    if domain is None:
        return times, dt, vols
    from .spline_space import l2_project
    return times, dt, [l2_project(domain.space, domain, v) for v in vols]
