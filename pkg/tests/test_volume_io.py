"""Tests for voxel volume and spline field storage, manifests and structured-grid export."""

import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from glymph.errors import ConfigurationError, DomainError
from glymph.spline_space import Field, VectorField
from glymph.volume_io import (SENTINEL, VoxelVolume, export_structured_grid, read_field, read_manifest,
                              read_snapshot_series, read_volume, write_field, write_manifest, write_volume)


def vtk_section(path, name):
    """Values following the array header ``name`` up to the next header."""
    lines = open(path).read().splitlines()
    start = next(i for i, line in enumerate(lines) if line.split()[1:2] == [name])
    skip = 2 if lines[start].startswith("SCALARS") else 1
    out = []
    for line in lines[start + skip:]:
        if line.startswith(("SCALARS", "VECTORS")):
            break
        out.append(line)
    return out


class TestVoxelVolume:
    """In-memory volume container."""

    def test_bad_spacing(self):
        with pytest.raises(ConfigurationError):
            VoxelVolume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))

    def test_bad_ndim(self):
        with pytest.raises(ConfigurationError):
            VoxelVolume(np.zeros((2, 2)))

    def test_centers_x_fastest(self):
        v = VoxelVolume(np.zeros((3, 2, 2)), (1.0, 2.0, 3.0), (10.0, 0.0, 0.0))
        c = v.centers()
        np.testing.assert_allclose(c[:4], [[10.5, 1, 1.5], [11.5, 1, 1.5], [12.5, 1, 1.5], [10.5, 3, 1.5]])

    def test_interpolate_linear(self):
        grid = VoxelVolume(np.zeros((6, 6, 6)), (0.5, 0.5, 0.5))
        lin = grid.with_data((2 * grid.centers()[:, 1] + 1).reshape(grid.dims, order="F"))
        pts = np.random.default_rng(0).uniform(0.3, 2.7, size=(20, 3))
        np.testing.assert_allclose(lin.interpolate(pts), 2 * pts[:, 1] + 1, atol=1e-12)


class TestVolumeFiles:
    """Header/payload pairs."""

    def test_constant_2x2x2(self, tmp_path):
        v = VoxelVolume(np.full((2, 2, 2), 1.5))
        write_volume(v, tmp_path / "a")
        raw = (tmp_path / "a.raw").read_bytes()
        assert len(raw) == 32
        assert raw == np.full(8, 1.5, dtype="<f4").tobytes()
        w = read_volume(tmp_path / "a.json")
        np.testing.assert_array_equal(w.data, v.data)
        write_volume(w, tmp_path / "b")
        assert (tmp_path / "b.raw").read_bytes() == raw

    def test_header_keys(self, tmp_path):
        write_volume(VoxelVolume(np.zeros((2, 3, 4)), (0.3, 0.3, 0.3), (1, 2, 3)), tmp_path / "h")
        hdr = json.loads((tmp_path / "h.json").read_text())
        assert hdr["dims"] == [2, 3, 4]
        assert hdr["order"] == "x-fastest" and hdr["endianness"] == "little" and hdr["dtype"] == "f32"

    def test_payload_is_x_fastest(self, tmp_path):
        data = np.arange(24, dtype=float).reshape((2, 3, 4), order="F")
        write_volume(VoxelVolume(data), tmp_path / "o")
        np.testing.assert_array_equal(np.fromfile(tmp_path / "o.raw", dtype="<f4"), np.arange(24))

    def test_size_mismatch(self, tmp_path):
        write_volume(VoxelVolume(np.ones((2, 2, 2))), tmp_path / "s")
        (tmp_path / "s.raw").write_bytes(b"\0" * 28)
        with pytest.raises(ConfigurationError):
            read_volume(tmp_path / "s")

    def test_unknown_dtype(self, tmp_path):
        with pytest.raises(ConfigurationError):
            write_volume(VoxelVolume(np.ones((2, 2, 2))), tmp_path / "d", dtype="i8")
        write_volume(VoxelVolume(np.ones((2, 2, 2))), tmp_path / "d")
        hdr = json.loads((tmp_path / "d.json").read_text())
        hdr["dtype"] = "u16"
        (tmp_path / "d.json").write_text(json.dumps(hdr))
        with pytest.raises(ConfigurationError):
            read_volume(tmp_path / "d")

    def test_nan_policy(self, tmp_path):
        data = np.ones((2, 2, 2))
        data[1, 0, 1] = np.nan
        write_volume(VoxelVolume(data), tmp_path / "n")
        with pytest.raises(DomainError):
            read_volume(tmp_path / "n")
        assert np.isnan(read_volume(tmp_path / "n", allow_nan=True).data).sum() == 1

    def test_origin_roundtrip(self, tmp_path):
        v = VoxelVolume(np.ones((2, 2, 2)), (0.3, 0.7, 1.1), (-12.345678901234, 0.1, 7.0))
        w = read_volume(write_volume(v, tmp_path / "g"))
        assert w.origin == v.origin and w.spacing == v.spacing

    @settings(max_examples=20, deadline=None)
    @given(data=arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)),
                       elements=st.floats(-1e6, 1e6, width=32)))
    def test_roundtrip_bytes(self, tmp_path_factory, data):
        d = tmp_path_factory.mktemp("rt")
        write_volume(VoxelVolume(data), d / "x")
        first = (d / "x.raw").read_bytes()
        write_volume(read_volume(d / "x"), d / "y")
        assert (d / "y.raw").read_bytes() == first
        np.testing.assert_array_equal(read_volume(d / "y").data, data)


class TestFieldFiles:
    """Spline coefficient storage."""

    def test_scalar_roundtrip(self, tmp_path, sphere_domain):
        f = Field(sphere_domain.space, np.random.default_rng(0).normal(size=sphere_domain.space.n_cp))
        g = read_field(write_field(f, tmp_path / "f"))
        np.testing.assert_array_equal(g.coef, f.coef)
        np.testing.assert_array_equal(g.space.active, f.space.active)

    def test_vector_roundtrip_on_given_space(self, tmp_path, sphere_domain):
        u = VectorField(sphere_domain.space, np.arange(3 * sphere_domain.space.n_cp, dtype=float))
        v = read_field(write_field(u, tmp_path / "u"), space=sphere_domain.space)
        assert isinstance(v, VectorField) and v.space is sphere_domain.space
        np.testing.assert_array_equal(v.coef, u.coef)

    def test_space_mismatch(self, tmp_path, sphere_domain, box_domain):
        write_field(Field.zeros(sphere_domain.space), tmp_path / "m")
        with pytest.raises(ConfigurationError):
            read_field(tmp_path / "m", space=box_domain.space)


class TestExport:
    """Legacy structured-points export."""

    def test_constant_full_box(self, tmp_path, box_domain):
        grid = VoxelVolume(np.zeros((4, 4, 4)), (2.5, 2.5, 2.5))
        path = export_structured_grid(tmp_path / "c.vtk", {"c": Field.constant(box_domain.space, 2.0)}, grid,
                                      box_domain)
        vals = vtk_section(path, "c")
        assert len(vals) == 64 and all(v == "2" for v in vals)
        head = open(path).read().splitlines()
        assert head[4] == "DIMENSIONS 4 4 4" and head[7] == "POINT_DATA 64"

    def test_sentinel_outside_sphere(self, tmp_path, sphere_domain):
        grid = VoxelVolume(np.zeros((10, 10, 10)), (1.0, 1.0, 1.0))
        path = export_structured_grid(tmp_path / "s.vtk", {"c": Field.constant(sphere_domain.space, 1.0)},
                                      grid, sphere_domain)
        vals = np.array([float(v) for v in vtk_section(path, "c")])
        outside = sphere_domain.level_set(grid.centers()) < 0
        np.testing.assert_array_equal(vals == SENTINEL, outside)
        assert 0 < outside.sum() < outside.size

    def test_constant_vector(self, tmp_path, box_domain):
        grid = VoxelVolume(np.zeros((3, 3, 3)), (10 / 3, 10 / 3, 10 / 3))
        s = box_domain.space
        u = VectorField.from_components([Field.constant(s, 1.0), Field.zeros(s), Field.zeros(s)])
        vals = vtk_section(export_structured_grid(tmp_path / "v.vtk", {"u": u}, grid), "u")
        assert vals == ["1 0 0"] * 27

    def test_mixed_spaces(self, tmp_path, box_domain, sphere_domain):
        grid = VoxelVolume(np.zeros((2, 2, 2)), (5.0, 5.0, 5.0))
        fields = {"a": Field.zeros(box_domain.space), "b": Field.zeros(sphere_domain.space)}
        with pytest.raises(ConfigurationError):
            export_structured_grid(tmp_path / "x.vtk", fields, grid)


class TestSnapshotSeries:
    """Manifests of timed snapshots."""

    def write_series(self, d, times):
        snaps = []
        for n, t in enumerate(times):
            p = write_volume(VoxelVolume(np.full((20, 20, 20), 1.0 + n), (0.5, 0.5, 0.5)), d / f"s{n}")
            snaps.append((t, p))
        return write_manifest(d / "manifest.json", snaps, {"note": "test"})

    def test_five_snapshots(self, tmp_path):
        times, dt, vols = read_snapshot_series(self.write_series(tmp_path, [0, 5, 10, 15, 20]))
        assert len(vols) == 5 and dt == 5.0 and times == [0, 5, 10, 15, 20]
        assert vols[3].data[0, 0, 0] == 4.0

    def test_projection_to_fields(self, tmp_path, box_domain):
        _, _, fields = read_snapshot_series(self.write_series(tmp_path, [0, 5]), domain=box_domain)
        np.testing.assert_allclose(fields[1].coef, 2.0, atol=1e-9)

    def test_nonuniform(self, tmp_path):
        with pytest.raises(ConfigurationError):
            read_snapshot_series(self.write_series(tmp_path, [0, 5, 11]))

    def test_single(self, tmp_path):
        with pytest.raises(ConfigurationError):
            read_snapshot_series(self.write_series(tmp_path, [0]))

    def test_manifest_relative_paths_and_order(self, tmp_path):
        path = self.write_series(tmp_path, [0, 5, 10])
        doc = read_manifest(path)
        assert [e["path"] for e in doc["snapshots"]] == ["s0.json", "s1.json", "s2.json"]
        assert doc["note"] == "test"
        cwd = os.getcwd()
        try:
            os.chdir("/")
            assert len(read_snapshot_series(path)[2]) == 3
        finally:
            os.chdir(cwd)

    def test_missing_snapshots_key(self, tmp_path):
        (tmp_path / "bad.json").write_text("{}")
        with pytest.raises(ConfigurationError):
            read_manifest(tmp_path / "bad.json")
