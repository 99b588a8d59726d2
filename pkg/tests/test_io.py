import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdvmatch import io
from sdvmatch.core import RigidTransform
from sdvmatch.errors import (
    BadMagic,
    DimMismatch,
    InvariantViolation,
    MalformedHeader,
    MissingCoordinateProperty,
    SdvMatchError,
    TruncatedPayload,
    UnknownKey,
    UnsupportedEncoding,
)
from sdvmatch.evaluation import random_rotation


class TestPly:
    def test_single_vertex_ascii(self, tmp_path):
        p = tmp_path / "one.ply"
        p.write_text(
            "ply\nformat ascii 1.0\nelement vertex 1\n"
            "property float x\nproperty float y\nproperty float z\n"
            "end_header\n0 0 0\n"
        )
        np.testing.assert_array_equal(io.read_ply(p), [[0.0, 0.0, 0.0]])

    @pytest.mark.parametrize("ascii_format", [False, True])
    def test_roundtrip(self, tmp_path, rng, ascii_format):
        pts = rng.uniform(-10, 10, (500, 3))
        p = tmp_path / "c.ply"
        io.write_ply(p, pts, ascii_format=ascii_format)
        back = io.read_ply(p)
        np.testing.assert_array_equal(back, pts.astype(np.float32).astype(np.float64))

    def test_truncated_payload_ascii(self, tmp_path):
        p = tmp_path / "t.ply"
        p.write_text(
            "ply\nformat ascii 1.0\nelement vertex 10\n"
            "property float x\nproperty float y\nproperty float z\n"
            "end_header\n" + "0 0 0\n" * 9
        )
        with pytest.raises(TruncatedPayload):
            io.read_ply(p)

    def test_truncated_payload_binary(self, tmp_path, rng):
        p = tmp_path / "t.ply"
        io.write_ply(p, rng.uniform(0, 1, (10, 3)))
        data = p.read_bytes()
        p.write_bytes(data[:-4])
        with pytest.raises(TruncatedPayload):
            io.read_ply(p)

    def test_big_endian_rejected(self, tmp_path):
        p = tmp_path / "b.ply"
        p.write_text(
            "ply\nformat binary_big_endian 1.0\nelement vertex 0\n"
            "property float x\nproperty float y\nproperty float z\nend_header\n"
        )
        with pytest.raises(UnsupportedEncoding):
            io.read_ply(p)

    def test_missing_coordinate(self, tmp_path):
        p = tmp_path / "m.ply"
        p.write_text(
            "ply\nformat ascii 1.0\nelement vertex 0\n"
            "property float x\nproperty float y\nend_header\n"
        )
        with pytest.raises(MissingCoordinateProperty):
            io.read_ply(p)

    def test_integer_coordinates_rejected(self, tmp_path):
        p = tmp_path / "i.ply"
        p.write_text(
            "ply\nformat ascii 1.0\nelement vertex 1\n"
            "property int x\nproperty float y\nproperty float z\n"
            "end_header\n0 0 0\n"
        )
        with pytest.raises(UnsupportedEncoding):
            io.read_ply(p)

    def test_not_a_ply(self, tmp_path):
        p = tmp_path / "n.ply"
        p.write_bytes(b"OFF\n0 0 0\n")
        with pytest.raises(MalformedHeader):
            io.read_ply(p)

    def test_extra_vertex_properties_skipped(self, tmp_path):
        p = tmp_path / "extra.ply"
        header = (
            "ply\nformat binary_little_endian 1.0\nelement vertex 2\n"
            "property float x\nproperty float y\nproperty float z\n"
            "property uchar red\nend_header\n"
        ).encode()
        row = struct.pack("<fffB", 1.0, 2.0, 3.0, 255)
        p.write_bytes(header + row + struct.pack("<fffB", 4.0, 5.0, 6.0, 0))
        np.testing.assert_array_equal(io.read_ply(p), [[1, 2, 3], [4, 5, 6]])

    @given(st.binary(min_size=0, max_size=400))
    @settings(max_examples=100, deadline=None)
    def test_fuzz_typed_errors_only(self, tmp_path_factory, data):
        p = tmp_path_factory.mktemp("fuzz") / "f.ply"
        p.write_bytes(data)
        try:
            io.read_ply(p)
        except SdvMatchError:
            pass

    @given(st.binary(min_size=0, max_size=400))
    @settings(max_examples=100, deadline=None)
    def test_fuzz_ply_prefixed(self, tmp_path_factory, data):
        p = tmp_path_factory.mktemp("fuzz") / "f.ply"
        p.write_bytes(b"ply\nformat ascii 1.0\n" + data)
        try:
            io.read_ply(p)
        except SdvMatchError:
            pass


class TestDescriptors:
    def test_empty_set(self, tmp_path):
        p = tmp_path / "d.sdvd"
        io.write_descriptors(p, np.zeros((0, 32), dtype=np.float32))
        assert p.stat().st_size == 16
        back = io.read_descriptors(p)
        assert back.shape == (0, 32)

    def test_roundtrip_bit_exact(self, tmp_path, rng):
        d = rng.standard_normal((3, 32)).astype(np.float32)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        p = tmp_path / "d.sdvd"
        io.write_descriptors(p, d)
        back = io.read_descriptors(p)
        assert back.dtype == np.float32
        np.testing.assert_array_equal(back, d)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.sdvd"
        p.write_bytes(b"XXXX" + struct.pack("<III", 1, 0, 8))
        with pytest.raises(BadMagic):
            io.read_descriptors(p)

    def test_truncated(self, tmp_path, rng):
        p = tmp_path / "d.sdvd"
        io.write_descriptors(p, rng.standard_normal((4, 8)).astype(np.float32))
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(TruncatedPayload):
            io.read_descriptors(p)

    def test_dim_mismatch(self, tmp_path, rng):
        p = tmp_path / "d.sdvd"
        io.write_descriptors(p, rng.standard_normal((4, 8)).astype(np.float32))
        with pytest.raises(DimMismatch):
            io.read_descriptors(p, expected_dim=16)

    def test_ragged_rejected(self, tmp_path):
        with pytest.raises((DimMismatch, ValueError)):
            io.write_descriptors(tmp_path / "d.sdvd", [[1.0, 2.0], [1.0]])

    @given(st.integers(min_value=0, max_value=2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_roundtrip_random(self, tmp_path_factory, seed):
        r = np.random.default_rng(seed)
        d = r.standard_normal((int(r.integers(0, 20)), int(r.integers(1, 64)))).astype(np.float32)
        p = tmp_path_factory.mktemp("d") / "d.sdvd"
        io.write_descriptors(p, d)
        np.testing.assert_array_equal(io.read_descriptors(p), d)

    @given(st.binary(min_size=0, max_size=200))
    @settings(max_examples=100, deadline=None)
    def test_fuzz(self, tmp_path_factory, data):
        p = tmp_path_factory.mktemp("fuzz") / "f.sdvd"
        p.write_bytes(data)
        try:
            io.read_descriptors(p)
        except SdvMatchError:
            pass


class TestKeypoints:
    def test_roundtrip(self, tmp_path):
        p = tmp_path / "k.txt"
        io.write_keypoints(p, [5, 1, 9])
        np.testing.assert_array_equal(io.read_keypoints(p), [5, 1, 9])

    def test_duplicate_rejected(self, tmp_path):
        p = tmp_path / "k.txt"
        p.write_text("1\n2\n1\n")
        with pytest.raises(InvariantViolation):
            io.read_keypoints(p)

    def test_out_of_range(self, tmp_path):
        p = tmp_path / "k.txt"
        p.write_text("0\n10\n")
        with pytest.raises(InvariantViolation):
            io.read_keypoints(p, cloud_size=10)

    def test_garbage_rejected(self, tmp_path):
        p = tmp_path / "k.txt"
        p.write_text("zero\n")
        with pytest.raises(InvariantViolation):
            io.read_keypoints(p)


class TestTransformFile:
    def test_roundtrip(self, tmp_path, rng):
        t = RigidTransform(random_rotation(rng), rng.uniform(-1, 1, 3))
        p = tmp_path / "T.txt"
        io.write_transform(p, t)
        t2 = io.read_transform(p)
        np.testing.assert_array_equal(t2.rotation, t.rotation)
        np.testing.assert_array_equal(t2.translation, t.translation)

    def test_wrong_count(self, tmp_path):
        p = tmp_path / "T.txt"
        p.write_text("1 0 0\n")
        with pytest.raises(InvariantViolation):
            io.read_transform(p)


class TestRunConfig:
    def test_defaults_roundtrip(self, tmp_path):
        cfg = io.RunConfig()
        assert cfg.grid_edge == 0.3
        assert cfg.voxels_per_axis == 16
        assert cfg.descriptor_dim == 32
        p = tmp_path / "run.cfg"
        io.save_config(p, cfg)
        assert io.load_config(p) == cfg

    def test_eth_profile_roundtrip(self, tmp_path):
        cfg = io.RunConfig.eth_profile()
        assert cfg.grid_edge == 1.0
        assert cfg.downsample_cell == 0.02
        assert math.isclose(cfg.lrf_radius, math.sqrt(3.0))
        p = tmp_path / "eth.cfg"
        io.save_config(p, cfg)
        assert io.load_config(p) == cfg

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("grid_edge = 0.3\nwibble = 1\n")
        with pytest.raises(UnknownKey):
            io.load_config(p)

    def test_c_too_small(self):
        with pytest.raises(InvariantViolation):
            io.RunConfig(voxels_per_axis=1)

    def test_tau2_zero(self):
        with pytest.raises(InvariantViolation):
            io.RunConfig(tau2=0.0)

    def test_lrf_radius_invariant(self):
        with pytest.raises(InvariantViolation):
            io.RunConfig(lrf_radius=0.1)  # below sqrt(3)/2 * 0.3

    def test_comments_and_spacing(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("# comment\ngrid_edge = 0.5  # inline\n\nvoxels_per_axis=16\n"
                     "lrf_radius = 0.9\n")
        cfg = io.load_config(p)
        assert cfg.grid_edge == 0.5

    def test_duplicate_key(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("grid_edge = 0.3\ngrid_edge = 0.4\n")
        with pytest.raises(UnknownKey):
            io.load_config(p)

    @given(st.binary(min_size=0, max_size=300))
    @settings(max_examples=50, deadline=None)
    def test_fuzz(self, tmp_path_factory, data):
        p = tmp_path_factory.mktemp("fuzz") / "f.cfg"
        p.write_bytes(data)
        try:
            io.load_config(p)
        except SdvMatchError:
            pass
