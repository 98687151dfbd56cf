"""io_formats: cloud files, detection records, config, report rendering."""

import json

import numpy as np
import pytest

from crosscal import geometry, io_formats
from crosscal.camera import CameraDetection
from crosscal.errors import (
    MissingField,
    ParseError,
    SchemaVersionMismatch,
    UnsupportedFormat,
)
from crosscal.geometry import Intrinsics, RigidTransform
from crosscal.lidar import LidarDetection
from crosscal.optimizer import SensorId


# --- clouds -----------------------------------------------------------------

def test_ply_round_trip_1000_points(tmp_path):
    rng = np.random.default_rng(0)
    cloud = rng.uniform(-10, 10, size=(1000, 3))
    path = tmp_path / "c.ply"
    io_formats.write_cloud(path, cloud)
    back = io_formats.read_cloud(path)
    assert back.shape == (1000, 3)
    assert np.abs(back - cloud).max() < 1e-9


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    cloud = rng.uniform(-10, 10, size=(500, 3))
    path = tmp_path / "c.csv"
    io_formats.write_cloud(path, cloud)
    assert np.abs(io_formats.read_cloud(path) - cloud).max() < 1e-9


def test_csv_missing_header_parse_error_line_1(tmp_path):
    path = tmp_path / "c.csv"
    path.write_text("1,2,3\n4,5,6\n")
    with pytest.raises(ParseError) as ei:
        io_formats.read_cloud(path)
    assert ei.value.line == 1


def test_ply_extra_properties_ignored(tmp_path):
    path = tmp_path / "c.ply"
    path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 2\n"
        "property float nx\nproperty float x\nproperty float y\n"
        "property float z\nproperty float intensity\nend_header\n"
        "9 1 2 3 0.5\n9 4 5 6 0.5\n"
    )
    cloud = io_formats.read_cloud(path)
    assert np.array_equal(cloud, [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])


def test_binary_ply_unsupported(tmp_path):
    path = tmp_path / "c.ply"
    path.write_text(
        "ply\nformat binary_little_endian 1.0\nelement vertex 1\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n"
    )
    with pytest.raises(UnsupportedFormat):
        io_formats.read_cloud(path)


def test_unknown_extension(tmp_path):
    with pytest.raises(UnsupportedFormat):
        io_formats.write_cloud(tmp_path / "c.xyz", np.zeros((1, 3)))
    with pytest.raises(UnsupportedFormat):
        io_formats.read_cloud(tmp_path / "c.xyz")


def test_ply_malformed_row_has_line_number(tmp_path):
    path = tmp_path / "c.ply"
    path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 2\n"
        "property double x\nproperty double y\nproperty double z\nend_header\n"
        "1 2 3\n4 oops 6\n"
    )
    with pytest.raises(ParseError) as ei:
        io_formats.read_cloud(path)
    assert ei.value.line == 9


def test_ply_truncated_body(tmp_path):
    path = tmp_path / "c.ply"
    path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 3\n"
        "property double x\nproperty double y\nproperty double z\nend_header\n"
        "1 2 3\n"
    )
    with pytest.raises(ParseError):
        io_formats.read_cloud(path)


# --- poses / detections -----------------------------------------------------

def _sample_records():
    pose_l = RigidTransform(geometry.rot_z(0.3), np.array([1.0, 2.0, 3.0]))
    pose_c = RigidTransform(geometry.rot_x(-0.2), np.array([0.1, 0.2, 0.3]))
    centers = np.arange(12, dtype=float).reshape(4, 3)
    c2 = np.arange(8, dtype=float).reshape(4, 2)
    return [
        io_formats.DetectionRecord(0, SensorId("lidar", 0), LidarDetection(pose_l, centers, 1e-5)),
        io_formats.DetectionRecord(
            0, SensorId("camera", 1), CameraDetection(pose_c, centers, c2, 0.2, 49)
        ),
    ]


def test_pose_json_round_trip():
    rng = np.random.default_rng(2)
    for _ in range(50):
        from conftest import random_rigid

        t = random_rigid(rng)
        back = io_formats.pose_from_json(io_formats.pose_to_json(t))
        assert np.abs(back.matrix() - t.matrix()).max() < 1e-9


def test_detections_round_trip_byte_equal(tmp_path):
    recs = _sample_records()
    p1, p2 = tmp_path / "d1.json", tmp_path / "d2.json"
    io_formats.write_detections(p1, recs)
    back = io_formats.read_detections(p1)
    io_formats.write_detections(p2, back)
    assert p1.read_bytes() == p2.read_bytes()


def test_detections_mixed_variants_parse(tmp_path):
    path = tmp_path / "d.json"
    io_formats.write_detections(path, _sample_records())
    back = io_formats.read_detections(path)
    assert isinstance(back[0].detection, LidarDetection)
    assert isinstance(back[1].detection, CameraDetection)
    assert back[0].sensor == SensorId("lidar", 0)
    assert back[1].detection.corners_used == 49
    assert np.allclose(back[0].detection.centers, np.arange(12).reshape(4, 3))


def test_detections_three_centers_missing_field(tmp_path):
    path = tmp_path / "d.json"
    io_formats.write_detections(path, _sample_records())
    doc = json.loads(path.read_text())
    doc["records"][0]["centers_3d"] = doc["records"][0]["centers_3d"][:3]
    path.write_text(json.dumps(doc))
    with pytest.raises(MissingField):
        io_formats.read_detections(path)


def test_detections_strict_mode_rejects_unknown_fields(tmp_path):
    path = tmp_path / "d.json"
    io_formats.write_detections(path, _sample_records())
    doc = json.loads(path.read_text())
    doc["records"][0]["extra"] = 1
    path.write_text(json.dumps(doc))
    io_formats.read_detections(path)  # lax mode tolerates it
    with pytest.raises(ParseError):
        io_formats.read_detections(path, strict=True)


def test_detections_version_mismatch(tmp_path):
    path = tmp_path / "d.json"
    io_formats.write_detections(path, _sample_records())
    doc = json.loads(path.read_text())
    doc["version"] = "v2"
    path.write_text(json.dumps(doc))
    with pytest.raises(SchemaVersionMismatch):
        io_formats.read_detections(path)


def test_detections_missing_required_key(tmp_path):
    path = tmp_path / "d.json"
    io_formats.write_detections(path, _sample_records())
    doc = json.loads(path.read_text())
    del doc["records"][0]["pose"]
    path.write_text(json.dumps(doc))
    with pytest.raises(MissingField):
        io_formats.read_detections(path)


# --- config -----------------------------------------------------------------

def test_config_round_trip(tmp_path):
    cfg = io_formats.default_config()
    path = tmp_path / "config.json"
    io_formats.write_config(path, cfg)
    back = io_formats.read_config(path)
    assert back == cfg
    # and byte-stable
    path2 = tmp_path / "config2.json"
    io_formats.write_config(path2, back)
    assert path.read_bytes() == path2.read_bytes()


def test_config_duplicate_sensor_ids():
    s = io_formats.SensorConfig(SensorId("lidar", 0))
    with pytest.raises(ParseError):
        io_formats.ConfigFile(
            (s, s),
            io_formats.TargetSpec(),
            io_formats.LidarParams(),
            io_formats.SolveParams(),
            SensorId("lidar", 0),
            dict(io_formats.DEFAULT_SIM),
        )


def test_config_intrinsics_iff_camera():
    cam_no_intr = io_formats.SensorConfig(SensorId("camera", 0))
    with pytest.raises(ParseError):
        io_formats.ConfigFile(
            (cam_no_intr,),
            io_formats.TargetSpec(),
            io_formats.LidarParams(),
            io_formats.SolveParams(),
            SensorId("camera", 0),
            dict(io_formats.DEFAULT_SIM),
        )
    lidar_with_intr = io_formats.SensorConfig(
        SensorId("lidar", 0), Intrinsics(700.0, 700.0, 639.5, 359.5, 1280, 720)
    )
    with pytest.raises(ParseError):
        io_formats.ConfigFile(
            (lidar_with_intr,),
            io_formats.TargetSpec(),
            io_formats.LidarParams(),
            io_formats.SolveParams(),
            SensorId("lidar", 0),
            dict(io_formats.DEFAULT_SIM),
        )


def test_config_unknown_field_rejected(tmp_path):
    cfg = io_formats.default_config()
    doc = io_formats.config_to_json(cfg)
    doc["lidar_params"]["bogus"] = 1
    with pytest.raises(ParseError):
        io_formats.config_from_json(doc)


# --- report formatting ------------------------------------------------------

def test_format_pose_row_table_style():
    t = RigidTransform(
        geometry.rotation_from_euler_xyz(110.80, -1.609, -87.738),
        np.array([-0.6165, 0.2887, 0.1292]),
    )
    row = io_formats.format_pose_row(t)
    assert row == "(-0.6165, 0.2887, 0.1292) / (110.800, -1.609, -87.738)"


def test_format_pose_row_identity():
    row = io_formats.format_pose_row(RigidTransform.identity())
    assert row == "(0.0000, 0.0000, 0.0000) / (0.000, 0.000, 0.000)"


def test_report_round_trip(tmp_path):
    from conftest import oracle_observations
    from crosscal import optimizer, sim

    scene = sim.make_scene(n_lidars=1, m_cameras=1, sequences=4, seed=3)
    problem = optimizer.build_problem(
        oracle_observations(scene), SensorId("camera", 0), scene.intrinsics
    )
    result = optimizer.solve(problem)
    path = tmp_path / "report.json"
    doc = io_formats.write_report(result, path, {"chain": "S1->S2->S1", "mode": "solved"})
    assert path.exists() and path.with_suffix(".txt").exists()
    back = io_formats.read_report(path)
    assert back == json.loads(path.read_text())
    assert back["reference"] == "camera0"
    assert back["euler_convention"] == "intrinsic XYZ, degrees"
    assert set(back["poses"]) == {"camera0", "lidar0"}
    # re-read poses equal within printed precision
    for name, p in back["poses"].items():
        t = io_formats.pose_from_json(p)
        orig = result.poses[SensorId(name[:-1], int(name[-1]))]
        assert np.abs(t.translation - orig.translation).max() < 1e-9
    # reprojection rows carry "Si-Sj" pair labels and 4 rounded errors
    row = back["reprojection_errors"][0]
    assert row["pair"] == "S1-S2"
    assert len(row["errors_m"]) == 4
    assert doc["solver"]["converged"]
