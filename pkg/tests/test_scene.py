import numpy as np
import pytest

from calib_probe.errors import ConfigError, DataError
from calib_probe.geometry import RigidTransform, compose, identity, invert, transl
from calib_probe.scene import (
    Box,
    LidarSpec,
    World,
    camera_pose,
    default_intrinsics,
    default_rig,
    generate_world,
    lidar_scan,
    read_calib_file,
    read_velodyne_bin,
    render_intensity,
    sample_vehicle_pose,
    vehicle_pose,
)
from calib_probe.sensor import Intrinsics, project

FLAT = LidarSpec(n_beams=1, vertical_fov=(0.0, 0.0), azimuth_steps=8, max_range=80.0)
WALL = World((Box((11.0, 0.0, 1.0), (2.0, 2.0, 2.0), 0.7),))


def test_empty_world_horizontal_beam_sees_nothing():
    assert len(lidar_scan(World(), RigidTransform(np.eye(3), (0, 0, 1.0)), FLAT)) == 0


def test_single_beam_hits_box_face():
    cloud = lidar_scan(WALL, RigidTransform(np.eye(3), (0, 0, 1.0)), FLAT)
    assert len(cloud) == 1
    assert np.allclose(cloud.points[0], [10.0, 0.0, 0.0], atol=1e-9)
    assert cloud.intensity[0] == pytest.approx(0.7)


def test_moving_sensor_changes_range():
    cloud = lidar_scan(WALL, RigidTransform(np.eye(3), (3.0, 0, 1.0)), FLAT)
    assert cloud.points[0, 0] == pytest.approx(7.0, abs=1e-9)


def test_downward_beams_hit_ground():
    spec = LidarSpec(n_beams=1, vertical_fov=(-45.0, -45.0), azimuth_steps=16)
    cloud = lidar_scan(World(), RigidTransform(np.eye(3), (0, 0, 2.0)), spec)
    assert len(cloud) == 16
    assert np.allclose(cloud.points[:, 2], -2.0, atol=1e-9)
    assert np.allclose(cloud.intensity, 0.3)


def test_scan_bounded_and_deterministic():
    w = generate_world(40, 15.0, seed=3, forward_extent=40.0)
    spec = LidarSpec()
    a = lidar_scan(w, vehicle_pose(), spec)
    b = lidar_scan(w, vehicle_pose(), spec)
    assert len(a) <= spec.n_beams * spec.azimuth_steps
    assert np.array_equal(a.points, b.points)
    assert np.all(np.linalg.norm(a.points, axis=1) <= spec.max_range + 1e-9)


def test_world_generation():
    assert generate_world(0, 10.0, seed=1).boxes == ()
    a, b = generate_world(30, 15.0, seed=5), generate_world(30, 15.0, seed=5)
    assert a == b
    assert generate_world(30, 15.0, seed=6) != a
    for box in a.boxes:
        assert box.min_corner[2] >= 0
        assert abs(box.center[0]) - box.size[0] / 2 >= 4.0 - 1e-9


def test_world_validation():
    with pytest.raises(ValueError):
        World((Box((0, 0, -1.0), (1, 1, 1), 0.5),))
    with pytest.raises(ConfigError):
        generate_world(-1, 10.0, seed=0)
    with pytest.raises(ConfigError):
        LidarSpec(n_beams=0)


def test_sample_vehicle_pose_deterministic():
    a = sample_vehicle_pose(np.random.default_rng(2))
    b = sample_vehicle_pose(np.random.default_rng(2))
    assert a.allclose(b, 0.0)


def test_intensity_filled_frustum():
    k = Intrinsics(50, 50, 20, 15, 40, 30)
    pose = RigidTransform(np.eye(3), (0, 0, 0))
    big = World((Box((0.0, 0.0, 20.0), (100.0, 100.0, 2.0), 0.6),))
    img = render_intensity(big, pose, k)
    assert np.allclose(img, 0.6)


def test_intensity_sees_nothing_looking_at_sky():
    k = Intrinsics(50, 50, 20, 15, 40, 30)
    assert np.all(render_intensity(World(), RigidTransform(np.eye(3), (0, 0, 1.0)), k) == 0)


def test_intensity_consistent_with_lidar_hits():
    w = generate_world(60, 15.0, seed=11, forward_extent=50.0)
    rig = default_rig()
    cam = rig["left"]
    pose = vehicle_pose()
    cloud = lidar_scan(w, pose, LidarSpec())
    img = render_intensity(w, camera_pose(pose, cam.t_lidar_to_cam), cam.intrinsics)
    from calib_probe.sensor import project_indices

    cols, rows, _, idx = project_indices(cloud, cam.t_lidar_to_cam, cam.intrinsics)
    agree = np.isclose(img[rows, cols], cloud.intensity[idx])
    assert agree.mean() >= 0.95


def test_rig_relative_and_ids():
    rig = default_rig(0.54)
    rel = rig.relative("left", "right")
    assert rel.allclose(transl(-0.54, 0, 0), 1e-12)
    assert rig.relative("left", "left").allclose(identity(), 1e-12)
    with pytest.raises(ConfigError):
        rig["middle"]
    with pytest.raises(ConfigError):
        type(rig)((rig["left"], rig["left"]))
    assert type(rig).from_dict(rig.to_dict()).to_dict() == rig.to_dict()


def test_camera_pose_inverts_extrinsic():
    rig = default_rig()
    t = rig["left"].t_lidar_to_cam
    p = vehicle_pose(0.2, -1.0, 0.5)
    assert compose(invert(p), camera_pose(p, t)).allclose(invert(t), 1e-12)


def test_default_rig_projects_scene_into_raster():
    w = generate_world(80, 15.0, seed=1, forward_extent=60.0)
    cloud = lidar_scan(w, vehicle_pose(), LidarSpec())
    k = default_intrinsics()
    d = project(cloud, default_rig()["left"].t_lidar_to_cam, k)
    assert d.n_valid > 1000


def test_velodyne_bin_round_trip(tmp_path):
    rec = np.array([[1, 2, 3, 0.5], [4, 5, 6, 0.25]], dtype="<f4")
    rec.tofile(tmp_path / "a.bin")
    cloud = read_velodyne_bin(tmp_path / "a.bin")
    assert np.allclose(cloud.points, rec[:, :3]) and np.allclose(cloud.intensity, rec[:, 3])
    (tmp_path / "bad.bin").write_bytes(b"\0" * 10)
    with pytest.raises(DataError):
        read_velodyne_bin(tmp_path / "bad.bin")


def test_calib_file_parsing(tmp_path):
    vals = " ".join(str(float(i)) for i in range(12))
    (tmp_path / "c.txt").write_text(f"Tr: {vals}\nP: 1 2 3\n\n")
    out = read_calib_file(tmp_path / "c.txt")
    assert out["Tr"].shape == (3, 4) and out["Tr"][2, 3] == 11.0
    assert out["P"].shape == (3,)
    (tmp_path / "bad.txt").write_text("nonsense\n")
    with pytest.raises(DataError):
        read_calib_file(tmp_path / "bad.txt")
