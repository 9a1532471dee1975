import numpy as np
import pytest

from ctlo.dataset import DatasetReader, read_manifest, read_poses
from ctlo.errors import NoTrajectoryCoverage
from ctlo.sim import (
    GtTrajectory,
    Scene,
    ScenePlane,
    SensorModel,
    export_dataset,
    frames_for_distance,
    groundtruth_at,
    make_tunnel_scene,
    moving_box,
    ramp_distance,
    simulate_frame,
    smooth_ramp,
    straight_run,
)

IDENTITY_MOUNT = dict(T_lv=np.eye(4))


def parked(n=2):
    return GtTrajectory.speed_profile(np.zeros(n))


def test_stationary_sensor_sees_zero_doppler():
    sensor = SensorModel()
    dv = np.concatenate([simulate_frame(parked(3), make_tunnel_scene(), sensor, i, seed=4).doppler for i in (0, 1)])
    assert dv.size >= 10_000
    assert abs(dv.mean()) < 0.01
    assert np.std(dv) == pytest.approx(sensor.doppler_noise, rel=0.05)


def test_wall_ahead_doppler_is_cosine_of_ray_angle():
    wall = ScenePlane([20.0, 0, 0], [-1, 0, 0], [0, 1, 0], 200.0, 200.0)
    sensor = SensorModel(azimuth_steps=181, beams=33, **IDENTITY_MOUNT).noiseless()
    traj = GtTrajectory.speed_profile([10.0, 10.0])
    f = simulate_frame(traj, Scene([wall]), sensor, 0)
    d = f.points / np.linalg.norm(f.points, axis=1)[:, None]
    assert np.allclose(f.doppler, -10.0 * d[:, 0], atol=1e-9)
    ahead = np.argmin(np.linalg.norm(d - [1, 0, 0], axis=1))
    assert np.linalg.norm(d[ahead] - [1, 0, 0]) < 1e-12
    assert f.doppler[ahead] == pytest.approx(-10.0, abs=1e-9)


def test_co_moving_plane_has_no_doppler():
    sensor = SensorModel(**IDENTITY_MOUNT).noiseless()
    traj = GtTrajectory.speed_profile([12.0] * 3)
    f = simulate_frame(traj, Scene(moving_box(20.0, [12.0, 0, 0], size=(2, 30, 30))), sensor, 1)
    assert len(f) > 100
    assert np.abs(f.doppler).max() < 1e-9


def tunnel_hits(caps):
    scene = make_tunnel_scene(length=300.0, start=-150.0, end_caps=caps)
    sensor = SensorModel(**IDENTITY_MOUNT).noiseless()
    q = simulate_frame(parked(), scene, sensor, 0).points  # sensor at the world origin
    normals = np.zeros_like(q)
    for p in scene.planes:
        normals[np.abs((q - p.center) @ p.normal) < 1e-6] = p.normal
    assert np.all(np.linalg.norm(normals, axis=1) > 0)
    return q, normals


def test_tunnel_normals_are_orthogonal_to_the_axis():
    _, n = tunnel_hits(caps=False)
    assert np.abs(n[:, 0]).max() == 0.0


def translation_information(q, n):
    """Point-to-plane information on translation with rotation eliminated."""
    J = np.c_[n, np.cross(q, n)]
    H = J.T @ J
    return H[:3, :3] - H[:3, 3:] @ np.linalg.solve(H[3:, 3:], H[3:, :3])


@pytest.mark.parametrize("caps", [False, True])
def test_tunnel_conditioning(caps):
    S = translation_information(*tunnel_hits(caps))
    w, V = np.linalg.eigh(S)
    ratio = w[0] / w[-1]
    if caps:
        assert ratio > 1e-3
    else:
        assert ratio < 1e-3
        assert abs(V[0, 0]) == pytest.approx(1.0, abs=1e-9)


def test_export_matches_quantized_simulation(tmp_path):
    traj, scene, sensor, _ = straight_run("box", 5.0, n_frames=4, seed=8)
    export_dataset(traj, scene, sensor, 3, tmp_path, seed=8)
    frames = list(DatasetReader(tmp_path))
    assert len(frames) == 3
    for f in frames:
        g = simulate_frame(traj, scene, sensor, f.index, seed=8, quantize=True)
        assert np.array_equal(f.points, g.points)
        assert np.array_equal(f.doppler, g.doppler)
        assert np.allclose(f.timestamps, g.timestamps, atol=1e-9, rtol=0)
    t, T_iv = read_poses(tmp_path / "groundtruth.txt")
    assert np.allclose(t, [f.end_time for f in frames])
    assert np.allclose(T_iv, groundtruth_at(traj, t), atol=1e-9)
    assert np.allclose(np.linalg.inv(T_iv), traj.pose(t), atol=1e-9)


def test_export_of_zero_frames(tmp_path):
    traj, scene, sensor, _ = straight_run("tunnel", 5.0, n_frames=2)
    export_dataset(traj, scene, sensor, 0, tmp_path)
    assert read_manifest(tmp_path / "manifest.txt") == []
    assert list((tmp_path / "frames").iterdir()) == []


def test_speed_profile_path_length():
    traj = GtTrajectory.speed_profile([10.0] * 100)
    assert traj.path_length() == pytest.approx(100.0, abs=0.1)
    assert np.allclose(traj.pose(traj.end)[:3, 3], [-100.0, 0, 0])  # T_vi: the world recedes


def test_ramp_distance_matches_integrated_trajectory():
    for duration in (1.5, 3.1, 12.0):
        traj = GtTrajectory.from_functions(smooth_ramp(10.0), duration, step=0.001)
        assert traj.path_length() == pytest.approx(ramp_distance(10.0, duration), rel=1e-5)
    n = frames_for_distance(10.0, 300.0)
    assert ramp_distance(10.0, n * 0.1) >= 300.0 > ramp_distance(10.0, (n - 1) * 0.1)


def test_column_timestamps_increase():
    traj, scene, sensor, _ = straight_run("box", 10.0, n_frames=3, seed=1)
    f = simulate_frame(traj, scene, sensor, 2, seed=1)
    cols = np.unique(f.timestamps)
    assert np.all(np.diff(cols) > 0)
    assert f.start_time < cols[0] and cols[-1] < f.end_time
    assert np.all(np.diff(f.timestamps) >= 0)


def test_same_seed_same_frame_other_seed_differs():
    traj, scene, sensor, _ = straight_run("box", 10.0, n_frames=3, seed=1)
    a = simulate_frame(traj, scene, sensor, 1, seed=1)
    b = simulate_frame(traj, scene, sensor, 1, seed=1)
    c = simulate_frame(traj, scene, sensor, 1, seed=2)
    assert np.array_equal(a.points, b.points) and np.array_equal(a.doppler, b.doppler)
    assert not np.array_equal(a.doppler, c.doppler)


def test_frame_outside_trajectory():
    traj, scene, sensor, n = straight_run("box", 10.0, n_frames=3)
    with pytest.raises(NoTrajectoryCoverage):
        simulate_frame(traj, scene, sensor, n)
    with pytest.raises(NoTrajectoryCoverage):
        traj.pose(traj.end + 1.0)


def test_sensor_validation():
    with pytest.raises(ValueError):
        SensorModel(beams=0)
    with pytest.raises(ValueError):
        SensorModel(doppler_noise=-1.0)
