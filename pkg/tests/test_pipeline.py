import logging

import numpy as np
import pytest

from ctlo import liealg as la
from ctlo import pipeline as pl
from ctlo import solver
from ctlo.frontend import LidarFrame, grid_subsample
from ctlo.gp import TrajectoryKnot
from ctlo.pipeline import Odometry, PipelineConfig, run
from ctlo.sim import groundtruth_at, simulate_frame, straight_run


def box_frames(n=8, speed=8.0, seed=3):
    traj, scene, sensor, _ = straight_run("box", speed, n_frames=n, seed=seed)
    frames = [simulate_frame(traj, scene, sensor, i, seed=seed, quantize=True) for i in range(n)]
    return traj, frames, PipelineConfig(extrinsic=sensor.T_lv.tolist(), seed=seed)


@pytest.fixture(scope="module")
def box():
    return box_frames()


def test_one_record_per_frame_and_identity_start(box):
    _, frames, cfg = box
    res = run(cfg, frames)
    assert [r.index for r in res.records] == list(range(len(frames)))
    assert np.all(np.diff(res.times) > 0)
    assert np.allclose(res.times, [f.end_time for f in frames])
    assert np.array_equal(res.records[0].pose.matrix(), np.eye(4))
    assert not res.diverged and not res.skipped


def test_first_frame_seeds_the_map(box):
    _, frames, cfg = box
    odo = Odometry(cfg)
    odo.process(frames[0])
    sub = frames[0].subset(grid_subsample(frames[0].points, cfg.frontend.map_insert_grid))
    T_vl = la.inverse_matrix(np.asarray(cfg.extrinsic))
    expected = pl.LocalMap(cfg.frontend.map_voxel, cfg.frontend.map_max_points, cfg.frontend.map_radius)
    expected.insert_frame(sub.points @ T_vl[:3, :3].T + T_vl[:3, 3], np.zeros(3))
    assert np.array_equal(odo.map.points, expected.points)


def test_short_run_tracks_ground_truth(box):
    traj, frames, cfg = box
    t, T_iv = run(cfg, frames).trajectory()
    err = np.linalg.norm(T_iv[:, :3, 3] - groundtruth_at(traj, t)[:, :3, 3], axis=1)
    assert err.max() < 0.05


def test_empty_second_frame_is_extrapolated(box, caplog):
    _, frames, cfg = box
    f1 = frames[1]
    empty = LidarFrame(f1.index, f1.start_time, f1.end_time, np.zeros((0, 3)), np.zeros(0), np.zeros(0))
    with caplog.at_level(logging.WARNING, logger="ctlo.pipeline"):
        res = run(cfg, [frames[0], empty] + frames[2:])
    assert "nothing to align" in caplog.text
    assert res.skipped == [1]
    assert len(res) == len(frames) and np.all(np.diff(res.times) > 0)


def test_icp_only_ignores_doppler_bit_exactly(box, monkeypatch):
    _, frames, cfg = box

    def forbidden(*a, **k):
        raise AssertionError("Doppler factors built in icp_only mode")

    icp = PipelineConfig.from_dict({**cfg.to_dict(), "mode": "icp_only"})
    monkeypatch.setattr(solver, "DopplerFactors", forbidden)
    a = run(icp, frames)
    b = run(PipelineConfig.from_dict({**cfg.to_dict(), "mode": "icp_only"}), [f.without_doppler() for f in frames])
    assert np.array_equal(a.poses_iv(), b.poses_iv())
    assert np.array_equal(a.times, b.times)


def test_range_limit_applies_before_keypoints(box, monkeypatch):
    _, frames, cfg = box
    seen = []
    real = pl.extract_keypoints

    def spy(frame, *args, **kwargs):
        seen.append(np.linalg.norm(frame.points, axis=1).max())
        return real(frame, *args, **kwargs)

    monkeypatch.setattr(pl, "extract_keypoints", spy)
    cfg = PipelineConfig.from_dict({**cfg.to_dict(), "range_limit": 40.0})
    assert max(np.linalg.norm(f.points, axis=1).max() for f in frames) > 40.0
    run(cfg, frames)
    assert len(seen) == len(frames) - 1 and max(seen) <= 40.0
    assert all(np.linalg.norm(Odometry(cfg).preprocess(f).points, axis=1).max() <= 40.0 for f in frames)


def test_doppler_sign_flip(box):
    _, frames, cfg = box
    odo = Odometry(PipelineConfig(doppler_sign=-1))
    assert np.array_equal(odo.preprocess(frames[3]).doppler, -frames[3].doppler)


def test_frame_ending_before_last_knot_is_skipped(box, caplog):
    _, frames, cfg = box
    odo = Odometry(cfg)
    odo.process(frames[0])
    odo.process(frames[1])
    with caplog.at_level(logging.WARNING, logger="ctlo.pipeline"):
        odo.process(frames[1])
    res = odo.finish()
    assert res.skipped == [1] and len(res) == 2


def test_config_yaml_round_trip(tmp_path):
    cfg = PipelineConfig(mode="icp_only", range_limit=40.0, seed=7)
    cfg.solver.window_size = 3
    cfg.prior.qc_diag = [1.0, 2.0, 3.0, 0.4, 0.5, 0.6]
    cfg.dump(tmp_path / "c.yaml")
    back = PipelineConfig.load(tmp_path / "c.yaml")
    assert back == cfg
    assert PipelineConfig.from_dict(None) == PipelineConfig()


@pytest.mark.parametrize("data", [
    {"colour": "red"},
    {"solver": {"window": 2}},
    {"mode": "lidar"},
    {"range_limit": 0.0},
    {"doppler_sign": 2},
    {"extrinsic": [[1, 0], [0, 1]]},
])
def test_config_rejects_bad_input(data):
    with pytest.raises(ValueError):
        PipelineConfig.from_dict(data)


def _mover_region(points):
    # the box starts 15 m ahead and leaves at +25 m/s; tunnel walls sit at |y| = 5
    x, y, z = points.T
    return (x > 13.0) & (x < 20.0) & (np.abs(y) < 4.0) & (z > 0.3) & (z < 3.2)


@pytest.mark.parametrize("reject", [True, False])
def test_moving_returns_stay_out_of_the_map(reject):
    traj, scene, sensor, _ = straight_run("tunnel", 10.0, n_frames=4, seed=4, moving_objects=1)
    frames = [simulate_frame(traj, scene, sensor, i, seed=4) for i in range(4)]
    cfg = PipelineConfig(extrinsic=sensor.T_lv.tolist(), seed=4)
    cfg.factors.reject_dynamic = reject
    odo = Odometry(cfg)
    for f in frames:
        odo.process(f)
    on_box = int(_mover_region(odo.map.points).sum())
    assert (on_box == 0) if reject else (on_box > 0)


def test_static_mask_flags_doppler_outliers():
    traj, scene, sensor, _ = straight_run("tunnel", 10.0, n_frames=30, seed=5)
    f = simulate_frame(traj, scene, sensor, 25, seed=5)
    cfg = PipelineConfig(extrinsic=sensor.T_lv.tolist()).align_config()
    knots = [TrajectoryKnot.from_arrays(t, traj.pose(t), traj.twist(t)) for t in (f.start_time, f.end_time)]
    window = solver.SlidingWindow(knots)
    bumped = f.doppler.copy()
    bumped[::7] += 15.0
    moved = LidarFrame(f.index, f.start_time, f.end_time, f.points, f.timestamps, bumped)
    mask = solver.static_mask(window, moved, cfg)
    assert not mask[::7].any()
    assert mask.mean() > 0.8
    cfg.use_doppler = False
    assert solver.static_mask(window, moved, cfg).all()


def test_majority_rule_keeps_everything_when_the_estimate_is_off():
    mask = np.array([True, False, False, False])
    assert solver.majority_static(mask).all()
    mask = np.array([True, True, True, False])
    assert np.array_equal(solver.majority_static(mask), mask)
