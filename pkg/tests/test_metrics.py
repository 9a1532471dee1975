import numpy as np
import pytest

from ctlo import liealg as la
from ctlo.errors import SequenceTooShort
from ctlo.metrics import end_to_end_error, evaluate, frame_to_frame_rte, kitti_rte, pair_by_time, path_length

rng = np.random.default_rng(17)


def straight(n, step=1.0, scale=1.0):
    """Poses along x, ``step`` metres apart, positions stretched by ``scale``."""
    T = np.tile(np.eye(4), (n, 1, 1))
    T[:, 0, 3] = scale * step * np.arange(n)
    return 0.1 * np.arange(n), T


def wiggly(n):
    xi = np.zeros((n, 6))
    xi[:, 0] = 1.0
    xi[:, 5] = 0.02 * np.sin(np.arange(n) / 15)
    xi[:, 3:5] = rng.normal(size=(n, 2)) * 1e-3
    T = [np.eye(4)]
    for k in range(1, n):
        T.append(T[-1] @ la.exp_matrix(xi[k]))
    return 0.1 * np.arange(n), np.array(T)


def test_identical_trajectories_score_zero():
    gt = wiggly(400)
    rep = kitti_rte(gt, gt)
    assert rep.kitti_rte_percent == pytest.approx(0, abs=1e-10)
    assert rep.kitti_rre_deg_per_m == pytest.approx(0, abs=1e-6)
    assert frame_to_frame_rte(gt, gt)[0] == pytest.approx(0, abs=1e-12)


def test_one_metre_per_hundred_drift_is_one_percent():
    gt = straight(1001)
    est = straight(1001, scale=1.01)
    rep = kitti_rte(est, gt)
    assert rep.kitti_rte_percent == pytest.approx(1.0, abs=0.01)
    assert {s.length for s in rep.segments} == set(float(L) for L in range(100, 801, 100))
    assert rep.kitti_rte_percent == pytest.approx(np.mean([s.translation_pct for s in rep.segments]))


def test_short_sequence_raises():
    gt = straight(50)
    with pytest.raises(SequenceTooShort):
        kitti_rte(gt, gt)
    rep = evaluate(gt, gt)
    assert np.isnan(rep.kitti_rte_percent) and rep.f2f_rte_m == 0.0


def test_single_corrupted_step():
    t, T = straight(101)
    E = T.copy()
    E[60:, 1, 3] += 0.1  # one relative step is off by 0.1 m sideways
    mean_t, mean_r, per_pair = frame_to_frame_rte((t, E), (t, T))
    assert mean_t == pytest.approx(0.1 / 100)
    assert np.count_nonzero(per_pair) == 1


def test_rotation_only_corruption_leaves_translation_metric():
    t, T = wiggly(101)
    steps = la.inverse_matrix(T[:-1]) @ T[1:]
    steps[59] = steps[59] @ la.exp_matrix([0, 0, 0, 0, 0, np.radians(1.0)])
    E = [T[0]]
    for S in steps:
        E.append(E[-1] @ S)
    E = np.array(E)
    mean_t, mean_r, _ = frame_to_frame_rte((t, E), (t, T))
    assert mean_t == pytest.approx(0.0, abs=1e-12)
    assert mean_r == pytest.approx(1.0 / 100, rel=1e-3)  # arccos round-off on the untouched pairs


def test_metrics_invariant_to_global_transform():
    gt = wiggly(1200)
    t, T = gt
    noisy = np.array([M @ la.exp_matrix(rng.normal(size=6) * 1e-3) for M in T])
    G = la.exp_matrix(rng.normal(size=6))
    a = evaluate((t, noisy), gt)
    b = evaluate((t, G @ noisy), gt)
    assert b.kitti_rte_percent == pytest.approx(a.kitti_rte_percent, rel=1e-9)
    assert b.f2f_rte_m == pytest.approx(a.f2f_rte_m, rel=1e-9)


def test_pairing_by_time_and_exclusion():
    t, T = straight(300)
    est = (t[5:] + 0.01, T[5:])
    Te, Tg, tg = pair_by_time(est, (t, T))
    assert len(tg) == 295 and tg[0] == pytest.approx(0.5)
    rep = evaluate((t, T), (t, T), exclude_first=60)
    assert rep.n_pairs == 239 and rep.excluded_frames == 60


def test_end_to_end_error_and_path_length():
    gt = straight(201)
    assert path_length(gt[1])[-1] == pytest.approx(200.0)
    assert end_to_end_error(straight(201, scale=0.9), gt) == pytest.approx(0.1)


def test_report_text_and_plot_data():
    gt = wiggly(1100)
    rep = evaluate(gt, gt)
    assert "KITTI RTE" in rep.text() and "kitti_rte_percent = " in rep.text()
    lines = rep.plot_data().splitlines()
    assert lines[0].startswith("# length_m") and lines[1].split()[0] == "100"
