import numpy as np
import pytest
from scipy.optimize import least_squares

from ctlo import liealg as la
from ctlo import solver as solver_mod
from ctlo.errors import DivergenceDetected, FactorOutsideWindow, IndefiniteHessian
from ctlo.factors import Extrinsic, PointToPlaneFactors
from ctlo.frontend import LocalMap
from ctlo.gp import TrajectoryKnot, WnoaPriorParams, extrapolate, prior_error_jacobians
from ctlo.liealg import Pose, Twist
from ctlo.sim import GtTrajectory, SensorModel, make_box_scene, simulate_frame
from ctlo.solver import (
    AlignConfig,
    MarginalPrior,
    SlidingWindow,
    SolverConfig,
    align_frame,
    assemble,
    block_tridiagonal_solve,
    build_normal_equations,
    linearize_window,
    marginalize_oldest,
    optimize,
    solve_damped,
)

from synth import TIGHT, UNROBUST, batch_vs_sliding, jitter, random_chain, random_problem, state_distance

rng = np.random.default_rng(21)
PINNED = np.diag([1e6] * 6 + [1e2] * 6)


def cv_chain(n, w, dt=0.1):
    k = [TrajectoryKnot.from_arrays(0.0, np.eye(4), w)]
    for i in range(1, n):
        k.append(extrapolate(k[-1], i * dt))
    return k


# -- normal equations ----------------------------------------------------------

def test_prior_mean_has_zero_gradient():
    knots = cv_chain(4, [-3, 0.2, 0, 0, 0, 0.1])
    lin = build_normal_equations(SlidingWindow(knots, MarginalPrior.centered(knots[0], PINNED), []))
    assert np.abs(lin.b).max() < 1e-10


def test_single_p2p_factor_is_rank_one():
    knots = cv_chain(2, [-1, 0, 0, 0, 0, 0])
    ext = Extrinsic.identity()
    f = PointToPlaneFactors(ext, [[5.0, 1.0, 0.3]], [0.04], [[-4.9, 1.0, 0.5]], [[0.0, 0.6, 0.8]], [0.9], **UNROBUST)
    empty = build_normal_equations(SlidingWindow(list(knots), None, [[]]))
    full = build_normal_equations(SlidingWindow(list(knots), None, [[f]]))
    lin = linearize_window(SlidingWindow(list(knots), None, [[f]]))
    blk = lin.blocks[0][0]
    j = blk.jacobian[0] * blk.scale[0]
    _, w = blk.kernel(blk.inliers())
    assert np.allclose(full.H - empty.H, w[0] * np.outer(j, j), atol=1e-10)
    assert np.linalg.matrix_rank(full.H - empty.H, tol=1e-8) == 1


def dense_normal_equations(window):
    """Naive assembler: stack every weighted residual row into one dense Jacobian."""
    n = window.dim
    rows, res, wts = [], [], []
    if window.marginal is not None:
        H, b, _ = window.marginal.linearize(window.knots[0])
        L = np.linalg.cholesky(H + 1e-300 * np.eye(12))
        J = np.zeros((12, n))
        J[:, :12] = L.T
        rows.append(J)
        res.append(-np.linalg.solve(L, b))
        wts.append(np.ones(12))
    for i in range(len(window.knots) - 1):
        e, Ja, Jb = prior_error_jacobians(window.knots[i], window.knots[i + 1])
        W = window.prior.information(window.knots[i + 1].time - window.knots[i].time)
        L = np.linalg.cholesky(W)
        J = np.zeros((12, n))
        J[:, 12 * i:12 * i + 24] = L.T @ np.hstack([Ja, Jb])
        rows.append(J)
        res.append(L.T @ e)
        wts.append(np.ones(12))
    lin = linearize_window(window)
    for i, seg in enumerate(lin.blocks):
        for blk in seg:
            _, w = blk.kernel(blk.inliers())
            J = np.zeros((len(blk.residual), n))
            J[:, 12 * i:12 * i + 24] = blk.jacobian * blk.scale[:, None]
            rows.append(J)
            res.append(blk.residual * blk.scale)
            wts.append(w)
    J, r, w = np.vstack(rows), np.concatenate(res), np.concatenate(wts)
    return J.T @ (w[:, None] * J), -J.T @ (w * r)


def test_assembly_matches_dense_oracle():
    for _ in range(5):
        truth, factors = random_problem(rng, 4, noise=1e-2)
        init = [jitter(rng, k, 0.05) for k in truth]
        H0 = np.diag(rng.uniform(1, 10, 12))
        win = SlidingWindow(init, MarginalPrior(truth[0], H0, rng.normal(size=12)), [list(f) for f in factors],
                            WnoaPriorParams((2.0, 1.0, 1.0, 0.1, 0.05, 0.1)))
        lin = build_normal_equations(win)
        H, b = dense_normal_equations(win)
        assert np.allclose(lin.H, H, rtol=1e-10, atol=1e-10 * np.abs(H).max())
        assert np.allclose(lin.b, b, rtol=1e-10, atol=1e-10 * np.abs(b).max())


def test_factor_outside_segment_raises():
    knots = cv_chain(2, [-1, 0, 0, 0, 0, 0])
    f = PointToPlaneFactors(Extrinsic.identity(), [[1.0, 0, 0]], [0.2], [[1.0, 0, 0]], [[1.0, 0, 0]], [1.0])
    with pytest.raises(FactorOutsideWindow):
        build_normal_equations(SlidingWindow(knots, None, [[f]]))


# -- linear solve --------------------------------------------------------------

def random_block_tridiagonal(n_blocks, block=12):
    J = np.zeros((0, n_blocks * block))
    for i in range(n_blocks - 1):
        rows = np.zeros((30, n_blocks * block))
        rows[:, block * i:block * (i + 2)] = rng.normal(size=(30, 2 * block))
        J = np.vstack([J, rows])
    return J.T @ J + np.eye(n_blocks * block)


def test_block_cholesky_matches_dense_solve():
    for n in (1, 2, 5):
        H = random_block_tridiagonal(n)
        b = rng.normal(size=H.shape[0])
        assert np.allclose(block_tridiagonal_solve(H, b), np.linalg.solve(H, b), atol=1e-10)


def test_indefinite_hessian_and_levenberg_fallback():
    H = random_block_tridiagonal(2)
    H[3, 3] = -1.0
    b = rng.normal(size=H.shape[0])
    with pytest.raises(IndefiniteHessian):
        block_tridiagonal_solve(H, b)
    x, lam = solve_damped(H, b)
    assert lam >= 1e-4
    D = np.diag(np.where(np.diag(H) > 0, np.diag(H), 1.0))
    assert np.allclose((H + lam * D) @ x, b)
    with pytest.raises(IndefiniteHessian):
        solve_damped(-np.eye(12), np.ones(12), max_tries=2)


def test_zero_gradient_means_no_step():
    knots = cv_chain(3, [-2, 0, 0, 0, 0, 0.05])
    win = SlidingWindow(list(knots), MarginalPrior.centered(knots[0], PINNED), [])
    out, hist = optimize(win, SolverConfig())
    assert hist.iterations == 1 and hist.converged
    assert max(state_distance(a, b) for a, b in zip(out.knots, knots)) < 1e-12


def test_linear_problem_converges_in_one_step():
    # pose on the anchor, quadratic pull on the twist only: residuals linear in the update
    k = TrajectoryKnot.from_arrays(0.0, la.exp_matrix(rng.normal(size=6)), rng.normal(size=6))
    H = np.diag(rng.uniform(1, 5, 12))
    b = np.r_[np.zeros(6), rng.normal(size=6)]
    win = SlidingWindow([k], MarginalPrior(k, H, b), [])
    out, hist = optimize(win, SolverConfig(convergence_tol=1e-10))
    assert np.allclose(out.knots[0].w - k.w, b[6:] / np.diag(H)[6:], atol=1e-12)
    assert hist.step_norms[1:] == [] or max(hist.step_norms[1:]) < 1e-10


def test_matches_dense_nonlinear_least_squares():
    for trial in range(3):
        truth, factors = random_problem(rng, 3, noise=1e-2, deviation=1.0)
        init = [jitter(rng, k, 0.02) for k in truth]
        H0 = np.diag([1e4] * 6 + [1.0] * 6)
        anchor = jitter(rng, truth[0], 1e-3)
        win = SlidingWindow(list(init), MarginalPrior.centered(anchor, H0), [list(f) for f in factors])
        ours, _ = optimize(win, TIGHT)

        def residuals(d):
            w = win.retract(d)
            dpose, _ = w.marginal.offset(w.knots[0])
            out = [np.sqrt(np.diag(H0)) * dpose]
            for i in range(2):
                e, _, _ = prior_error_jacobians(w.knots[i], w.knots[i + 1])
                L = np.linalg.cholesky(w.prior.information(0.1))
                out.append(L.T @ e)
            for blk in linearize_window(w, with_jacobians=False).blocks:
                out += [b.residual * b.scale for b in blk]
            return np.concatenate(out)

        ref = least_squares(residuals, np.zeros(win.dim), xtol=1e-15, ftol=1e-15, gtol=1e-15)
        ref_win = win.retract(ref.x)
        for a, b in zip(ours.knots, ref_win.knots):
            assert state_distance(a, b) < 1e-6


# -- marginalization -----------------------------------------------------------

def test_marginal_prior_on_prior_only_chain_matches_batch_covariance():
    knots = cv_chain(5, [-4, 0.3, 0.1, 0.01, -0.02, 0.1])
    params = WnoaPriorParams((3.0, 1.0, 0.5, 0.1, 0.2, 0.3))
    marginal = MarginalPrior.centered(knots[0], np.diag(rng.uniform(10, 100, 12)))
    full = SlidingWindow(list(knots), marginal, [], params)
    cov = np.linalg.inv(build_normal_equations(full).H)
    win = full
    for _ in range(3):
        win, _ = marginalize_oldest(win)
    H_tail = build_normal_equations(win).H
    assert np.allclose(np.linalg.inv(H_tail), cov[36:, 36:], rtol=1e-8, atol=1e-12)
    out, _ = optimize(win, TIGHT)
    for a, b in zip(out.knots, knots[3:]):
        assert state_distance(a, b) < 1e-8


def test_marginalizing_uninformative_knot_changes_nothing():
    truth, factors = random_problem(rng, 3)
    init = [jitter(rng, k, 1e-3) for k in truth]
    weak = MarginalPrior.centered(init[0], 1e-12 * np.eye(12))
    win = SlidingWindow(list(init), weak, [[]] + [list(factors[1])])
    before, _ = optimize(win, TIGHT)
    after, _ = optimize(marginalize_oldest(before)[0], TIGHT)
    for a, b in zip(after.knots, before.knots[1:]):
        assert state_distance(a, b) < 1e-8


def test_six_knot_chain_slid_three_times_matches_batch():
    assert batch_vs_sliding(np.random.default_rng(4), 6, 2) < 1e-6


def test_marginalize_needs_two_knots():
    with pytest.raises(ValueError):
        marginalize_oldest(SlidingWindow(cv_chain(1, np.zeros(6))))


# -- frame alignment -----------------------------------------------------------

def test_divergence_is_detected(monkeypatch):
    norms = iter(np.arange(1.0, 100.0))

    def growing(window, lin, config, timers=None):
        return (window, 0.0, None), float(next(norms))

    monkeypatch.setattr(solver_mod, "_damped_step", growing)
    knots = cv_chain(2, [-1, 0, 0, 0, 0, 0])
    with pytest.raises(DivergenceDetected):
        optimize(SlidingWindow(knots, None, []), SolverConfig(max_iterations=20))


def test_align_frame_keeps_extrapolated_state_on_divergence(monkeypatch):
    def boom(*args, **kwargs):
        raise DivergenceDetected("test")

    monkeypatch.setattr(solver_mod, "optimize", boom)
    knots = cv_chain(2, [-1, 0, 0, 0, 0, 0])
    from ctlo.frontend import LidarFrame

    frame = LidarFrame(1, 0.0, 0.1, [[5.0, 0, 0]], [0.05], [1.0])
    m = LocalMap()
    m.insert(rng.normal(size=(50, 3)))
    out = align_frame(SlidingWindow(list(knots), None, []), frame, m, AlignConfig())
    assert out.diverged and out.window.knots[-1] is knots[-1]
    assert len(m) == 50


def _static_box_frames():
    traj = GtTrajectory.speed_profile(np.zeros(3))
    scene = make_box_scene(length=60, n_boxes=40, seed=3)
    sensor = SensorModel(doppler_noise=0.0, range_noise=0.0, T_lv=np.eye(4))
    return traj, [simulate_frame(traj, scene, sensor, i) for i in range(2)]


def test_aligned_frame_converges_immediately():
    traj, (f0, f1) = _static_box_frames()
    m = LocalMap()
    m.insert(f1.points)
    k0 = TrajectoryKnot.from_arrays(f0.end_time, np.eye(4), np.zeros(6))
    k1 = TrajectoryKnot.from_arrays(f1.end_time, np.eye(4), np.zeros(6))
    win = SlidingWindow([k0, k1], MarginalPrior.centered(k0, PINNED), [])
    out = align_frame(win, f1, m, AlignConfig(extrinsic=Extrinsic.identity()))
    assert out.history.converged and out.history.iterations <= 2
    assert all(s < 1e-4 for s in out.history.step_norms[-1:])
    assert state_distance(out.window.knots[-1], k1) < 1e-6


def test_constant_velocity_pass_recovers_twist():
    from ctlo.pipeline import PipelineConfig, run

    traj = GtTrajectory.speed_profile(np.full(25, 8.0))
    scene = make_box_scene(length=120, n_boxes=80, seed=5)
    sensor = SensorModel()
    frames = [simulate_frame(traj, scene, sensor, i, seed=5) for i in range(24)]
    cfg = PipelineConfig(extrinsic=sensor.T_lv.tolist())
    res = run(cfg, frames)
    err = np.array([r.twist.vector() - traj.twist(r.time) for r in res.records[5:]])
    assert np.abs(err[:, 0]).max() < 0.05  # forward speed, every knot
    assert np.abs(err.mean(axis=0)).max() < 0.05
