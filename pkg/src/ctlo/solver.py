"""Sliding-window Gauss-Newton with explicit marginalization.

The window holds consecutive knots ``x_{k-w} .. x_k``. Measurement blocks are
attached to the segment between two knots (the frame whose points fall in
that interval), the motion prior links every neighbouring pair, and a
marginal prior carries the information of everything that left the window.
All factors only couple neighbouring knots, so the normal equations are
block tridiagonal with 12x12 blocks.
"""

from __future__ import annotations

import logging
from contextlib import nullcontext
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_triangular

from . import liealg as la
from .errors import DivergenceDetected, FactorOutsideWindow, IndefiniteHessian
from .factors import DopplerFactors, Extrinsic, FactorWeights, PointToPlaneFactors, _tls_cauchy
from .frontend import LidarFrame, LocalMap, associate
from .gp import SegmentLinearization, TrajectoryKnot, WnoaPriorParams, interpolate_batch, prior_error_jacobians

log = logging.getLogger(__name__)

STATE = 12


@dataclass
class SolverConfig:
    window_size: int = 2
    max_iterations: int = 20
    convergence_tol: float = 1e-4
    reassociate_every: int = 5
    max_correspondences: int = 3000
    publish_newest: bool = False
    lm_lambda0: float = 1e-4
    lm_max_tries: int = 8
    divergence_patience: int = 5
    # a step this small right after re-association means the correspondences have settled
    settle_tol: float = 1e-3

    def __post_init__(self):
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")
        if self.reassociate_every < 1:
            raise ValueError("reassociate_every must be >= 1")


@dataclass
class MarginalPrior:
    """Quadratic prior ``0.5 d'Hd - b'd`` on the oldest knot, ``d = anchor^-1 (+) x``."""

    anchor: TrajectoryKnot
    information: np.ndarray
    vector: np.ndarray

    def __post_init__(self):
        H = np.asarray(self.information, dtype=float)
        self.information = 0.5 * (H + H.T)
        self.vector = np.asarray(self.vector, dtype=float).reshape(STATE)

    @classmethod
    def centered(cls, knot: TrajectoryKnot, information) -> "MarginalPrior":
        return cls(knot, information, np.zeros(STATE))

    def offset(self, knot: TrajectoryKnot):
        dpose = la.log_matrix(knot.T @ la.inverse_matrix(self.anchor.T))
        d = np.concatenate([dpose, knot.w - self.anchor.w])
        J = np.eye(STATE)
        J[:6, :6] = la.left_jacobian_inv(dpose)
        return d, J

    def linearize(self, knot: TrajectoryKnot):
        d, J = self.offset(knot)
        H, b = self.information, self.vector
        cost = 0.5 * d @ H @ d - b @ d
        return J.T @ H @ J, J.T @ (b - H @ d), cost

    def cost(self, knot: TrajectoryKnot) -> float:
        d, _ = self.offset(knot)
        return float(0.5 * d @ self.information @ d - self.vector @ d)

    def mean(self) -> TrajectoryKnot:
        """Minimizer of the quadratic (least-squares solution when singular)."""
        d = np.linalg.lstsq(self.information, self.vector, rcond=None)[0]
        return self.anchor.perturbed(d)


@dataclass
class SlidingWindow:
    knots: list
    marginal: Optional[MarginalPrior] = None
    factors: list = field(default_factory=list)  # per segment: list of factor blocks
    prior: WnoaPriorParams = field(default_factory=WnoaPriorParams)

    def __post_init__(self):
        while len(self.factors) < len(self.knots) - 1:
            self.factors.append([])

    @property
    def dim(self) -> int:
        return STATE * len(self.knots)

    def copy(self) -> "SlidingWindow":
        return SlidingWindow(list(self.knots), self.marginal, [list(f) for f in self.factors], self.prior)

    def append(self, knot: TrajectoryKnot, blocks=()) -> None:
        if self.knots and knot.time <= self.knots[-1].time:
            raise ValueError("knot times must increase")
        self.knots.append(knot)
        if len(self.knots) > 1:
            self.factors.append(list(blocks))

    def retract(self, delta) -> "SlidingWindow":
        delta = np.asarray(delta, dtype=float)
        out = self.copy()
        out.knots = [k.perturbed(delta[STATE * i:STATE * (i + 1)]) for i, k in enumerate(self.knots)]
        return out


# -- linearization ----------------------------------------------------------------

@dataclass
class BlockLinearization:
    """Raw residuals/Jacobians of one factor block at one window state."""

    residual: np.ndarray
    jacobian: Optional[np.ndarray]  # (P,24) or None when only costs are needed
    scale: np.ndarray
    truncation: float
    cauchy_k: float

    def inliers(self) -> np.ndarray:
        return np.abs(self.residual) <= self.truncation

    def kernel(self, inlier):
        cost, w = _tls_cauchy(self.scale * self.residual, self.cauchy_k, np.inf)
        return np.where(inlier, cost, 0.0), np.where(inlier, w, 0.0)


@dataclass
class WindowLinearization:
    """Everything needed to assemble normal equations or evaluate the cost."""

    n_knots: int
    marginal: Optional[tuple]  # (H, b, cost) already in the knot's coordinates
    priors: list  # per segment (H, b, cost)
    blocks: list  # per segment list of BlockLinearization
    keys: list  # per segment tuple of the blocks themselves, for reuse


def _interp_for_blocks(seg: SegmentLinearization, blocks, with_jacobians=True):
    times = np.concatenate([b.times for b in blocks])
    if times.size and (times.min() < seg.t_prev or times.max() > seg.t_next):
        raise FactorOutsideWindow("factor timestamp outside its knot segment")
    need_pose = with_jacobians and any(b.needs_pose for b in blocks)
    need_twist = with_jacobians and any(b.needs_twist for b in blocks)
    batch = interpolate_batch(seg, times, need_pose, need_twist)
    out, start = [], 0
    for b in blocks:
        n = len(b)
        sl = slice(start, start + n)
        out.append(type(batch)(
            batch.poses[sl], batch.twists[sl],
            None if batch.pose_jac is None else batch.pose_jac[sl],
            None if batch.twist_jac is None else batch.twist_jac[sl],
        ))
        start += n
    return out


def linearize_block(block, batch, with_jacobians=True) -> BlockLinearization:
    J = block.jacobians(batch) if with_jacobians else None
    return BlockLinearization(block.residuals(batch), J, block.scale, block.truncation, block.cauchy_k)


def _segment_prior(window, i):
    ka, kb = window.knots[i], window.knots[i + 1]
    e, Ja, Jb = prior_error_jacobians(ka, kb)
    W = window.prior.information(kb.time - ka.time)
    J = np.hstack([Ja, Jb])
    return J.T @ W @ J, -J.T @ W @ e, 0.5 * e @ W @ e


def linearize_window(window: SlidingWindow, timers=None, with_jacobians=True,
                     reuse: Optional[WindowLinearization] = None) -> WindowLinearization:
    """Evaluate every factor at the current state.

    Segments whose blocks are unchanged since ``reuse`` (computed at this
    same state) are taken from it.
    """
    marginal = window.marginal.linearize(window.knots[0]) if window.marginal is not None else None
    priors, blocks, keys = [], [], []
    for i in range(len(window.knots) - 1):
        priors.append(_segment_prior(window, i) if reuse is None else reuse.priors[i])
        seg_blocks = [blk for blk in window.factors[i] if len(blk)]
        key = tuple(seg_blocks)
        keys.append(key)
        if reuse is not None and len(reuse.keys[i]) == len(key) and all(a is b for a, b in zip(reuse.keys[i], key)):
            blocks.append(reuse.blocks[i])
            continue
        lins = []
        if seg_blocks:
            with _stage(timers, "factors"):
                seg = SegmentLinearization.from_knots(window.knots[i], window.knots[i + 1])
                batches = _interp_for_blocks(seg, seg_blocks, with_jacobians)
                lins = [linearize_block(blk, bt, with_jacobians) for blk, bt in zip(seg_blocks, batches)]
        blocks.append(lins)
    return WindowLinearization(len(window.knots), marginal, priors, blocks, keys)


@dataclass
class Linearization:
    H: np.ndarray
    b: np.ndarray
    cost: float
    masks: list  # per segment, per block inlier masks
    factor_cost: float = 0.0
    n_inliers: int = 0


def assemble(lin: WindowLinearization, masks=None) -> Linearization:
    """H = sum J'WJ and b = -sum J'We with IRLS weights; inliers fresh unless ``masks`` given."""
    n = STATE * lin.n_knots
    H = np.zeros((n, n))
    b = np.zeros(n)
    cost = fcost = 0.0
    n_in = 0
    out_masks = []
    if lin.marginal is not None:
        Hm, bm, cm = lin.marginal
        H[:STATE, :STATE] += Hm
        b[:STATE] += bm
        cost += cm
    for i, (prior, seg_blocks) in enumerate(zip(lin.priors, lin.blocks)):
        sl = slice(STATE * i, STATE * (i + 2))
        Hp, bp, cp = prior
        H[sl, sl] += Hp
        b[sl] += bp
        cost += cp
        seg_masks = []
        for j, blk in enumerate(seg_blocks):
            inlier = blk.inliers() if masks is None else masks[i][j]
            c, w = blk.kernel(inlier)
            Jw = blk.jacobian * blk.scale[:, None]
            ew = blk.residual * blk.scale
            H[sl, sl] += (Jw * w[:, None]).T @ Jw
            b[sl] -= Jw.T @ (w * ew)
            cost += float(c.sum())
            fcost += float(c.sum())
            n_in += int(inlier.sum())
            seg_masks.append(inlier)
        out_masks.append(seg_masks)
    H = 0.5 * (H + H.T)
    return Linearization(H, b, cost, out_masks, fcost, n_in)


def frozen_cost(lin: WindowLinearization, masks) -> float:
    cost = 0.0 if lin.marginal is None else lin.marginal[2]
    for i, (prior, seg_blocks) in enumerate(zip(lin.priors, lin.blocks)):
        cost += prior[2]
        for j, blk in enumerate(seg_blocks):
            cost += float(blk.kernel(masks[i][j])[0].sum())
    return float(cost)


def build_normal_equations(window: SlidingWindow, timers=None, masks=None) -> Linearization:
    """Assemble H = sum J'WJ and b = -sum J'We over every factor in the window."""
    return assemble(linearize_window(window, timers), masks)


def evaluate_cost(window: SlidingWindow, masks) -> float:
    """Total cost with inlier sets frozen (the fixed-association subproblem)."""
    return frozen_cost(linearize_window(window, with_jacobians=False), masks)


# -- linear solve -------------------------------------------------------------------

def block_tridiagonal_solve(H, b, block: int = STATE):
    """Solve H x = b for SPD block-tridiagonal H via block Cholesky.

    Raises IndefiniteHessian when a pivot block is not positive definite.
    """
    n = H.shape[0] // block
    L_diag, L_off = [], []
    y = []
    for i in range(n):
        s = slice(block * i, block * (i + 1))
        Dk = H[s, s].copy()
        rhs = b[s].copy()
        if i > 0:
            p = slice(block * (i - 1), block * i)
            # C = B L_{i-1}^{-T}
            C = solve_triangular(L_diag[-1], H[s, p].T, lower=True).T
            Dk -= C @ C.T
            rhs -= C @ y[-1]
            L_off.append(C)
        try:
            L = np.linalg.cholesky(0.5 * (Dk + Dk.T))
        except np.linalg.LinAlgError as exc:
            raise IndefiniteHessian(str(exc)) from exc
        L_diag.append(L)
        y.append(solve_triangular(L, rhs, lower=True))
    x = [None] * n
    for i in range(n - 1, -1, -1):
        rhs = y[i]
        if i < n - 1:
            rhs = rhs - L_off[i].T @ x[i + 1]
        x[i] = solve_triangular(L_diag[i], rhs, lower=True, trans="T")
    return np.concatenate(x)


def _damping(H) -> np.ndarray:
    """diag(H) as a matrix, with non-positive entries replaced by one."""
    d = np.diag(H).copy()
    d[d <= 0] = 1.0
    return np.diag(d)


def solve_damped(H, b, lam0=1e-4, max_tries=8):
    """Block Cholesky solve; on failure add lam*diag(H) growing x10 per try."""
    try:
        return block_tridiagonal_solve(H, b), 0.0
    except IndefiniteHessian:
        pass
    diag = _damping(H)
    lam = lam0
    for _ in range(max_tries):
        try:
            return block_tridiagonal_solve(H + lam * diag, b), lam
        except IndefiniteHessian:
            lam *= 10.0
    raise IndefiniteHessian("Levenberg fallback exhausted")


def gauss_newton_step(window: SlidingWindow, H, b, config: SolverConfig = SolverConfig()):
    """Solve the normal equations and retract; returns (new_window, step_norm)."""
    delta, _ = solve_damped(H, b, config.lm_lambda0, config.lm_max_tries)
    return window.retract(delta), float(np.linalg.norm(delta))


@dataclass
class IterationLog:
    costs: list = field(default_factory=list)
    step_norms: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def optimize(window: SlidingWindow, config: SolverConfig = SolverConfig(), reassociate: Optional[Callable] = None,
             timers=None, history: Optional[IterationLog] = None):
    """Gauss-Newton iterations with cost-checked steps.

    ``reassociate(window)`` (when given) returns fresh measurement blocks for
    the newest segment. It runs every ``reassociate_every`` iterations, and
    convergence is only declared on an iteration whose associations were
    computed at the current state. Returns (window, IterationLog).
    """
    history = history or IterationLog()
    force = reassociate is not None
    rising = 0
    last_norm = None
    raw = None
    for it in range(config.max_iterations):
        fresh = reassociate is None
        if reassociate is not None and (force or it % config.reassociate_every == 0):
            with _stage(timers, "association"):
                window.factors[-1] = list(reassociate(window))
            fresh, force = True, False
        raw = linearize_window(window, timers, reuse=raw)
        lin = assemble(raw)
        accepted, step_norm = _damped_step(window, lin, config, timers)
        history.iterations = it + 1
        if accepted is not None:
            window, cost, raw = accepted
            history.costs.append(cost)
            history.step_norms.append(step_norm)
            if last_norm is not None and step_norm > last_norm:
                rising += 1
                if rising >= config.divergence_patience:
                    raise DivergenceDetected(f"step norm rose {rising} times in a row")
            else:
                rising = 0
            last_norm = step_norm
        limit = config.settle_tol if fresh and reassociate is not None else config.convergence_tol
        if accepted is None or step_norm < max(limit, config.convergence_tol):
            if fresh:
                history.converged = True
                break
            force = True
    return window, history


def _damped_step(window, lin: Linearization, config: SolverConfig, timers=None):
    """Try the GN step, then increasingly damped ones, until the frozen-inlier cost does not rise.

    Returns ((window, cost, linearization), step_norm) or (None, 0.0).
    """
    H, b = lin.H, lin.b
    if not np.any(b):
        return None, 0.0
    diag = _damping(H)
    lam = 0.0
    tol = 1e-12 * max(1.0, abs(lin.cost))
    for attempt in range(config.lm_max_tries + 1):
        try:
            with _stage(timers, "solve"):
                delta = block_tridiagonal_solve(H + lam * diag, b)
                cand = window.retract(delta)
        except IndefiniteHessian:
            lam = config.lm_lambda0 if lam == 0.0 else lam * 10.0
            continue
        raw = linearize_window(cand, timers)
        c = frozen_cost(raw, lin.masks)
        if c <= lin.cost + tol:
            return (cand, c, raw), float(np.linalg.norm(delta))
        lam = config.lm_lambda0 if lam == 0.0 else lam * 10.0
    return None, 0.0


# -- marginalization ------------------------------------------------------------------

def marginalize_oldest(window: SlidingWindow, reg: float = 1e-9):
    """Schur-complement the oldest knot into a marginal prior on its neighbour.

    Returns (new_window, departed_knot).
    """
    if len(window.knots) < 2:
        raise ValueError("need at least two knots to marginalize")
    sub = SlidingWindow(window.knots[:2], window.marginal, [window.factors[0]], window.prior)
    lin = build_normal_equations(sub)
    H, b = lin.H, lin.b
    Hoo, Hon, Hno, Hnn = H[:STATE, :STATE], H[:STATE, STATE:], H[STATE:, :STATE], H[STATE:, STATE:]
    try:
        c = cho_factor(Hoo)
    except LinAlgError:
        log.warning("singular block while marginalizing; regularizing with %g I", reg)
        c = cho_factor(Hoo + reg * np.eye(STATE))
    H_new = Hnn - Hno @ cho_solve(c, Hon)
    b_new = b[STATE:] - Hno @ cho_solve(c, b[:STATE])
    new = SlidingWindow(
        window.knots[1:],
        MarginalPrior(window.knots[1], H_new, b_new),
        [list(f) for f in window.factors[1:]],
        window.prior,
    )
    return new, window.knots[0]


def _stage(timers, name):
    return timers.stage(name) if timers is not None else nullcontext()


# -- frame alignment ------------------------------------------------------------------

@dataclass
class AlignConfig:
    """Everything align_frame needs besides the window, frame and map."""

    solver: SolverConfig = field(default_factory=SolverConfig)
    extrinsic: Extrinsic = field(default_factory=Extrinsic.identity)
    weights: FactorWeights = field(default_factory=FactorWeights)
    use_doppler: bool = True
    p2p_truncation: float = 0.5
    dv_truncation: float = 2.0
    cauchy_k: float = 1.0
    knn: int = 20
    max_assoc_dist: float = 2.0
    min_neighbors: int = 5
    # drop points whose Doppler contradicts the ego-motion from association and the map
    reject_dynamic: bool = True


@dataclass
class AlignResult:
    window: SlidingWindow
    departed: list
    history: IterationLog
    diverged: bool = False
    n_correspondences: int = 0


def world_points_at(window: SlidingWindow, q, times, ext: Extrinsic, seg: int = -1) -> np.ndarray:
    """Map sensor points into the world using the interpolated poses of one segment."""
    if len(times) == 0:
        return np.zeros((0, 3))
    k = len(window.knots) - 1 + seg if seg < 0 else seg
    lin = SegmentLinearization.from_knots(window.knots[k], window.knots[k + 1])
    batch = interpolate_batch(lin, times, False, False)
    T_vl = ext.T_vl
    y = np.asarray(q, dtype=float) @ T_vl[:3, :3].T + T_vl[:3, 3]
    Ct = np.swapaxes(batch.poses[:, :3, :3], 1, 2)
    return np.einsum("pij,pj->pi", Ct, y - batch.poses[:, :3, 3])


def _strided(n: int, cap: int) -> np.ndarray:
    if cap <= 0 or n <= cap:
        return np.arange(n)
    return np.unique(np.linspace(0, n - 1, cap).round().astype(np.int64))


def static_mask(window: SlidingWindow, frame: LidarFrame, config: AlignConfig, seg: int = -1) -> np.ndarray:
    """True for points consistent with a static world under the current twist estimate.

    A point is flagged as moving when its Doppler misses the ego-motion
    prediction by more than ``dv_truncation``. Points without Doppler, and
    every point when rejection is off, count as static.
    """
    n = len(frame)
    if not (config.use_doppler and config.reject_dynamic) or frame.doppler is None or n == 0:
        return np.ones(n, dtype=bool)
    k = len(window.knots) - 1 + seg if seg < 0 else seg
    lin = SegmentLinearization.from_knots(window.knots[k], window.knots[k + 1])
    batch = interpolate_batch(lin, frame.timestamps, False, False)
    e = DopplerFactors(config.extrinsic, frame.points, frame.timestamps, frame.doppler).residuals(batch)
    return majority_static(~(np.abs(e) > config.dv_truncation))


def majority_static(mask: np.ndarray) -> np.ndarray:
    """Keep a static/moving split only if most of the scene agrees with the ego-motion.

    When more than half the returns look like they are moving, the motion
    estimate is what is wrong (say, a log that starts at speed), so nothing
    is rejected.
    """
    return mask if mask.mean() >= 0.5 else np.ones_like(mask)


def frame_factor_blocks(window: SlidingWindow, frame: LidarFrame, local_map: LocalMap, config: AlignConfig):
    """Associate the frame against the map at the current newest-segment estimate."""
    blocks = []
    if len(local_map) and len(frame):
        static = np.flatnonzero(static_mask(window, frame, config))
        world = world_points_at(window, frame.points[static], frame.timestamps[static], config.extrinsic)
        assoc = associate(local_map, world, config.knn, config.max_assoc_dist, config.min_neighbors)
        keep = _strided(len(assoc), config.solver.max_correspondences)
        idx = static[assoc.index[keep]]
        if idx.size:
            blocks.append(PointToPlaneFactors(
                config.extrinsic, frame.points[idx], frame.timestamps[idx], assoc.map_points[keep],
                assoc.normals[keep], assoc.alpha[keep], config.weights, config.p2p_truncation, config.cauchy_k,
            ))
    if config.use_doppler and frame.doppler is not None:
        ok = np.flatnonzero(np.isfinite(frame.doppler) & (np.linalg.norm(frame.points, axis=1) > 0))
        if ok.size:
            blocks.append(DopplerFactors(
                config.extrinsic, frame.points[ok], frame.timestamps[ok], frame.doppler[ok],
                config.weights, config.dv_truncation, config.cauchy_k,
            ))
    return blocks


def align_frame(window: SlidingWindow, frame: LidarFrame, local_map: LocalMap, config: AlignConfig = AlignConfig(),
                map_frame: Optional[LidarFrame] = None, timers=None) -> AlignResult:
    """Register the newest frame, grow the map and slide the window.

    ``window.knots[-1]`` must already be the (extrapolated) knot at the frame
    end and ``frame`` must hold the keypoints that fall inside the newest
    segment. ``map_frame`` (default: the keypoints) is what gets inserted
    into the map at the converged, motion-corrected poses.
    """
    if len(window.knots) < 2:
        raise ValueError("append the frame-end knot before aligning")
    start = window.copy()
    history = IterationLog()
    diverged = False

    def reassociate(w):
        return frame_factor_blocks(w, frame, local_map, config)

    try:
        window, history = optimize(window, config.solver, reassociate, timers, history)
    except (DivergenceDetected, IndefiniteHessian) as exc:
        log.warning("frame %d: %s; keeping the extrapolated state", frame.index, exc)
        window = start
        window.factors[-1] = []
        diverged = True

    n_corr = sum(len(b) for b in window.factors[-1] if b.kind == "p2p")
    if not diverged:
        src = map_frame if map_frame is not None else frame
        with _stage(timers, "map"):
            src = src.subset(np.flatnonzero(static_mask(window, src, config)))
            world = world_points_at(window, src.points, src.timestamps, config.extrinsic)
            center = la.inverse_matrix(window.knots[-1].T)[:3, 3]
            local_map.insert_frame(world, center)

    departed = []
    with _stage(timers, "marginalization"):
        while len(window.knots) > config.solver.window_size + 1:
            window, gone = marginalize_oldest(window)
            departed.append(gone)
    return AlignResult(window, departed, history, diverged, n_corr)
