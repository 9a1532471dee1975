"""White-noise-on-acceleration GP trajectory on SE(3).

The Markovian state is a knot ``(T_vi, varpi)``. Between two knots the
trajectory lives in the local coordinates

    gamma(t) = [xi(t); J^-1(xi(t)) varpi(t)],   xi(t) = log(T(t) T_prev^-1)

which evolve as a linear time-invariant system with transition
``Phi(dt) = [[I, dt I], [0, I]]`` and process covariance ``Q(dt)``.
Interpolation is the closed-form posterior mean between the two knots.

Jacobians are taken w.r.t. the 24-dim stacked perturbation
``[dpose_prev, dtwist_prev, dpose_next, dtwist_next]`` with poses perturbed on
the left and twists additively.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import liealg as la
from .errors import NonPositiveDt, TauBeforeKnot, TauOutOfRange
from .liealg import Pose, Twist


@dataclass(frozen=True, eq=False)
class TrajectoryKnot:
    time: float
    pose: Pose
    twist: Twist

    @classmethod
    def from_arrays(cls, time, T, w) -> "TrajectoryKnot":
        return cls(float(time), Pose.from_matrix(T), Twist.from_vector(w))

    @property
    def T(self) -> np.ndarray:
        return self.pose.matrix()

    @property
    def w(self) -> np.ndarray:
        return self.twist.vector()

    def perturbed(self, delta) -> "TrajectoryKnot":
        """Apply a 12-dim update: pose on the left through exp, twist additively."""
        delta = np.asarray(delta, dtype=float)
        T = la.exp_matrix(delta[:6]) @ self.T
        return TrajectoryKnot(self.time, Pose.from_matrix(T).normalized(), Twist.from_vector(self.w + delta[6:]))


DEFAULT_QC = (1.0, 1.0, 1.0, 0.1, 0.1, 0.1)


@dataclass(frozen=True)
class WnoaPriorParams:
    qc_diag: tuple = DEFAULT_QC

    def __post_init__(self):
        qc = tuple(float(x) for x in self.qc_diag)
        if len(qc) != 6 or min(qc) <= 0:
            raise ValueError("qc_diag must hold six positive entries")
        object.__setattr__(self, "qc_diag", qc)

    def covariance(self, dt: float) -> np.ndarray:
        if dt <= 0:
            raise NonPositiveDt(f"dt={dt}")
        Qc = np.diag(self.qc_diag)
        return np.block(
            [[dt**3 / 3.0 * Qc, dt**2 / 2.0 * Qc], [dt**2 / 2.0 * Qc, dt * Qc]]
        )

    def information(self, dt: float) -> np.ndarray:
        if dt <= 0:
            raise NonPositiveDt(f"dt={dt}")
        Qi = np.diag(1.0 / np.asarray(self.qc_diag))
        return np.block(
            [[12.0 / dt**3 * Qi, -6.0 / dt**2 * Qi], [-6.0 / dt**2 * Qi, 4.0 / dt * Qi]]
        )


def transition(dt: float) -> np.ndarray:
    return np.block([[np.eye(6), dt * np.eye(6)], [np.zeros((6, 6)), np.eye(6)]])


def prior_error(k_prev: TrajectoryKnot, k_next: TrajectoryKnot, params: WnoaPriorParams | None = None):
    """Motion-prior error between consecutive knots and its covariance Q(dt)."""
    params = params or WnoaPriorParams()
    dt = k_next.time - k_prev.time
    if dt <= 0:
        raise NonPositiveDt(f"knot times must increase, got dt={dt}")
    xi = la.log_matrix(k_next.T @ la.inverse_matrix(k_prev.T))
    e = np.concatenate([xi - dt * k_prev.w, la.left_jacobian_inv(xi) @ k_next.w - k_prev.w])
    return e, params.covariance(dt)


def prior_error_jacobians(k_prev: TrajectoryKnot, k_next: TrajectoryKnot):
    """Return (e, J_prev, J_next) with 12x12 Jacobians w.r.t. each knot."""
    dt = k_next.time - k_prev.time
    if dt <= 0:
        raise NonPositiveDt(f"knot times must increase, got dt={dt}")
    T_rel = k_next.T @ la.inverse_matrix(k_prev.T)
    xi = la.log_matrix(T_rel)
    Jinv = la.left_jacobian_inv(xi)
    w_prev, w_next = k_prev.w, k_next.w
    e = np.concatenate([xi - dt * w_prev, Jinv @ w_next - w_prev])

    dxi_prev = -Jinv @ la.adjoint_matrix(T_rel)
    M = la.jacobian_inv_vec_derivative(xi, w_next)
    I6 = np.eye(6)
    J_prev = np.block([[dxi_prev, -dt * I6], [M @ dxi_prev, -I6]])
    J_next = np.block([[Jinv, np.zeros((6, 6))], [M @ Jinv, Jinv]])
    return e, J_prev, J_next


def interpolation_weights(t_prev: float, t_next: float, taus):
    """Scalar 2x2 blocks (Lambda, Psi) for each query time, shape (P,2,2).

    The WNOA blocks are scalar multiples of the identity, so Q_c cancels.
    """
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    dt = t_next - t_prev
    if dt <= 0:
        raise NonPositiveDt(f"dt={dt}")
    t1 = taus - t_prev
    t2 = t_next - taus
    n = taus.shape[0]
    S1 = np.empty((n, 2, 2))
    S1[:, 0, 0] = t1**3 / 3.0
    S1[:, 0, 1] = S1[:, 1, 0] = t1**2 / 2.0
    S1[:, 1, 1] = t1
    P2t = np.zeros((n, 2, 2))
    P2t[:, 0, 0] = P2t[:, 1, 1] = 1.0
    P2t[:, 1, 0] = t2
    Sinv = np.array([[12.0 / dt**3, -6.0 / dt**2], [-6.0 / dt**2, 4.0 / dt]])
    Psi = S1 @ P2t @ Sinv
    P1 = np.zeros((n, 2, 2))
    P1[:, 0, 0] = P1[:, 1, 1] = 1.0
    P1[:, 0, 1] = t1
    Pdt = np.array([[1.0, dt], [0.0, 1.0]])
    Lam = P1 - Psi @ Pdt
    at_next = taus == t_next
    if np.any(at_next):
        Lam[at_next] = 0.0
        Psi[at_next] = np.eye(2)
    return Lam, Psi


@dataclass
class SegmentLinearization:
    """Quantities shared by every query inside one knot segment."""

    t_prev: float
    t_next: float
    T_prev: np.ndarray
    w_prev: np.ndarray
    T_next: np.ndarray
    w_next: np.ndarray
    gamma_next: np.ndarray = field(init=False)

    def __post_init__(self):
        self._T_rel = self.T_next @ la.inverse_matrix(self.T_prev)
        self._xi = la.log_matrix(self._T_rel)
        self._Jinv = la.left_jacobian_inv(self._xi)
        self.gamma_next = np.concatenate([self._xi, self._Jinv @ self.w_next])

    @cached_property
    def dgamma_next(self) -> np.ndarray:
        """d gamma_next / d[prev(12), next(12)], built only when Jacobians are asked for."""
        Jinv = self._Jinv
        M = la.jacobian_inv_vec_derivative(self._xi, self.w_next)
        dxi_prev = -Jinv @ la.adjoint_matrix(self._T_rel)
        dg = np.zeros((12, 24))
        dg[:6, 0:6] = dxi_prev
        dg[:6, 12:18] = Jinv
        dg[6:, 0:6] = M @ dxi_prev
        dg[6:, 12:18] = M @ Jinv
        dg[6:, 18:24] = Jinv
        return dg

    @cached_property
    def dgamma_prev(self) -> np.ndarray:
        # gamma_prev = [0; w_prev]
        dp = np.zeros((12, 24))
        dp[6:, 6:12] = np.eye(6)
        return dp

    @classmethod
    def from_knots(cls, k_prev: TrajectoryKnot, k_next: TrajectoryKnot) -> "SegmentLinearization":
        return cls(k_prev.time, k_next.time, k_prev.T, k_prev.w, k_next.T, k_next.w)


@dataclass
class InterpolationBatch:
    poses: np.ndarray  # (P,4,4) T_vi at each query
    twists: np.ndarray  # (P,6)
    pose_jac: np.ndarray | None  # (P,6,24)
    twist_jac: np.ndarray | None  # (P,6,24)


def interpolate_batch(seg: SegmentLinearization, taus, pose_jac: bool = True, twist_jac: bool = True) -> InterpolationBatch:
    """Interpolated poses/twists (and Jacobians) for many query times.

    Points sharing a timestamp (a scan column) are interpolated once.
    """
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    if np.any(taus < seg.t_prev) or np.any(taus > seg.t_next):
        raise TauOutOfRange(f"query outside [{seg.t_prev}, {seg.t_next}]")
    uniq, inv = np.unique(taus, return_inverse=True)
    if uniq.size < taus.size:
        b = _interpolate_unique(seg, uniq, pose_jac, twist_jac)
        return InterpolationBatch(
            b.poses[inv], b.twists[inv],
            None if b.pose_jac is None else b.pose_jac[inv],
            None if b.twist_jac is None else b.twist_jac[inv],
        )
    return _interpolate_unique(seg, taus, pose_jac, twist_jac)


def _interpolate_unique(seg: SegmentLinearization, taus, pose_jac: bool, twist_jac: bool) -> InterpolationBatch:
    Lam, Psi = interpolation_weights(seg.t_prev, seg.t_next, taus)
    gp = np.concatenate([np.zeros(6), seg.w_prev])
    g_prev = gp.reshape(2, 6)
    g_next = seg.gamma_next.reshape(2, 6)
    gamma = np.einsum("pij,jk->pik", Lam, g_prev) + np.einsum("pij,jk->pik", Psi, g_next)
    xi_t, psi_t = gamma[:, 0], gamma[:, 1]

    E = la.exp_matrix(xi_t)
    poses = E @ seg.T_prev
    J_t = la.left_jacobian(xi_t)
    twists = np.einsum("pij,pj->pi", J_t, psi_t)

    need_dgamma = pose_jac or twist_jac
    if need_dgamma:
        dprev = seg.dgamma_prev.reshape(2, 6, 24)
        dnext = seg.dgamma_next.reshape(2, 6, 24)
        dgamma = np.einsum("pij,jkl->pikl", Lam, dprev) + np.einsum("pij,jkl->pikl", Psi, dnext)
        dxi, dpsi = dgamma[:, 0], dgamma[:, 1]
    pj = tj = None
    if pose_jac:
        pj = J_t @ dxi
        pj[:, :, 0:6] += la.adjoint_matrix(E)
    if twist_jac:
        tj = la.jacobian_vec_derivative(xi_t, psi_t) @ dxi + J_t @ dpsi

    at_prev = taus == seg.t_prev
    at_next = taus == seg.t_next
    for mask, T, w, off in ((at_prev, seg.T_prev, seg.w_prev, 0), (at_next, seg.T_next, seg.w_next, 12)):
        if np.any(mask):
            poses[mask] = T
            twists[mask] = w
            if pj is not None:
                pj[mask] = 0.0
                pj[mask, :, off:off + 6] = np.eye(6)
            if tj is not None:
                tj[mask] = 0.0
                tj[mask, :, off + 6:off + 12] = np.eye(6)
    return InterpolationBatch(poses, twists, pj, tj)


@dataclass(frozen=True, eq=False)
class InterpolatedState:
    pose: Pose
    twist: Twist
    jacobians: np.ndarray  # (12,24): [pose; twist] w.r.t. [prev(12), next(12)]

    @property
    def jac_prev(self) -> np.ndarray:
        return self.jacobians[:, :12]

    @property
    def jac_next(self) -> np.ndarray:
        return self.jacobians[:, 12:]


def interpolate(k_prev: TrajectoryKnot, k_next: TrajectoryKnot, tau: float) -> InterpolatedState:
    if not (k_prev.time <= tau <= k_next.time):
        raise TauOutOfRange(f"tau={tau} outside [{k_prev.time}, {k_next.time}]")
    if tau == k_prev.time:
        jac = np.zeros((12, 24))
        jac[:, :12] = np.eye(12)
        return InterpolatedState(k_prev.pose, k_prev.twist, jac)
    if tau == k_next.time:
        jac = np.zeros((12, 24))
        jac[:, 12:] = np.eye(12)
        return InterpolatedState(k_next.pose, k_next.twist, jac)
    seg = SegmentLinearization.from_knots(k_prev, k_next)
    b = interpolate_batch(seg, [tau])
    jac = np.concatenate([b.pose_jac[0], b.twist_jac[0]], axis=0)
    return InterpolatedState(Pose.from_matrix(b.poses[0]), Twist.from_vector(b.twists[0]), jac)


def extrapolate(k: TrajectoryKnot, tau: float) -> TrajectoryKnot:
    """Constant-velocity (prior mean) prediction of the knot at a later time."""
    if tau < k.time:
        raise TauBeforeKnot(f"tau={tau} precedes knot time {k.time}")
    if tau == k.time:
        return k
    T = la.exp_matrix((tau - k.time) * k.w) @ k.T
    return TrajectoryKnot(float(tau), Pose.from_matrix(T), k.twist)
