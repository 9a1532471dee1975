"""Measurement factors: point-to-plane and Doppler radial velocity.

Conventions
-----------
``T_vi`` maps world points into the vehicle frame and ``T_lv`` maps vehicle
points into the lidar frame. The body twist ``varpi`` satisfies
``dT_vi/dt = varpi^ T_vi``, so a static world point seen from the lidar moves
as ``qdot = odot(q) Ad(T_lv) varpi``; driving forward gives a negative
``nu_x``. Doppler readings are range rates, negative when closing in.

Each factor family has a scalar API (used for checks and by hand) and a
batched block consumed by the solver. Batched blocks return raw residuals,
their Jacobians w.r.t. the 24-dim perturbation of the bracketing knots, and
a per-row whitening scale; robust weighting is applied by the solver.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import liealg as la
from .errors import MissingDoppler, ZeroRangePoint
from .frontend import Correspondence, LidarPoint
from .gp import InterpolationBatch, SegmentLinearization, TrajectoryKnot, interpolate_batch
from .liealg import Pose, Twist


@dataclass(frozen=True)
class RobustKernel:
    """Truncated least squares wrapped around Cauchy; both in whitened units."""

    cauchy_k: float = 1.0
    truncation: float = 10.0

    def __post_init__(self):
        if self.cauchy_k <= 0 or self.truncation <= 0:
            raise ValueError("kernel parameters must be positive")


def robust_weight(whitened_e, kernel: RobustKernel):
    """(cost, irls_weight) for whitened error(s); zero beyond the truncation."""
    e = np.asarray(whitened_e, dtype=float)
    return _tls_cauchy(e, kernel.cauchy_k, kernel.truncation)


def _tls_cauchy(e, k, trunc):
    r2 = (e / k) ** 2
    inside = np.abs(e) <= trunc
    cost = np.where(inside, 0.5 * k * k * np.log1p(r2), 0.0)
    weight = np.where(inside, 1.0 / (1.0 + r2), 0.0)
    if np.ndim(cost) == 0:
        return float(cost), float(weight)
    return cost, weight


@dataclass(frozen=True)
class FactorWeights:
    beta: float = 0.1
    p2p_sigma: float = 0.1
    dv_sigma: float = 0.03

    def __post_init__(self):
        if min(self.beta, self.p2p_sigma, self.dv_sigma) <= 0:
            raise ValueError("factor weights must be positive")


@dataclass(frozen=True, eq=False)
class Extrinsic:
    """Fixed vehicle-to-lidar transform and its adjoint."""

    T_lv: Pose

    @classmethod
    def identity(cls) -> "Extrinsic":
        return cls(Pose.identity())

    @classmethod
    def from_matrix(cls, T) -> "Extrinsic":
        return cls(Pose.from_matrix(T))

    @property
    def Ad_lv(self) -> np.ndarray:
        return la.adjoint(self.T_lv)

    @property
    def T_vl(self) -> np.ndarray:
        return self.T_lv.inverse().matrix()


# -- point to plane ----------------------------------------------------------

def p2p_error(corr: Correspondence, T_vi_at_t: Pose, ext: Extrinsic) -> float:
    """Signed distance n.(p - x) of the transformed query x from the map plane."""
    q = la.as_homogeneous(np.asarray(corr.query.position, dtype=float))
    x = T_vi_at_t.inverse().matrix() @ (ext.T_vl @ q)
    return float(np.asarray(corr.normal) @ (np.asarray(corr.map_point, dtype=float) - x[:3]))


def p2p_weighted(corr: Correspondence, T_vi_at_t: Pose, ext: Extrinsic,
                 weights: FactorWeights = FactorWeights(), kernel: RobustKernel | None = None) -> float:
    """Robust cost rho(alpha^2 e / sigma) of one point-to-plane factor."""
    kernel = kernel or p2p_kernel(weights)
    e = p2p_error(corr, T_vi_at_t, ext)
    cost, _ = robust_weight(corr.alpha**2 * e / weights.p2p_sigma, kernel)
    return cost


def p2p_kernel(weights: FactorWeights, raw_truncation: float = 0.5, cauchy_k: float = 1.0) -> RobustKernel:
    return RobustKernel(cauchy_k, raw_truncation / weights.p2p_sigma)


def p2p_jacobian(corr: Correspondence, k_prev: TrajectoryKnot, k_next: TrajectoryKnot, ext: Extrinsic):
    """(error, gradient w.r.t. [prev(12), next(12)]) through GP interpolation."""
    block = PointToPlaneFactors(
        ext,
        np.atleast_2d(corr.query.position),
        np.array([corr.query.timestamp]),
        np.atleast_2d(corr.map_point),
        np.atleast_2d(corr.normal),
        np.array([corr.alpha]),
    )
    batch = interpolate_batch(SegmentLinearization.from_knots(k_prev, k_next), block.times, True, False)
    return float(block.residuals(batch)[0]), block.jacobians(batch)[0]


# -- Doppler ------------------------------------------------------------------

def _doppler_rows(q, ext: Extrinsic) -> np.ndarray:
    """Row vectors h with predicted range rate = h . varpi, shape (P,6)."""
    q = np.atleast_2d(np.asarray(q, dtype=float))
    r = np.linalg.norm(q, axis=1)
    if np.any(r <= 0):
        raise ZeroRangePoint("point at the sensor origin has no radial direction")
    d = q / r[:, None]
    proj = np.einsum("pi,ij,pjk->pk", d, la.D, la.odot(q))
    return proj @ ext.Ad_lv


def dv_predict(q, twist_at_t: Twist, ext: Extrinsic) -> float:
    q = np.asarray(q, dtype=float)
    xyz = q[:3] / q[3] if q.shape[-1] == 4 else q
    return float(_doppler_rows(xyz, ext)[0] @ twist_at_t.vector())


def dv_error(point: LidarPoint, twist_at_t: Twist, ext: Extrinsic) -> float:
    """Measured minus predicted range rate (m/s, unwhitened)."""
    if point.doppler is None or not np.isfinite(point.doppler):
        raise MissingDoppler("point carries no Doppler measurement")
    return float(point.doppler) - dv_predict(point.position, twist_at_t, ext)


def dv_whitened(point: LidarPoint, twist_at_t: Twist, ext: Extrinsic, weights: FactorWeights = FactorWeights()) -> float:
    return np.sqrt(weights.beta) * dv_error(point, twist_at_t, ext) / weights.dv_sigma


def dv_jacobian(point: LidarPoint, k_prev: TrajectoryKnot, k_next: TrajectoryKnot, ext: Extrinsic) -> np.ndarray:
    """Gradient of the raw Doppler error w.r.t. [prev(12), next(12)]."""
    if point.doppler is None:
        raise MissingDoppler("point carries no Doppler measurement")
    block = DopplerFactors(ext, np.atleast_2d(point.position), np.array([point.timestamp]), np.array([point.doppler]))
    batch = interpolate_batch(SegmentLinearization.from_knots(k_prev, k_next), block.times, False, True)
    return block.jacobians(batch)[0]


# -- batched blocks -------------------------------------------------------------

class PointToPlaneFactors:
    """Point-to-plane residuals for a set of keypoints with fixed associations."""

    needs_pose = True
    needs_twist = False
    kind = "p2p"

    def __init__(self, ext: Extrinsic, q, times, map_points, normals, alpha,
                 weights: FactorWeights = FactorWeights(), truncation: float = 0.5, cauchy_k: float = 1.0):
        self.ext = ext
        self.q = np.asarray(q, dtype=float).reshape(-1, 3)
        self.times = np.asarray(times, dtype=float).reshape(-1)
        self.map_points = np.asarray(map_points, dtype=float).reshape(-1, 3)
        self.normals = np.asarray(normals, dtype=float).reshape(-1, 3)
        self.alpha = np.asarray(alpha, dtype=float).reshape(-1)
        self.scale = self.alpha**2 / weights.p2p_sigma
        self.truncation = float(truncation)
        self.cauchy_k = float(cauchy_k)
        # points in the vehicle frame
        T_vl = ext.T_vl
        self.y = self.q @ T_vl[:3, :3].T + T_vl[:3, 3]

    def __len__(self):
        return self.times.shape[0]

    def world_points(self, poses) -> np.ndarray:
        Ct = np.swapaxes(poses[:, :3, :3], 1, 2)
        return np.einsum("pij,pj->pi", Ct, self.y - poses[:, :3, 3])

    def residuals(self, batch: InterpolationBatch) -> np.ndarray:
        x = self.world_points(batch.poses)
        return np.einsum("pi,pi->p", self.normals, self.map_points - x)

    def jacobians(self, batch: InterpolationBatch) -> np.ndarray:
        # de/d(dpose) = [m, y x m] with m = C n, then chain through interpolation
        m = np.einsum("pij,pj->pi", batch.poses[:, :3, :3], self.normals)
        row = np.concatenate([m, np.cross(self.y, m)], axis=1)
        return np.einsum("pi,pij->pj", row, batch.pose_jac)


class DopplerFactors:
    """Doppler residuals; the prediction is linear in the interpolated twist."""

    needs_pose = False
    needs_twist = True
    kind = "dv"

    def __init__(self, ext: Extrinsic, q, times, doppler,
                 weights: FactorWeights = FactorWeights(), truncation: float = 2.0, cauchy_k: float = 1.0):
        self.ext = ext
        self.q = np.asarray(q, dtype=float).reshape(-1, 3)
        self.times = np.asarray(times, dtype=float).reshape(-1)
        self.doppler = np.asarray(doppler, dtype=float).reshape(-1)
        self.h = _doppler_rows(self.q, ext) if len(self.times) else np.zeros((0, 6))
        self.scale = np.full(self.times.shape, np.sqrt(weights.beta) / weights.dv_sigma)
        self.truncation = float(truncation)
        self.cauchy_k = float(cauchy_k)

    def __len__(self):
        return self.times.shape[0]

    def residuals(self, batch: InterpolationBatch) -> np.ndarray:
        return self.doppler - np.einsum("pi,pi->p", self.h, batch.twists)

    def jacobians(self, batch: InterpolationBatch) -> np.ndarray:
        return -np.einsum("pi,pij->pj", self.h, batch.twist_jac)
