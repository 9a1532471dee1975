"""SE(3) kernel: exp/log, adjoints, the hat/odot operators and left Jacobians.

Six-vectors are ordered ``[rho; phi]`` (translation first, rotation second).
Pose perturbations are applied on the left, ``T <- exp(delta^) T``.

Every array routine broadcasts over leading dimensions so that factor
evaluation can run over thousands of points at once; the small-angle
branches use truncated Taylor series whose tail is below double precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import AngleNearPi

# below this angle the trigonometric coefficients switch to their series
TAYLOR_ANGLE = 0.05
# principal-branch margin for log and the inverse Jacobian
PI_MARGIN = 1e-6
# accepted deviation of a stored rotation from SO(3)
ORTHO_TOL = 1e-9

# 3x4 projection that drops the homogeneous coordinate
D = np.hstack([np.eye(3), np.zeros((3, 1))])


def skew(v):
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        x, y, z = v
        return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def hat(xi):
    """6-vector -> 4x4 element of se(3)."""
    xi = np.asarray(xi, dtype=float)
    out = np.zeros(xi.shape[:-1] + (4, 4))
    out[..., :3, :3] = skew(xi[..., 3:])
    out[..., :3, 3] = xi[..., :3]
    return out


def vee(X):
    X = np.asarray(X, dtype=float)
    return np.concatenate(
        [X[..., :3, 3], np.stack([X[..., 2, 1], X[..., 0, 2], X[..., 1, 0]], axis=-1)],
        axis=-1,
    )


def curlyhat(xi):
    """6x6 adjoint representation ad(xi) of a se(3) element."""
    xi = np.asarray(xi, dtype=float)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    phi_x = skew(xi[..., 3:])
    out[..., :3, :3] = phi_x
    out[..., 3:, 3:] = phi_x
    out[..., :3, 3:] = skew(xi[..., :3])
    return out


def odot(q):
    """Homogeneous point (...,4) -> (...,4,6) with odot(q) @ xi == hat(xi) @ q."""
    q = np.asarray(q, dtype=float)
    if q.shape[-1] == 3:
        q = as_homogeneous(q)
    out = np.zeros(q.shape[:-1] + (4, 6))
    eta = q[..., 3]
    out[..., 0, 0] = eta
    out[..., 1, 1] = eta
    out[..., 2, 2] = eta
    out[..., :3, 3:] = -skew(q[..., :3])
    return out


def as_homogeneous(xyz):
    xyz = np.asarray(xyz, dtype=float)
    return np.concatenate([xyz, np.ones(xyz.shape[:-1] + (1,))], axis=-1)


# -- trigonometric coefficients ------------------------------------------------

def _coefficient(theta, closed, series):
    theta = np.asarray(theta, dtype=float)
    if theta.size == 1:
        # single angle: plain float arithmetic, far cheaper than masked arrays
        t = float(theta.reshape(()))
        if t < TAYLOR_ANGLE:
            val, t2 = 0.0, t * t
            for c in reversed(series):
                val = val * t2 + c
        else:
            val = closed(t)
        return np.full(theta.shape, val)
    small = theta < TAYLOR_ANGLE
    safe = np.where(small, 1.0, theta)
    t2 = theta * theta
    approx = np.zeros_like(theta)
    for c in reversed(series):
        approx = approx * t2 + c
    return np.where(small, approx, closed(safe))


def _sinc(t):
    return _coefficient(t, lambda s: np.sin(s) / s, (1.0, -1 / 6, 1 / 120, -1 / 5040, 1 / 362880))


def _cosc(t):
    return _coefficient(
        t, lambda s: (1 - np.cos(s)) / s**2, (0.5, -1 / 24, 1 / 720, -1 / 40320, 1 / 3628800)
    )


def _c3(t):
    return _coefficient(
        t, lambda s: (s - np.sin(s)) / s**3, (1 / 6, -1 / 120, 1 / 5040, -1 / 362880, 1 / 39916800)
    )


def _c4(t):
    return _coefficient(
        t,
        lambda s: (s**2 + 2 * np.cos(s) - 2) / (2 * s**4),
        (1 / 24, -1 / 720, 1 / 40320, -1 / 3628800, 1 / 479001600),
    )


def _c5(t):
    return _coefficient(
        t,
        lambda s: (2 * s - 3 * np.sin(s) + s * np.cos(s)) / (2 * s**5),
        (1 / 120, -1 / 2520, 1 / 120960, -1 / 9979200, 1 / 1245404160),
    )


def _jinv_coef(t):
    return _coefficient(
        t,
        lambda s: 1 / s**2 - (1 + np.cos(s)) / (2 * s * np.sin(s)),
        (1 / 12, 1 / 720, 1 / 30240, 1 / 1209600, 1 / 47900160),
    )


def _angle(phi):
    return np.linalg.norm(np.asarray(phi, dtype=float), axis=-1)


def _check_pi(theta):
    if np.any(np.asarray(theta) >= math.pi - PI_MARGIN):
        raise AngleNearPi(f"rotation angle {np.max(theta):.9f} rad is at or beyond the principal branch")


# -- SO(3) ---------------------------------------------------------------------

def rot_exp(phi):
    phi = np.asarray(phi, dtype=float)
    th = _angle(phi)[..., None, None]
    K = skew(phi)
    return np.eye(3) + _sinc(th) * K + _cosc(th) * (K @ K)


def rot_log(C):
    C = np.asarray(C, dtype=float)
    cos = np.clip((np.trace(C, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    s = 0.5 * np.stack(
        [C[..., 2, 1] - C[..., 1, 2], C[..., 0, 2] - C[..., 2, 0], C[..., 1, 0] - C[..., 0, 1]],
        axis=-1,
    )
    theta = np.arctan2(np.linalg.norm(s, axis=-1), cos)
    _check_pi(theta)
    return s / _sinc(theta)[..., None]


def so3_left_jacobian(phi):
    phi = np.asarray(phi, dtype=float)
    th = _angle(phi)[..., None, None]
    K = skew(phi)
    return np.eye(3) + _cosc(th) * K + _c3(th) * (K @ K)


def so3_left_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    th = _angle(phi)
    _check_pi(th)
    K = skew(phi)
    return np.eye(3) - 0.5 * K + _jinv_coef(th)[..., None, None] * (K @ K)


def _q_matrix(xi):
    xi = np.asarray(xi, dtype=float)
    th = _angle(xi[..., 3:])[..., None, None]
    R = skew(xi[..., :3])
    P = skew(xi[..., 3:])
    PR = P @ R
    RP = R @ P
    PRP = PR @ P
    PP = P @ P
    return (
        0.5 * R
        + _c3(th) * (PR + RP + PRP)
        + _c4(th) * (PP @ R + R @ PP - 3.0 * PRP)
        + _c5(th) * (PRP @ P + P @ PRP)
    )


# -- SE(3) matrices ------------------------------------------------------------

def exp_matrix(xi):
    """Batched exp: (...,6) -> (...,4,4)."""
    xi = np.asarray(xi, dtype=float)
    out = np.zeros(xi.shape[:-1] + (4, 4))
    out[..., :3, :3] = rot_exp(xi[..., 3:])
    out[..., :3, 3] = np.einsum("...ij,...j->...i", so3_left_jacobian(xi[..., 3:]), xi[..., :3])
    out[..., 3, 3] = 1.0
    return out


def log_matrix(T):
    """Batched log: (...,4,4) -> (...,6). Raises AngleNearPi off the principal branch."""
    T = np.asarray(T, dtype=float)
    phi = rot_log(T[..., :3, :3])
    rho = np.einsum("...ij,...j->...i", so3_left_jacobian_inv(phi), T[..., :3, 3])
    return np.concatenate([rho, phi], axis=-1)


def adjoint_matrix(T):
    T = np.asarray(T, dtype=float)
    C = T[..., :3, :3]
    out = np.zeros(T.shape[:-2] + (6, 6))
    out[..., :3, :3] = C
    out[..., 3:, 3:] = C
    out[..., :3, 3:] = skew(T[..., :3, 3]) @ C
    return out


def inverse_matrix(T):
    T = np.asarray(T, dtype=float)
    out = np.zeros_like(T)
    Ct = np.swapaxes(T[..., :3, :3], -1, -2)
    out[..., :3, :3] = Ct
    out[..., :3, 3] = -np.einsum("...ij,...j->...i", Ct, T[..., :3, 3])
    out[..., 3, 3] = 1.0
    return out


def left_jacobian(xi):
    xi = np.asarray(xi, dtype=float)
    J = so3_left_jacobian(xi[..., 3:])
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = J
    out[..., 3:, 3:] = J
    out[..., :3, 3:] = _q_matrix(xi)
    return out


def left_jacobian_inv(xi):
    xi = np.asarray(xi, dtype=float)
    Ji = so3_left_jacobian_inv(xi[..., 3:])
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = Ji
    out[..., 3:, 3:] = Ji
    out[..., :3, 3:] = -Ji @ _q_matrix(xi) @ Ji
    return out


def _series_terms(theta_max):
    # smallest N with theta^N / (N+1)! below 1e-18 (relative to the leading term)
    n, term = 1, 1.0
    while n < 60:
        term *= theta_max / (n + 1)
        if term < 1e-18:
            break
        n += 1
    return max(n + 1, 3)


def jacobian_vec_derivative(xi, v):
    """Exact derivative of ``left_jacobian(xi) @ v`` with respect to ``xi``.

    Uses the power series of J = sum (ad xi)^n / (n+1)! differentiated term by
    term; the double sum collapses to a Horner recursion because ad(.) is
    linear in its argument.
    """
    xi, v = np.broadcast_arrays(np.asarray(xi, dtype=float), np.asarray(v, dtype=float))
    A = curlyhat(xi)
    theta = _angle(xi[..., 3:])
    N = _series_terms(float(np.max(theta)) if theta.size else 0.0)
    U = np.empty(xi.shape[:-1] + (N, 6))
    U[..., 0, :] = v
    for j in range(1, N):
        U[..., j, :] = np.einsum("...ij,...j->...i", A, U[..., j - 1, :])
    c = np.array([1.0 / math.factorial(n + 1) for n in range(N + 1)])
    idx = np.arange(N)
    order = idx[:, None] + idx[None, :] + 1
    hankel = np.where(order <= N, c[np.minimum(order, N)], 0.0)
    adW = curlyhat(np.einsum("ij,...jk->...ik", hankel, U))
    M = adW[..., N - 1, :, :]
    for i in range(N - 2, -1, -1):
        M = adW[..., i, :, :] + A @ M
    return -M


def jacobian_inv_vec_derivative(xi, v):
    """Exact derivative of ``left_jacobian_inv(xi) @ v`` with respect to ``xi``."""
    Jinv = left_jacobian_inv(xi)
    y = np.einsum("...ij,...j->...i", Jinv, v)
    return -Jinv @ jacobian_vec_derivative(xi, y)


# -- value types ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform stored as rotation matrix + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation is not a proper orthonormal matrix")
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        if not isinstance(other, Pose):
            return NotImplemented
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def transform(self, points) -> np.ndarray:
        """Apply to (...,3) points."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def normalized(self) -> "Pose":
        """Re-project the rotation onto SO(3) (polar decomposition)."""
        U, _, Vt = np.linalg.svd(self.rotation)
        R = U @ Vt
        if np.linalg.det(R) < 0:
            U[:, -1] *= -1
            R = U @ Vt
        return Pose(R, self.translation)

    def __repr__(self):
        return f"Pose(rotvec={np.round(rot_log(self.rotation), 6)}, translation={np.round(self.translation, 6)})"


@dataclass(frozen=True, eq=False)
class Twist:
    """Body-centric velocity [nu; omega] in m/s and rad/s."""

    nu: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        nu = np.array(self.nu, dtype=float).reshape(3)
        om = np.array(self.omega, dtype=float).reshape(3)
        if not (np.all(np.isfinite(nu)) and np.all(np.isfinite(om))):
            raise ValueError("twist components must be finite")
        nu.flags.writeable = False
        om.flags.writeable = False
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "omega", om)

    @classmethod
    def zero(cls) -> "Twist":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, v) -> "Twist":
        v = np.asarray(v, dtype=float)
        return cls(v[:3], v[3:6])

    def vector(self) -> np.ndarray:
        return np.concatenate([self.nu, self.omega])

    def __repr__(self):
        return f"Twist(nu={np.round(self.nu, 6)}, omega={np.round(self.omega, 6)})"


def _as_matrix(T):
    return T.matrix() if isinstance(T, Pose) else np.asarray(T, dtype=float)


def exp_se3(xi) -> Pose:
    return Pose.from_matrix(exp_matrix(np.asarray(xi, dtype=float).reshape(6)))


def log_se3(T) -> np.ndarray:
    return log_matrix(_as_matrix(T))


def adjoint(T) -> np.ndarray:
    return adjoint_matrix(_as_matrix(T))
