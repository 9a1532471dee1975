"""
SE(3) and the motion prior, step by step
=========================================

The odometry state is a pose ``T_vi`` (world to vehicle) plus a body twist.
Between two such knots the trajectory is a white-noise-on-acceleration
Gaussian process, and everything the solver needs comes from interpolating it.
Run with ``python demos/lie_and_gp.py``.
"""

# %%
# Exponential and logarithm
# -------------------------
# A twist stacks translational then rotational rates. A quarter turn about z:
import numpy as np

from ctlo import liealg as la
from ctlo.gp import SegmentLinearization, TrajectoryKnot, interpolate, interpolate_batch

T = la.exp_matrix(np.array([0.0, 0.0, 0.0, 0.0, 0.0, np.pi / 2]))
print(np.round(T, 12))
print("log(exp(xi)) =", np.round(la.log_matrix(T), 12))

# %%
# Driving forward at 10 m/s
# -------------------------
# Because T_vi maps the world into the vehicle, moving forward shows up as a
# negative x rate.
speed = 10.0
w = np.array([-speed, 0.0, 0.0, 0.0, 0.0, 0.0])
k0 = TrajectoryKnot.from_arrays(0.0, np.eye(4), w)
k1 = TrajectoryKnot.from_arrays(0.1, la.exp_matrix(0.1 * w), w)

# %%
# Interpolating inside a scan
# ---------------------------
# Each lidar point has its own timestamp. With a constant twist the GP mean is
# exactly the constant-velocity flow, so the vehicle sits 0.5 m along after
# 50 ms.
mid = interpolate(k0, k1, 0.05)
print("vehicle position at 50 ms:", np.round(mid.pose.inverse().translation, 9))
print("twist at 50 ms:", mid.twist.vector())

# %%
# A full column of timestamps costs one call. Points that share a stamp
# are interpolated once.
seg = SegmentLinearization.from_knots(k0, k1)
taus = np.repeat(np.linspace(0.0, 0.1, 11), 32)
batch = interpolate_batch(seg, taus)
print(batch.poses.shape, batch.pose_jac.shape)

# %%
# Jacobians against finite differences
# ------------------------------------
# The 12x24 block maps perturbations of both knots to the interpolated pose
# and twist. Nudge the next knot's forward rate and compare.
eps = 1e-6
bumped = TrajectoryKnot.from_arrays(0.1, k1.T, w + np.r_[eps, 0, 0, 0, 0, 0])
moved = interpolate(k0, bumped, 0.05)
numeric = (moved.twist.vector() - mid.twist.vector()) / eps
print("d twist / d w_next[x], analytic:", np.round(mid.jacobians[6:, 18], 6))
print("                       numeric: ", np.round(numeric, 6))
