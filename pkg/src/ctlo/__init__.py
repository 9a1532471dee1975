"""Continuous-time lidar odometry with Doppler velocity factors.

The trajectory is a white-noise-on-acceleration Gaussian process on SE(3);
point-to-plane and per-point Doppler factors are solved in a sliding
window with marginalization.
"""

from .errors import OdometryError
from .liealg import Pose, Twist, adjoint, exp_se3, log_se3, odot
from .gp import TrajectoryKnot, WnoaPriorParams, extrapolate, interpolate, prior_error
from .frontend import LidarFrame, LidarPoint, LocalMap, extract_keypoints, plane_fit
from .factors import Extrinsic, FactorWeights, RobustKernel, dv_error, dv_predict, p2p_error, robust_weight
from .solver import SlidingWindow, SolverConfig, align_frame, marginalize_oldest
from .pipeline import Odometry, OdometryResult, PipelineConfig, run
from .metrics import MetricsReport, frame_to_frame_rte, kitti_rte

__version__ = "0.1.0"
