"""Frame-to-map odometry driver.

Frame 0 seeds the map at the identity pose with zero twist and provides the
first knot at its end time. Every later frame gets a knot at its end time,
initialised by constant-velocity extrapolation, and is registered against
the map inside the sliding window.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import yaml

from . import liealg as la
from .bench import Timers
from .factors import Extrinsic, FactorWeights
from .frontend import LidarFrame, LocalMap, extract_keypoints, grid_subsample
from .gp import TrajectoryKnot, WnoaPriorParams, extrapolate
from .liealg import Pose, Twist
from .solver import AlignConfig, MarginalPrior, SlidingWindow, SolverConfig, align_frame, majority_static

log = logging.getLogger(__name__)

MODES = ("icp_only", "doppler")


@dataclass
class PriorConfig:
    # loose along the driving axis so speed changes are cheap, tight in pitch rate,
    # the direction the lever arm leaves weakly observed during acceleration
    qc_diag: list = field(default_factory=lambda: [10.0, 1.0, 1.0, 0.1, 0.01, 0.1])
    # information of the bootstrap knot: pose pinned, twist loosely at rest
    initial_pose_information: float = 1e8
    initial_twist_information: float = 1.0


@dataclass
class FrontendConfig:
    keypoint_grid: float = 1.5
    map_voxel: float = 1.0
    map_max_points: int = 20
    map_radius: float = 100.0
    map_insert_grid: float = 0.5
    knn: int = 20
    max_assoc_dist: float = 2.0
    min_neighbors: int = 5


@dataclass
class FactorConfig:
    beta: float = 0.1
    p2p_sigma: float = 0.1
    dv_sigma: float = 0.03
    p2p_truncation: float = 0.5
    dv_truncation: float = 2.0
    cauchy_k: float = 1.0
    reject_dynamic: bool = True


@dataclass
class SolverSection:
    window_size: int = 2
    max_iterations: int = 20
    convergence_tol: float = 1e-4
    settle_tol: float = 1e-3
    reassociate_every: int = 5
    max_correspondences: int = 3000
    publish_newest: bool = False


@dataclass
class PipelineConfig:
    mode: str = "doppler"
    range_limit: Optional[float] = None
    doppler_sign: float = 1.0
    extrinsic: list = field(default_factory=lambda: np.eye(4).tolist())
    seed: int = 0
    prior: PriorConfig = field(default_factory=PriorConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    factors: FactorConfig = field(default_factory=FactorConfig)
    solver: SolverSection = field(default_factory=SolverSection)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.range_limit is not None and self.range_limit <= 0:
            raise ValueError("range_limit must be positive")
        if self.doppler_sign not in (1, -1, 1.0, -1.0):
            raise ValueError("doppler_sign must be +1 or -1")
        T = np.asarray(self.extrinsic, dtype=float)
        if T.shape != (4, 4):
            raise ValueError("extrinsic must be a 4x4 matrix")

    # -- (de)serialisation --------------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> "PipelineConfig":
        return _build(cls, data or {})

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def dump(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))

    # -- derived objects --------------------------------------------------------------

    def align_config(self) -> AlignConfig:
        f, s, fe = self.factors, self.solver, self.frontend
        return AlignConfig(
            solver=SolverConfig(s.window_size, s.max_iterations, s.convergence_tol, s.reassociate_every,
                                s.max_correspondences, s.publish_newest, settle_tol=s.settle_tol),
            extrinsic=Extrinsic.from_matrix(self.extrinsic),
            weights=FactorWeights(f.beta, f.p2p_sigma, f.dv_sigma),
            use_doppler=self.mode == "doppler",
            p2p_truncation=f.p2p_truncation,
            dv_truncation=f.dv_truncation,
            cauchy_k=f.cauchy_k,
            reject_dynamic=f.reject_dynamic,
            knn=fe.knn,
            max_assoc_dist=fe.max_assoc_dist,
            min_neighbors=fe.min_neighbors,
        )


def _build(cls, data: dict):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = names[name].default_factory() if names[name].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value or {})
        else:
            kwargs[name] = value
    return cls(**kwargs)


@dataclass(frozen=True)
class FrameRecord:
    index: int
    time: float
    pose: Pose  # T_vi at the frame end
    twist: Twist


@dataclass
class OdometryResult:
    records: list = field(default_factory=list)
    timers: Timers = field(default_factory=Timers)
    diverged: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    iterations: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def times(self) -> np.ndarray:
        return np.array([r.time for r in self.records])

    def poses_iv(self) -> np.ndarray:
        """World-from-vehicle poses, the layout used by pose files and metrics."""
        return np.array([r.pose.inverse().matrix() for r in self.records]).reshape(-1, 4, 4)

    def trajectory(self):
        return self.times, self.poses_iv()


class Odometry:
    """Streaming odometry; feed frames in order with ``process`` and call ``finish``."""

    def __init__(self, config: PipelineConfig = None):
        self.config = config or PipelineConfig()
        self.config.validate()
        self.align = self.config.align_config()
        fe = self.config.frontend
        self.map = LocalMap(fe.map_voxel, fe.map_max_points, fe.map_radius)
        self.prior = WnoaPriorParams(tuple(self.config.prior.qc_diag))
        self.window: Optional[SlidingWindow] = None
        self.result = OdometryResult()
        self._published_upto = -np.inf
        self._knot_frame: dict = {}

    # -- preprocessing ----------------------------------------------------------------

    def preprocess(self, frame: LidarFrame) -> LidarFrame:
        if self.config.mode == "icp_only" or frame.doppler is None:
            frame = frame.without_doppler()
        elif self.config.doppler_sign != 1:
            frame = LidarFrame(frame.index, frame.start_time, frame.end_time, frame.points, frame.timestamps,
                               self.config.doppler_sign * frame.doppler)
        if self.config.range_limit is not None:
            frame = frame.range_limited(self.config.range_limit)
        return frame

    def _map_points(self, frame: LidarFrame) -> LidarFrame:
        return frame.subset(grid_subsample(frame.points, self.config.frontend.map_insert_grid))

    # -- main loop ----------------------------------------------------------------------

    def process(self, frame: LidarFrame) -> None:
        timers = self.result.timers
        t0 = time.perf_counter()
        with timers.stage("preprocess"):
            frame = self.preprocess(frame)
        if self.window is None:
            self._bootstrap(frame)
        else:
            self._track(frame)
        timers.wall += time.perf_counter() - t0
        timers.frames += 1

    def _bootstrap(self, frame: LidarFrame) -> None:
        knot = TrajectoryKnot(frame.end_time, Pose.identity(), Twist.zero())
        info = np.diag([self.config.prior.initial_pose_information] * 6
                       + [self.config.prior.initial_twist_information] * 6)
        self.window = SlidingWindow([knot], MarginalPrior.centered(knot, info), [], self.prior)
        if len(frame):
            sub = self._map_points(frame)
            if self.align.use_doppler and self.align.reject_dynamic and sub.doppler is not None:
                # at rest every static return reads zero, so anything faster is moving
                sub = sub.subset(np.flatnonzero(majority_static(~(np.abs(sub.doppler) > self.align.dv_truncation))))
            T_vl = self.align.extrinsic.T_vl
            self.map.insert_frame(sub.points @ T_vl[:3, :3].T + T_vl[:3, 3], np.zeros(3))
        else:
            log.warning("frame %d: empty first frame, map starts empty", frame.index)
        self._knot_frame[knot.time] = frame.index
        self._publish(knot)

    def _track(self, frame: LidarFrame) -> None:
        last = self.window.knots[-1]
        if frame.end_time <= last.time:
            log.warning("frame %d ends before the previous knot; skipped", frame.index)
            self.result.skipped.append(frame.index)
            return
        inside = frame.timestamps >= last.time
        if not np.all(inside):
            log.debug("frame %d: %d points before the previous knot dropped", frame.index, int((~inside).sum()))
            frame = frame.subset(np.flatnonzero(inside))
        knot = extrapolate(last, frame.end_time)
        self._knot_frame[knot.time] = frame.index
        self.window.append(knot)

        keypoints = None
        if len(frame):
            with self.result.timers.stage("preprocess"):
                keypoints = extract_keypoints(frame, self.config.frontend.keypoint_grid,
                                              self.config.seed + frame.index)
        if keypoints is None or len(self.map) == 0:
            log.warning("frame %d: nothing to align, trajectory extrapolated", frame.index)
            self.result.skipped.append(frame.index)
            departed = self._slide()
        else:
            out = align_frame(self.window, keypoints, self.map, self.align, self._map_points(frame),
                              self.result.timers)
            self.window = out.window
            departed = out.departed
            self.result.iterations.append(out.history.iterations)
            if out.diverged:
                self.result.diverged.append(frame.index)
        for k in departed:
            self._publish(k)
        if self.config.solver.publish_newest:
            self._publish(self.window.knots[-1])

    def _slide(self):
        from .solver import marginalize_oldest

        departed = []
        while len(self.window.knots) > self.config.solver.window_size + 1:
            self.window, gone = marginalize_oldest(self.window)
            departed.append(gone)
        return departed

    def _publish(self, knot: TrajectoryKnot) -> None:
        if knot.time <= self._published_upto:
            return
        self._published_upto = knot.time
        idx = self._knot_frame.pop(knot.time, -1)
        self.result.records.append(FrameRecord(idx, knot.time, knot.pose, knot.twist))

    def finish(self) -> OdometryResult:
        """Publish whatever is still in the window."""
        if self.window is not None:
            for k in self.window.knots:
                self._publish(k)
        return self.result


def run(config: PipelineConfig, reader: Iterable[LidarFrame]) -> OdometryResult:
    odo = Odometry(config)
    for frame in reader:
        odo.process(frame)
    return odo.finish()
