"""Synthetic scanning FMCW lidar.

Scenes are collections of rectangles, the trajectory is a chain of
constant-twist segments with a closed-form flow, and each azimuth column of
the scan is cast from the sensor pose at that column's timestamp. Doppler
is the range rate of the hit point, obtained from d/dt (T_li p) for static
geometry plus the surface's own velocity for moving rectangles.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import liealg as la
from .dataset import ManifestEntry, frame_path, write_frame, write_manifest, write_poses
from .errors import NoTrajectoryCoverage
from .frontend import LidarFrame
from .liealg import Pose

log = logging.getLogger(__name__)


# -- trajectory ------------------------------------------------------------------------

@dataclass
class GtTrajectory:
    """Piecewise-constant body twist; ``poses[k]`` is T_vi at ``times[k]``."""

    times: np.ndarray  # segment start times, plus the final end time
    twists: np.ndarray  # (K,6), twist on [times[k], times[k+1])
    poses: np.ndarray  # (K+1,4,4)

    @classmethod
    def from_twists(cls, times, twists, T0=None) -> "GtTrajectory":
        times = np.asarray(times, dtype=float)
        twists = np.asarray(twists, dtype=float).reshape(-1, 6)
        if times.shape[0] != twists.shape[0] + 1 or np.any(np.diff(times) <= 0):
            raise ValueError("need strictly increasing times, one more than twists")
        steps = la.exp_matrix(np.diff(times)[:, None] * twists)
        poses = np.empty((len(times), 4, 4))
        poses[0] = np.eye(4) if T0 is None else np.asarray(T0, dtype=float)
        for k in range(len(twists)):
            poses[k + 1] = steps[k] @ poses[k]
        return cls(times, twists, poses)

    @classmethod
    def speed_profile(cls, speeds, period: float = 0.1, yaw_rates=None) -> "GtTrajectory":
        """One constant segment per ``period``; forward speed (m/s) and left yaw rate (rad/s)."""
        speeds = np.asarray(speeds, dtype=float)
        yaw = np.zeros_like(speeds) if yaw_rates is None else np.asarray(yaw_rates, dtype=float)
        tw = np.zeros((speeds.size, 6))
        tw[:, 0] = -speeds
        tw[:, 5] = -yaw
        return cls.from_twists(period * np.arange(speeds.size + 1), tw)

    @classmethod
    def from_functions(cls, speed, duration: float, yaw_rate=None, step: float = 0.001) -> "GtTrajectory":
        """Sample speed(t) and yaw_rate(t) at segment midpoints of width ``step``.

        Steps are kept fine so the held twist stays well below the Doppler
        noise while the vehicle accelerates.
        """
        n = int(np.ceil(duration / step - 1e-9))
        mid = (np.arange(n) + 0.5) * step
        yaw = None if yaw_rate is None else np.vectorize(yaw_rate)(mid)
        return cls.speed_profile(np.vectorize(speed)(mid), step, yaw)

    @property
    def start(self) -> float:
        return float(self.times[0])

    @property
    def end(self) -> float:
        return float(self.times[-1])

    def _segment(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < self.start) or np.any(t > self.end):
            raise NoTrajectoryCoverage(f"query outside [{self.start}, {self.end}]")
        return np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.twists) - 1)

    def pose(self, t) -> np.ndarray:
        """T_vi at time(s) t: (4,4) for a scalar, (N,4,4) for an array."""
        k = self._segment(t)
        dt = np.asarray(t, dtype=float) - self.times[k]
        T = la.exp_matrix(dt[..., None] * self.twists[k]) @ self.poses[k]
        return T

    def twist(self, t) -> np.ndarray:
        return self.twists[self._segment(t)]

    def path_length(self, t0: Optional[float] = None, t1: Optional[float] = None) -> float:
        """Distance travelled between t0 and t1 (closed form per segment)."""
        t0 = self.start if t0 is None else t0
        t1 = self.end if t1 is None else t1
        # constant body twist per segment: the origin moves at |nu|
        span = np.clip(np.minimum(self.times[1:], t1) - np.maximum(self.times[:-1], t0), 0.0, None)
        return float(span @ np.linalg.norm(self.twists[:, :3], axis=1))


def smooth_ramp(cruise: float, rest: float = 0.1, ramp: float = 3.0):
    """Speed function: at rest for ``rest`` seconds, then a smoothstep to ``cruise`` over ``ramp`` seconds."""
    def speed(t):
        x = np.clip((t - rest) / ramp, 0.0, 1.0)
        return cruise * x * x * (3.0 - 2.0 * x)
    return speed


def ramp_distance(cruise: float, duration: float, rest: float = 0.1, ramp: float = 3.0) -> float:
    """Closed-form distance covered by ``smooth_ramp`` after ``duration`` seconds."""
    t = max(duration - rest, 0.0)
    if t <= ramp:
        x = t / ramp
        return cruise * ramp * (x**3 - 0.5 * x**4)
    return cruise * (0.5 * ramp + (t - ramp))


def frames_for_distance(cruise: float, distance: float, period: float = 0.1, rest: float = 0.1,
                        ramp: float = 3.0) -> int:
    """Smallest frame count whose ramped run covers ``distance``."""
    n = 1
    while ramp_distance(cruise, n * period, rest, ramp) < distance:
        n += 1
    return n


# -- scene -------------------------------------------------------------------------

@dataclass(eq=False)
class ScenePlane:
    """Rectangle ``center + a u + b v`` with |a| <= half_u, |b| <= half_v."""

    center: np.ndarray
    normal: np.ndarray
    u_axis: np.ndarray
    half_u: float
    half_v: float
    velocity: Optional[np.ndarray] = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        n = np.asarray(self.normal, dtype=float)
        self.normal = n / np.linalg.norm(n)
        u = np.asarray(self.u_axis, dtype=float)
        u = u - (u @ self.normal) * self.normal
        self.u_axis = u / np.linalg.norm(u)
        if self.velocity is not None:
            self.velocity = np.asarray(self.velocity, dtype=float)

    @property
    def v_axis(self) -> np.ndarray:
        return np.cross(self.normal, self.u_axis)


@dataclass
class Scene:
    planes: list = field(default_factory=list)
    name: str = "scene"

    def __len__(self):
        return len(self.planes)

    def extend(self, planes) -> "Scene":
        self.planes.extend(planes)
        return self


def box_planes(center, size, yaw: float = 0.0, top: bool = True) -> list:
    """Four vertical faces (and a lid) of a box standing on z = center_z - size_z/2."""
    c = np.asarray(center, dtype=float)
    sx, sy, sz = np.asarray(size, dtype=float) / 2
    cy, syaw = np.cos(yaw), np.sin(yaw)
    ex, ey, ez = np.array([cy, syaw, 0.0]), np.array([-syaw, cy, 0.0]), np.array([0.0, 0.0, 1.0])
    out = [
        ScenePlane(c + sx * ex, ex, ey, sy, sz),
        ScenePlane(c - sx * ex, -ex, ey, sy, sz),
        ScenePlane(c + sy * ey, ey, ex, sx, sz),
        ScenePlane(c - sy * ey, -ey, ex, sx, sz),
    ]
    if top:
        out.append(ScenePlane(c + sz * ez, ez, ex, sx, sy))
    return out


def make_tunnel_scene(length: float = 700.0, width: float = 10.0, height: float = 6.0,
                      start: float = -50.0, end_caps: bool = False) -> Scene:
    """Floor, ceiling and two side walls running along +x; nothing constrains x."""
    half = length / 2
    cx = start + half
    ex, ey, ez = np.eye(3)
    planes = [
        ScenePlane([cx, 0, 0], ez, ex, half, width / 2),
        ScenePlane([cx, 0, height], -ez, ex, half, width / 2),
        ScenePlane([cx, width / 2, height / 2], -ey, ex, half, height / 2),
        ScenePlane([cx, -width / 2, height / 2], ey, ex, half, height / 2),
    ]
    if end_caps:
        planes += [
            ScenePlane([start, 0, height / 2], ex, ey, width / 2, height / 2),
            ScenePlane([start + length, 0, height / 2], -ex, ey, width / 2, height / 2),
        ]
    return Scene(planes, "tunnel")


def make_corridor_scene(length: float = 400.0, width: float = 8.0, wall_height: float = 1.0,
                        building_offset: float = 45.0, start: float = -50.0, seed: int = 0) -> Scene:
    """Open ground with low parallel barriers; buildings only beyond ``building_offset`` laterally."""
    rng = np.random.default_rng(seed)
    half = length / 2
    cx = start + half
    ex, ey, ez = np.eye(3)
    planes = [
        ScenePlane([cx, 0, 0], ez, ex, half, building_offset + 40.0),
        ScenePlane([cx, width / 2, wall_height / 2], -ey, ex, half, wall_height / 2),
        ScenePlane([cx, -width / 2, wall_height / 2], ey, ex, half, wall_height / 2),
    ]
    x = start
    while x < start + length:
        for side in (1.0, -1.0):
            w = rng.uniform(8.0, 25.0)
            depth = rng.uniform(8.0, 20.0)
            h = rng.uniform(8.0, 25.0)
            y = side * (building_offset + rng.uniform(0.0, 10.0) + depth / 2)
            planes += box_planes([x + w / 2, y, h / 2], [w, depth, h], yaw=rng.uniform(-0.3, 0.3))
        x += rng.uniform(15.0, 35.0)
    return Scene(planes, "corridor")


def make_box_scene(length: float = 200.0, n_boxes: int = 60, lateral: float = 35.0, clearance: float = 5.0,
                   start: float = -30.0, seed: int = 0) -> Scene:
    """Ground plane plus randomly sized and rotated boxes on both sides of the x axis."""
    rng = np.random.default_rng(seed)
    ex, ez = np.eye(3)[0], np.eye(3)[2]
    planes = [ScenePlane([start + length / 2, 0, 0], ez, ex, length / 2 + 50.0, lateral + 50.0)]
    for _ in range(n_boxes):
        size = rng.uniform([2.0, 2.0, 2.0], [8.0, 8.0, 10.0])
        y = rng.choice([-1.0, 1.0]) * rng.uniform(clearance + size[1] / 2 + 1.0, lateral)
        x = rng.uniform(start, start + length)
        planes += box_planes([x, y, size[2] / 2], size, yaw=rng.uniform(0, np.pi))
    return Scene(planes, "box")


def moving_box(start_x: float, velocity, y: float = 0.0, size=(1.0, 2.5, 3.0)) -> list:
    """A vehicle-sized box whose faces all move with ``velocity`` (world frame)."""
    planes = box_planes([start_x, y, size[2] / 2], size, top=True)
    for p in planes:
        p.velocity = np.asarray(velocity, dtype=float)
    return planes


# -- sensor ------------------------------------------------------------------------

@dataclass
class SensorModel:
    hfov_deg: float = 120.0
    vfov_deg: float = 30.0
    max_range: float = 300.0
    doppler_noise: float = 0.03
    range_noise: float = 0.02
    rate_hz: float = 10.0
    beams: int = 32
    azimuth_steps: int = 180
    T_lv: np.ndarray = field(default_factory=lambda: Pose(np.eye(3), np.array([0.0, 0.0, -1.8])).matrix())

    def __post_init__(self):
        if min(self.hfov_deg, self.vfov_deg, self.max_range, self.rate_hz, self.beams, self.azimuth_steps) <= 0:
            raise ValueError("sensor parameters must be positive")
        if self.hfov_deg > 360 or self.vfov_deg > 180:
            raise ValueError("field of view too large")
        if self.doppler_noise < 0 or self.range_noise < 0:
            raise ValueError("noise levels must be non-negative")
        self.T_lv = np.asarray(self.T_lv, dtype=float)

    @property
    def period(self) -> float:
        return 1.0 / self.rate_hz

    def noiseless(self) -> "SensorModel":
        return SensorModel(self.hfov_deg, self.vfov_deg, self.max_range, 0.0, 0.0, self.rate_hz,
                           self.beams, self.azimuth_steps, self.T_lv)

    def ray_directions(self) -> np.ndarray:
        """(A,B,3) unit rays in the lidar frame; azimuth sweeps left to right."""
        az = np.radians(np.linspace(self.hfov_deg / 2, -self.hfov_deg / 2, self.azimuth_steps))
        el = np.radians(np.linspace(-self.vfov_deg / 2, self.vfov_deg / 2, self.beams))
        A, E = np.meshgrid(az, el, indexing="ij")
        return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1)

    def column_offsets(self) -> np.ndarray:
        """Column time offsets from the frame start, float32-representable."""
        rel = (np.arange(self.azimuth_steps) + 0.5) / self.azimuth_steps * self.period
        return rel.astype(np.float32).astype(float)


def _cast(origins, dirs, times, scene: Scene, max_range: float):
    """Nearest hit per ray: (range, plane index) with inf / -1 for misses."""
    best = np.full(dirs.shape[0], np.inf)
    which = np.full(dirs.shape[0], -1)
    for k, p in enumerate(scene.planes):
        c = p.center if p.velocity is None else p.center + times[:, None] * p.velocity
        denom = dirs @ p.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.einsum("ri,i->r", c - origins, p.normal) / denom
        ok = (np.abs(denom) > 1e-12) & (t > 1e-9) & (t < best) & (t <= max_range)
        if not np.any(ok):
            continue
        h = origins[ok] + t[ok, None] * dirs[ok] - (c[ok] if c.ndim == 2 else c)
        inside = (np.abs(h @ p.u_axis) <= p.half_u) & (np.abs(h @ p.v_axis) <= p.half_v)
        idx = np.flatnonzero(ok)[inside]
        best[idx] = t[idx]
        which[idx] = k
    return best, which


def simulate_frame(traj: GtTrajectory, scene: Scene, sensor: SensorModel, frame_index: int, seed: int = 0,
                   quantize: bool = False) -> LidarFrame:
    """Scan one frame while moving along ``traj``.

    Noise for every ray is drawn from a generator keyed on (seed, frame) so a
    frame does not depend on which other frames were generated. With
    ``quantize`` the point and Doppler channels are rounded to float32 as
    they are when stored on disk.
    """
    start = traj.start + frame_index * sensor.period
    end = start + sensor.period
    if start < traj.start - 1e-12 or end > traj.end + 1e-9:
        raise NoTrajectoryCoverage(f"frame {frame_index} [{start}, {end}] outside the trajectory")
    end = min(end, traj.end)
    rng = np.random.default_rng([seed, frame_index])
    A, B = sensor.azimuth_steps, sensor.beams
    range_noise = rng.normal(0.0, 1.0, (A, B)) * sensor.range_noise
    dv_noise = rng.normal(0.0, 1.0, (A, B)) * sensor.doppler_noise

    col_t = start + sensor.column_offsets()
    T_vi = traj.pose(col_t)  # (A,4,4)
    T_li = sensor.T_lv @ T_vi
    T_il = la.inverse_matrix(T_li)
    dirs_l = sensor.ray_directions()  # (A,B,3)
    dirs_w = np.einsum("aij,abj->abi", T_il[:, :3, :3], dirs_l)
    origins = np.repeat(T_il[:, None, :3, 3], B, axis=1)
    times = np.repeat(col_t[:, None], B, axis=1)
    r, which = _cast(origins.reshape(-1, 3), dirs_w.reshape(-1, 3), times.reshape(-1), scene, sensor.max_range)
    hit = np.flatnonzero(np.isfinite(r))
    a_idx, b_idx = np.divmod(hit, B)

    rng_meas = r[hit] + range_noise[a_idx, b_idx]
    keep = rng_meas > 0
    hit, a_idx, b_idx, rng_meas = hit[keep], a_idx[keep], b_idx[keep], rng_meas[keep]
    d = dirs_l[a_idx, b_idx]
    q = rng_meas[:, None] * d

    # range rate of a static point: qdot = T_lv varpi^ T_vl q
    T_vl = la.inverse_matrix(sensor.T_lv)
    tw = traj.twist(col_t)[a_idx]
    M = sensor.T_lv @ la.hat(tw) @ T_vl
    qdot = np.einsum("pij,pj->pi", M[:, :3, :3], q) + M[:, :3, 3]
    vel = np.zeros((hit.size, 3))
    for k, p in enumerate(scene.planes):
        if p.velocity is not None:
            sel = which[hit] == k
            vel[sel] = np.einsum("pij,j->pi", T_li[a_idx[sel], :3, :3], p.velocity)
    doppler = np.einsum("pi,pi->p", d, qdot + vel) + dv_noise[a_idx, b_idx]

    if quantize:
        q = q.astype(np.float32).astype(float)
        doppler = doppler.astype(np.float32).astype(float)
    return LidarFrame(frame_index, start, end, q, col_t[a_idx], doppler)


def groundtruth_at(traj: GtTrajectory, times):
    """World-from-vehicle poses (T_iv) at the given times, the pose-file layout."""
    return la.inverse_matrix(traj.pose(np.asarray(times, dtype=float)))


def export_dataset(traj: GtTrajectory, scene: Scene, sensor: SensorModel, n_frames: int, out_dir,
                   seed: int = 0) -> None:
    """Frames, manifest, ground truth at frame ends, and a matching pipeline config."""
    from .pipeline import PipelineConfig

    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    entries, ends = [], []
    for i in range(n_frames):
        f = simulate_frame(traj, scene, sensor, i, seed, quantize=True)
        write_frame(f, frame_path(out, i))
        entries.append(ManifestEntry(i, f.start_time, f.end_time))
        ends.append(f.end_time)
    write_manifest(entries, out / "manifest.txt")
    ends = np.array(ends)
    write_poses(ends, groundtruth_at(traj, ends) if n_frames else np.zeros((0, 4, 4)), out / "groundtruth.txt")
    cfg = PipelineConfig()
    cfg.extrinsic = sensor.T_lv.tolist()
    cfg.seed = seed
    cfg.dump(out / "config.yaml")
    log.info("wrote %d frames to %s", n_frames, out)


def straight_run(scene: str, speed: float, distance: Optional[float] = None, seed: int = 0, moving_objects: int = 0,
                 sensor: Optional[SensorModel] = None, yaw_rate: float = 0.0, n_frames: Optional[int] = None):
    """(traj, scene, sensor, n_frames) for a run from rest of ``distance`` metres or ``n_frames`` frames."""
    sensor = sensor or SensorModel()
    if n_frames is None:
        if distance is None:
            raise ValueError("give a distance or a frame count")
        n = frames_for_distance(speed, distance, sensor.period)
    else:
        n = int(n_frames)
    distance = ramp_distance(speed, n * sensor.period)
    yaw = None
    if yaw_rate:
        yaw = smooth_ramp(yaw_rate, 0.1, 3.0)
    traj = GtTrajectory.from_functions(smooth_ramp(speed), n * sensor.period, yaw)
    span = distance + 400.0
    if scene == "tunnel":
        sc = make_tunnel_scene(length=span + 50.0)
    elif scene == "corridor":
        sc = make_corridor_scene(length=span + 50.0, seed=seed)
    elif scene == "box":
        sc = make_box_scene(length=distance + 100.0, n_boxes=int(0.6 * (distance + 100.0)), seed=seed)
    else:
        raise ValueError(f"unknown scene {scene!r}")
    rng = np.random.default_rng([seed, 9001])
    for j in range(moving_objects):
        sc.extend(moving_box(15.0 + 10.0 * j, [speed + 15.0, 0.0, 0.0], y=rng.uniform(-2.0, 2.0)))
    return traj, sc, sensor, n
