"""Relative trajectory metrics: KITTI segment RTE and frame-to-frame RTE.

Trajectories are (timestamps, T_iv) pairs with world-from-vehicle poses, the
layout of the pose files.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import liealg as la
from .errors import SequenceTooShort

LENGTHS = tuple(range(100, 801, 100))


@dataclass(frozen=True)
class SegmentError:
    start: int
    length: float
    translation_pct: float
    rotation_deg_per_m: float


@dataclass
class MetricsReport:
    kitti_rte_percent: float = float("nan")
    kitti_rre_deg_per_m: float = float("nan")
    f2f_rte_m: float = float("nan")
    f2f_rre_deg: float = float("nan")
    segments: list = field(default_factory=list)
    f2f_errors: np.ndarray = field(default_factory=lambda: np.zeros(0))
    excluded_frames: int = 0
    n_pairs: int = 0

    def as_dict(self) -> dict:
        return {
            "kitti_rte_percent": self.kitti_rte_percent,
            "kitti_rre_deg_per_m": self.kitti_rre_deg_per_m,
            "f2f_rte_m": self.f2f_rte_m,
            "f2f_rre_deg": self.f2f_rre_deg,
            "segments": len(self.segments),
            "pairs": self.n_pairs,
            "excluded_frames": self.excluded_frames,
        }

    def text(self) -> str:
        d = self.as_dict()
        lines = [
            f"KITTI RTE        {d['kitti_rte_percent']:.4f} %",
            f"KITTI RRE        {d['kitti_rre_deg_per_m']:.6f} deg/m",
            f"F2F RTE          {d['f2f_rte_m']:.5f} m",
            f"F2F RRE          {d['f2f_rre_deg']:.5f} deg",
            "",
        ]
        lines += [f"{k} = {v}" for k, v in d.items()]
        return "\n".join(lines) + "\n"

    def plot_data(self) -> str:
        """Columnar text: mean error per segment length, then f2f error per pair."""
        lines = ["# length_m translation_pct rotation_deg_per_m count"]
        for L in LENGTHS:
            seg = [s for s in self.segments if s.length == L]
            if seg:
                lines.append(f"{L} {np.mean([s.translation_pct for s in seg]):.6f} "
                             f"{np.mean([s.rotation_deg_per_m for s in seg]):.8f} {len(seg)}")
        lines.append("# pair f2f_translation_m")
        lines += [f"{i} {e:.6f}" for i, e in enumerate(self.f2f_errors)]
        return "\n".join(lines) + "\n"


def pair_by_time(est, gt, period: float | None = None):
    """Match each ground-truth stamp to the nearest estimate within half a period."""
    t_est, T_est = est
    t_gt, T_gt = gt
    t_est, t_gt = np.asarray(t_est, float), np.asarray(t_gt, float)
    if t_est.size == 0 or t_gt.size == 0:
        return np.zeros((0, 4, 4)), np.zeros((0, 4, 4)), np.zeros(0)
    if period is None:
        period = float(np.median(np.diff(t_gt))) if t_gt.size > 1 else np.inf
    j = np.clip(np.searchsorted(t_est, t_gt), 1, max(t_est.size - 1, 1))
    if t_est.size == 1:
        j = np.zeros_like(j)
    else:
        left = j - 1
        j = np.where(np.abs(t_est[left] - t_gt) <= np.abs(t_est[j] - t_gt), left, j)
    ok = np.abs(t_est[j] - t_gt) <= 0.5 * period + 1e-9
    return np.asarray(T_est)[j[ok]], np.asarray(T_gt)[ok], t_gt[ok]


def _rotation_angle(R) -> np.ndarray:
    c = (np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0
    return np.arccos(np.clip(c, -1.0, 1.0))


def path_length(T_iv) -> np.ndarray:
    """Cumulative distance travelled at each pose."""
    p = np.asarray(T_iv)[:, :3, 3]
    if p.shape[0] == 0:
        return np.zeros(0)
    return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(p, axis=0), axis=1))])


def end_to_end_error(est, gt) -> float:
    """Translation error of the whole-sequence relative motion, as a fraction of path length."""
    T_e, T_g, _ = pair_by_time(est, gt)
    if len(T_g) < 2:
        raise SequenceTooShort("need at least two paired poses")
    rel_e = la.inverse_matrix(T_e[0]) @ T_e[-1]
    rel_g = la.inverse_matrix(T_g[0]) @ T_g[-1]
    return float(np.linalg.norm(rel_e[:3, 3] - rel_g[:3, 3]) / path_length(T_g)[-1])


def kitti_rte(est, gt, exclude_first: int = 0, lengths=LENGTHS) -> MetricsReport:
    T_e, T_g, _ = pair_by_time(est, gt)
    T_e, T_g = T_e[exclude_first:], T_g[exclude_first:]
    dist = path_length(T_g)
    segs = []
    inv_e, inv_g = la.inverse_matrix(T_e), la.inverse_matrix(T_g)
    for i in range(len(T_g)):
        for L in lengths:
            j = int(np.searchsorted(dist, dist[i] + L, side="left"))
            if j >= len(T_g):
                continue
            rel_g = inv_g[i] @ T_g[j]
            rel_e = inv_e[i] @ T_e[j]
            err = la.inverse_matrix(rel_g) @ rel_e
            segs.append(SegmentError(i, float(L), 100.0 * np.linalg.norm(err[:3, 3]) / L,
                                     np.degrees(_rotation_angle(err[:3, :3])) / L))
    if not segs:
        raise SequenceTooShort(f"no {min(lengths)} m segment in {dist[-1] if dist.size else 0:.1f} m of ground truth")
    rep = MetricsReport(
        kitti_rte_percent=float(np.mean([s.translation_pct for s in segs])),
        kitti_rre_deg_per_m=float(np.mean([s.rotation_deg_per_m for s in segs])),
        segments=segs,
        excluded_frames=min(exclude_first, len(T_g) + exclude_first),
    )
    return rep


def frame_to_frame_rte(est, gt, exclude_first: int = 0):
    """(mean translation error m, mean rotation error deg, per-pair translation errors)."""
    T_e, T_g, _ = pair_by_time(est, gt)
    T_e, T_g = T_e[exclude_first:], T_g[exclude_first:]
    if len(T_g) < 2:
        raise SequenceTooShort("need at least two frames for frame-to-frame errors")
    rel_g = la.inverse_matrix(T_g[:-1]) @ T_g[1:]
    rel_e = la.inverse_matrix(T_e[:-1]) @ T_e[1:]
    err = la.inverse_matrix(rel_g) @ rel_e
    trans = np.linalg.norm(err[:, :3, 3], axis=1)
    rot = np.degrees(_rotation_angle(err[:, :3, :3]))
    return float(trans.mean()), float(rot.mean()), trans


def evaluate(est, gt, exclude_first: int = 0) -> MetricsReport:
    """Both metrics; the KITTI part is left NaN when the sequence is under 100 m."""
    f2f_t, f2f_r, per_pair = frame_to_frame_rte(est, gt, exclude_first)
    try:
        rep = kitti_rte(est, gt, exclude_first)
    except SequenceTooShort:
        rep = MetricsReport(excluded_frames=exclude_first)
    rep.f2f_rte_m, rep.f2f_rre_deg, rep.f2f_errors = f2f_t, f2f_r, per_pair
    rep.n_pairs = per_pair.size
    return rep
