"""On-disk formats.

A dataset directory holds ``frames/NNNNNN.bin`` (little-endian float32
records ``x y z rel_t doppler``, NaN doppler when absent), ``manifest.txt``
with lines ``index start end`` and optionally ``groundtruth.txt``. Pose
files carry ``timestamp r00 r01 r02 t0 r10 ... t2`` per line: the
world-from-vehicle transform, i.e. the inverse of the estimated ``T_vi``.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import MalformedRecord, ReaderError, TimestampOutOfRange
from .frontend import LidarFrame
from .liealg import Pose

log = logging.getLogger(__name__)

RECORD = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("t", "<f4"), ("doppler", "<f4")])
RECORD_BYTES = RECORD.itemsize  # 20


@dataclass(frozen=True)
class ManifestEntry:
    index: int
    start: float
    end: float


def frame_path(root, index: int) -> Path:
    return Path(root) / "frames" / f"{index:06d}.bin"


def read_manifest(path) -> list:
    entries = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise MalformedRecord(f"{path}:{n}: expected 'index start end'")
            entries.append(ManifestEntry(int(parts[0]), float(parts[1]), float(parts[2])))
    return entries


def write_manifest(entries, path) -> None:
    with open(path, "w") as fh:
        for e in entries:
            fh.write(f"{e.index} {e.start:.9f} {e.end:.9f}\n")


def encode_frame(frame: LidarFrame) -> bytes:
    rec = np.empty(len(frame), dtype=RECORD)
    rec["x"], rec["y"], rec["z"] = frame.points.T
    rec["t"] = frame.timestamps - frame.start_time
    rec["doppler"] = np.nan if frame.doppler is None else frame.doppler
    return rec.tobytes()


def decode_frame(data: bytes, entry: ManifestEntry) -> LidarFrame:
    if len(data) % RECORD_BYTES:
        raise MalformedRecord(f"frame {entry.index}: {len(data)} bytes is not a multiple of {RECORD_BYTES}")
    rec = np.frombuffer(data, dtype=RECORD)
    rel = rec["t"].astype(float)
    span = entry.end - entry.start
    # allow for float32 rounding of the relative stamp
    slack = 4 * np.finfo(np.float32).eps * max(span, 1.0)
    if rel.size and (rel.min() < -slack or rel.max() > span + slack):
        raise TimestampOutOfRange(f"frame {entry.index}: relative timestamps outside [0, {span}]")
    points = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(float)
    doppler = rec["doppler"].astype(float)
    times = np.clip(entry.start + rel, entry.start, entry.end)
    return LidarFrame(entry.index, entry.start, entry.end, points, times,
                      doppler if np.any(np.isfinite(doppler)) else None)


def read_frame(path, entry: ManifestEntry) -> LidarFrame:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ReaderError(str(exc)) from exc
    frame = decode_frame(data, entry)
    log.debug("frame %d: %d points read", entry.index, len(frame))
    return frame


def write_frame(frame: LidarFrame, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_frame(frame))


class DatasetReader:
    """Iterates frames of a dataset directory in manifest order.

    Any object yielding LidarFrames works as a reader for the pipeline;
    adapters for other logs only need to provide ``__iter__``.
    """

    def __init__(self, root, limit: Optional[int] = None):
        self.root = Path(root)
        manifest = self.root / "manifest.txt"
        if not manifest.exists():
            raise ReaderError(f"{manifest} not found")
        self.entries = read_manifest(manifest)
        if limit is not None:
            self.entries = self.entries[:limit]

    def __len__(self):
        return len(self.entries)

    def __iter__(self) -> Iterator[LidarFrame]:
        for e in self.entries:
            yield read_frame(frame_path(self.root, e.index), e)

    def groundtruth(self):
        return read_poses(self.root / "groundtruth.txt")


def write_dataset(frames, root, groundtruth=None) -> None:
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    entries = []
    for f in frames:
        write_frame(f, frame_path(root, f.index))
        entries.append(ManifestEntry(f.index, f.start_time, f.end_time))
    write_manifest(entries, root / "manifest.txt")
    if groundtruth is not None:
        write_poses(*groundtruth, root / "groundtruth.txt")


# -- pose files -------------------------------------------------------------------

def read_poses(path):
    """(timestamps, T_iv stack (N,4,4)) from a pose file."""
    try:
        raw = np.loadtxt(path, ndmin=2)
    except OSError as exc:
        raise ReaderError(str(exc)) from exc
    if raw.size == 0:
        return np.zeros(0), np.zeros((0, 4, 4))
    if raw.shape[1] != 13:
        raise MalformedRecord(f"{path}: expected 13 columns, got {raw.shape[1]}")
    T = np.tile(np.eye(4), (raw.shape[0], 1, 1))
    T[:, :3, :] = raw[:, 1:].reshape(-1, 3, 4)
    R = T[:, :3, :3]
    err = np.abs(np.einsum("nji,njk->nik", R, R) - np.eye(3)).max() if len(T) else 0.0
    if err > 1e-6:
        raise MalformedRecord(f"{path}: rotation not orthonormal (error {err:.2e})")
    return raw[:, 0].copy(), T


def write_poses(times, T_iv, path) -> None:
    times = np.asarray(times, dtype=float)
    T_iv = np.asarray(T_iv, dtype=float).reshape(-1, 4, 4)
    rows = np.column_stack([times, T_iv[:, :3, :].reshape(-1, 12)])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, rows, fmt="%.17g")


def write_trajectory(result, path) -> None:
    """One line per published frame; poses written world-from-vehicle."""
    times = np.array([r.time for r in result.records])
    T_iv = np.array([r.pose.inverse().matrix() for r in result.records]).reshape(-1, 4, 4)
    write_poses(times, T_iv, path)


def read_trajectory(path):
    return read_poses(path)


def ensure_dir(path) -> Path:
    os.makedirs(path, exist_ok=True)
    return Path(path)
