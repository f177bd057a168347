"""Gaze trajectory data model: CSV ingestion, normalization, resampling, windowing.

Coordinates are stored normalized to [0, 1] x [0, 1] (origin at the top-left
frame corner); CSV files on disk carry pixel coordinates. Timestamps are
seconds from clip start.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DataError

logger = logging.getLogger(__name__)

GAZE_CSV_HEADER = ("t", "x", "y", "observer")


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def derive_seed(*parts: int) -> int:
    """Mix integer parts into one 64-bit stream seed, stable across platforms."""
    ss = np.random.SeedSequence(list(parts))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class VideoMeta:
    """Geometry and timing of a stimulus clip; pixel content lives elsewhere."""

    video_id: str
    width_px: int
    height_px: int
    rate_hz: float
    frame_count: int

    def __post_init__(self):
        if not self.video_id:
            raise ValueError("video_id must be non-empty")
        if self.width_px <= 0 or self.height_px <= 0:
            raise ValueError("frame dimensions must be positive")
        if self.frame_count <= 0:
            raise ValueError("frame_count must be positive")
        if not (self.rate_hz > 0 and math.isfinite(self.rate_hz)):
            raise ValueError("rate_hz must be positive and finite")

    @property
    def duration_s(self) -> float:
        return self.frame_count / self.rate_hz


@dataclass(frozen=True)
class GazeSample:
    """One gaze fixation sample in normalized coordinates."""

    t: float
    x: float
    y: float


@dataclass(frozen=True)
class WindowSpec:
    """Model window layout: history_len conditioning samples, predict_len generated."""

    history_len: int
    predict_len: int

    def __post_init__(self):
        if self.history_len < 0:
            raise ValueError("history_len must be >= 0")
        if self.predict_len < 1:
            raise ValueError("predict_len must be >= 1")

    @property
    def window_len(self) -> int:
        return self.history_len + self.predict_len


@dataclass(frozen=True)
class GazeTrajectory:
    """A single observer's gaze path over one clip.

    `t` has shape (N,) with strictly increasing finite values; `xy` has shape
    (N, 2) with both coordinates in [0, 1]. `clamp_count` records how many
    ingested samples had to be clipped into frame bounds.
    """

    t: np.ndarray
    xy: np.ndarray
    rate_hz: float
    observer_id: str
    video_id: str
    clamp_count: int = 0

    def __post_init__(self):
        t = np.ascontiguousarray(np.asarray(self.t, dtype=np.float64))
        xy = np.ascontiguousarray(np.asarray(self.xy, dtype=np.float64))
        if t.ndim != 1 or t.size < 1:
            raise ValueError("t must be a 1-d array with at least one sample")
        if xy.shape != (t.size, 2):
            raise ValueError(f"xy shape {xy.shape} does not match t shape {t.shape}")
        if not np.all(np.isfinite(t)) or not np.all(np.isfinite(xy)):
            raise ValueError("timestamps and coordinates must be finite")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise ValueError("timestamps must be strictly increasing")
        if xy.min() < 0.0 or xy.max() > 1.0:
            raise ValueError("coordinates must lie in [0, 1]")
        if not (self.rate_hz > 0 and math.isfinite(self.rate_hz)):
            raise ValueError("rate_hz must be positive and finite")
        if self.clamp_count < 0:
            raise ValueError("clamp_count must be >= 0")
        object.__setattr__(self, "t", _readonly(t))
        object.__setattr__(self, "xy", _readonly(xy))

    def __len__(self) -> int:
        return self.t.size

    def sample(self, i: int) -> GazeSample:
        return GazeSample(float(self.t[i]), float(self.xy[i, 0]), float(self.xy[i, 1]))

    def samples(self) -> Iterator[GazeSample]:
        for i in range(len(self)):
            yield self.sample(i)

    @property
    def duration_s(self) -> float:
        return float(self.t[-1] - self.t[0])


@dataclass(frozen=True)
class WindowSet:
    """Fixed-length windows cut from one trajectory.

    `windows` has shape (num, n, 2); window i covers source samples
    [starts[i], starts[i] + n). `too_short` marks a trajectory shorter than
    one full window, in which case `windows` is empty.
    """

    windows: np.ndarray
    starts: np.ndarray
    spec: WindowSpec
    too_short: bool = False

    def __post_init__(self):
        windows = np.asarray(self.windows, dtype=np.float64)
        starts = np.asarray(self.starts, dtype=np.int64)
        n = self.spec.window_len
        if windows.ndim != 3 or windows.shape[1:] != (n, 2):
            raise ValueError(f"windows must have shape (num, {n}, 2)")
        if starts.shape != (windows.shape[0],):
            raise ValueError("starts length must match window count")
        object.__setattr__(self, "windows", _readonly(windows))
        object.__setattr__(self, "starts", _readonly(starts))

    def __len__(self) -> int:
        return self.windows.shape[0]


def normalize_points(points_px: np.ndarray, meta: VideoMeta) -> np.ndarray:
    """Map pixel coordinates (N, 2) into the unit square without clamping."""
    pts = np.asarray(points_px, dtype=np.float64)
    return pts / np.array([meta.width_px, meta.height_px], dtype=np.float64)


def denormalize_points(points: np.ndarray, meta: VideoMeta) -> np.ndarray:
    """Map normalized coordinates (N, 2) back to pixel space."""
    pts = np.asarray(points, dtype=np.float64)
    return pts * np.array([meta.width_px, meta.height_px], dtype=np.float64)


def ingest_gaze_csv(path: str | Path, meta: VideoMeta) -> list[GazeTrajectory]:
    """Read one gaze CSV and return one trajectory per observer.

    The file must be UTF-8 with header ``t,x,y,observer`` and pixel-space
    coordinates. Rows are grouped by observer, sorted by timestamp (stable),
    exact-duplicate timestamps dropped keeping the first occurrence, and
    coordinates normalized then clamped into [0, 1] with the clamped sample
    count recorded on the trajectory. Each trajectory's rate is estimated from
    its median timestamp spacing; `meta.rate_hz` is the fallback for
    single-sample observers. Trajectories come back sorted by observer id.
    """
    path = Path(path)
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise DataError(f"{path}: cannot open: {exc}") from exc
    per_observer: dict[str, list[tuple[float, float, float, int]]] = {}
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        if tuple(h.strip() for h in header) != GAZE_CSV_HEADER:
            raise DataError(
                f"{path}: bad header {header!r}, expected {','.join(GAZE_CSV_HEADER)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"{path}: line {lineno}: expected 4 fields, got {len(row)}")
            try:
                t = float(row[0])
                x = float(row[1])
                y = float(row[2])
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: non-numeric field: {exc}") from exc
            if not (math.isfinite(t) and math.isfinite(x) and math.isfinite(y)):
                raise DataError(f"{path}: line {lineno}: non-finite value")
            observer = row[3].strip()
            if not observer:
                raise DataError(f"{path}: line {lineno}: empty observer id")
            per_observer.setdefault(observer, []).append((t, x, y, lineno))
    if not per_observer:
        raise DataError(f"{path}: no gaze rows")

    out = []
    for observer in sorted(per_observer):
        rows = sorted(per_observer[observer], key=lambda r: r[0])
        kept: list[tuple[float, float, float]] = []
        dropped = 0
        for t, x, y, _ in rows:
            if kept and t == kept[-1][0]:
                dropped += 1
                continue
            kept.append((t, x, y))
        if dropped:
            logger.warning(
                "%s: observer %s: dropped %d duplicate-timestamp rows", path, observer, dropped
            )
        arr = np.array(kept, dtype=np.float64)
        t_arr = arr[:, 0]
        xy = normalize_points(arr[:, 1:3], meta)
        clamped = np.clip(xy, 0.0, 1.0)
        clamp_count = int(np.sum(np.any(clamped != xy, axis=1)))
        if clamp_count:
            logger.warning(
                "%s: observer %s: clamped %d out-of-frame samples", path, observer, clamp_count
            )
        if t_arr.size > 1:
            rate = 1.0 / float(np.median(np.diff(t_arr)))
        else:
            rate = meta.rate_hz
        out.append(
            GazeTrajectory(
                t=t_arr,
                xy=clamped,
                rate_hz=rate,
                observer_id=observer,
                video_id=meta.video_id,
                clamp_count=clamp_count,
            )
        )
    return out


def resample(traj: GazeTrajectory, target_hz: float) -> GazeTrajectory:
    """Linearly resample a trajectory onto a uniform grid at `target_hz`.

    The grid starts at the first source timestamp and covers the source span;
    coordinates are interpolated per axis. Raises DataError for trajectories
    with fewer than two samples.
    """
    if not (target_hz > 0 and math.isfinite(target_hz)):
        raise ValueError("target_hz must be positive and finite")
    if len(traj) < 2:
        raise DataError(
            f"{traj.video_id}/{traj.observer_id}: need >= 2 samples to resample"
        )
    t0 = float(traj.t[0])
    span = float(traj.t[-1]) - t0
    count = int(math.floor(span * target_hz + 1e-9)) + 1
    times = t0 + np.arange(count, dtype=np.float64) / target_hz
    x = np.interp(times, traj.t, traj.xy[:, 0])
    y = np.interp(times, traj.t, traj.xy[:, 1])
    return GazeTrajectory(
        t=times,
        xy=np.stack([x, y], axis=1),
        rate_hz=target_hz,
        observer_id=traj.observer_id,
        video_id=traj.video_id,
        clamp_count=traj.clamp_count,
    )


def to_windows(traj: GazeTrajectory, spec: WindowSpec, stride: int) -> WindowSet:
    """Cut overlapping fixed-length windows with the given start stride."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n = spec.window_len
    total = len(traj)
    if total < n:
        return WindowSet(
            windows=np.empty((0, n, 2), dtype=np.float64),
            starts=np.empty((0,), dtype=np.int64),
            spec=spec,
            too_short=True,
        )
    num = (total - n) // stride + 1
    starts = np.arange(num, dtype=np.int64) * stride
    windows = np.stack([traj.xy[s : s + n] for s in starts], axis=0)
    return WindowSet(windows=windows, starts=starts, spec=spec, too_short=False)


def write_trajectory_csv(traj: GazeTrajectory, meta: VideoMeta, path: str | Path) -> None:
    """Write a trajectory as ``t,x,y,observer`` rows in pixel coordinates.

    Values use fixed 6-decimal formatting so repeated writes are byte
    identical and a write/ingest round trip stays within 1e-6 px.
    """
    if "," in traj.observer_id:
        raise DataError(f"observer id {traj.observer_id!r} must not contain commas")
    path = Path(path)
    px = denormalize_points(traj.xy, meta)
    lines = [",".join(GAZE_CSV_HEADER)]
    for i in range(len(traj)):
        lines.append(
            f"{traj.t[i]:.6f},{px[i, 0]:.6f},{px[i, 1]:.6f},{traj.observer_id}"
        )
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise DataError(f"{path}: cannot write: {exc}") from exc
