"""Saliency conditioning: pooled latents, synthetic scenes, and a gaze oracle.

Saliency clips are dense per-frame maps in [0, 1]. They are compressed into
coarse grid latents by average pooling and temporal subsampling before they
ever reach the generator; the raw maps are only needed here and on disk.
"""

from __future__ import annotations

import math
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import maximum_filter

from .core import GazeTrajectory, _readonly
from .errors import DataError

SALB_MAGIC = b"SALB"
SALB_VERSION = 1

# Ornstein-Uhlenbeck mean reversion for blob velocities, 1/s.
_OU_THETA = 0.8
# Peak detection: relative threshold and minimum separation in normalized units.
_PEAK_THRESHOLD = 0.3
_PEAK_MIN_SEP = 0.08
_DWELL_FLOOR_S = 0.2
# A candidate closer than this to the current target does not count as a new one.
_RETARGET_MIN_DIST = 0.05

_RENDER_CHUNK = 256


@dataclass(frozen=True)
class SaliencyClip:
    """Dense saliency maps for one clip: frames (F, H, W) float in [0, 1]."""

    frames: np.ndarray
    rate_hz: float
    video_id: str

    def __post_init__(self):
        frames = np.ascontiguousarray(np.asarray(self.frames, dtype=np.float64))
        if frames.ndim != 3 or frames.shape[0] < 1:
            raise ValueError("frames must have shape (F, H, W) with F >= 1")
        if not np.all(np.isfinite(frames)):
            raise ValueError("saliency values must be finite")
        if frames.min() < 0.0 or frames.max() > 1.0:
            raise ValueError("saliency values must lie in [0, 1]")
        if not (self.rate_hz > 0 and math.isfinite(self.rate_hz)):
            raise ValueError("rate_hz must be positive and finite")
        if not self.video_id:
            raise ValueError("video_id must be non-empty")
        object.__setattr__(self, "frames", _readonly(frames))

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]


@dataclass(frozen=True)
class LatentSequence:
    """Temporally subsampled pooled saliency tokens.

    `tokens` has shape (S, Gh*Gw, 3); the last axis is (pooled value,
    normalized row center, normalized column center). Token set s summarizes
    source frame s * stride_frames.
    """

    tokens: np.ndarray
    grid_h: int
    grid_w: int
    stride_frames: int
    source_rate_hz: float

    def __post_init__(self):
        tokens = np.ascontiguousarray(np.asarray(self.tokens, dtype=np.float64))
        if self.grid_h < 1 or self.grid_w < 1:
            raise ValueError("grid dimensions must be >= 1")
        if self.stride_frames < 1:
            raise ValueError("stride_frames must be >= 1")
        if not (self.source_rate_hz > 0 and math.isfinite(self.source_rate_hz)):
            raise ValueError("source_rate_hz must be positive and finite")
        if tokens.ndim != 3 or tokens.shape[1] != self.grid_h * self.grid_w or tokens.shape[2] != 3:
            raise ValueError(
                f"tokens must have shape (S, {self.grid_h * self.grid_w}, 3), got {tokens.shape}"
            )
        if tokens.shape[0] < 1:
            raise ValueError("need at least one token set")
        if not np.all(np.isfinite(tokens)):
            raise ValueError("latent tokens must be finite")
        object.__setattr__(self, "tokens", _readonly(tokens))

    @property
    def num_sets(self) -> int:
        return self.tokens.shape[0]

    def slice_sets(self, start: int, count: int) -> np.ndarray:
        """Return token sets [start, start + count) as a (count, G, 3) view."""
        if start < 0 or count < 1 or start + count > self.num_sets:
            raise ValueError(
                f"set range [{start}, {start + count}) outside [0, {self.num_sets})"
            )
        return self.tokens[start : start + count]


@dataclass(frozen=True)
class SynthSceneSpec:
    """Parameters of a synthetic moving-blob saliency scene."""

    blob_count: int
    blob_sigma: float
    motion_speed: float
    seed: int
    duration_s: float
    rate_hz: float
    height: int
    width: int

    def __post_init__(self):
        if self.blob_count < 1:
            raise ValueError("blob_count must be >= 1")
        if not (0 < self.blob_sigma < 1):
            raise ValueError("blob_sigma must lie in (0, 1)")
        if self.motion_speed < 0:
            raise ValueError("motion_speed must be >= 0")
        if self.duration_s <= 0 or self.rate_hz <= 0:
            raise ValueError("duration_s and rate_hz must be positive")
        if self.height < 4 or self.width < 4:
            raise ValueError("frame dimensions must be >= 4")

    @property
    def frame_count(self) -> int:
        return max(1, int(round(self.duration_s * self.rate_hz)))


@dataclass(frozen=True)
class OracleParams:
    """Behavioral parameters of the synthetic gaze observer."""

    fixation_dwell_s: float = 2.0
    saccade_dur_s: float = 0.08
    pursuit_gain: float = 0.4
    jitter_sigma: float = 0.004

    def __post_init__(self):
        if self.fixation_dwell_s <= 0 or self.saccade_dur_s <= 0:
            raise ValueError("durations must be positive")
        if not (0 < self.pursuit_gain <= 1):
            raise ValueError("pursuit_gain must lie in (0, 1]")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be >= 0")


def pool_compress(clip: SaliencyClip, grid: tuple[int, int]) -> np.ndarray:
    """Average-pool every frame onto a (grid_h, grid_w) grid.

    The frame is split into equal integer-sized cells; remainder rows and
    columns are absorbed by the last cell along each axis. Returns
    (F, grid_h, grid_w) float64. Each cell holds the plain mean of its pixels,
    so values stay in [0, 1].
    """
    gh, gw = grid
    if gh < 1 or gw < 1:
        raise ValueError("grid dimensions must be >= 1")
    h, w = clip.height, clip.width
    if gh > h or gw > w:
        raise ValueError(f"grid {grid} exceeds frame size ({h}, {w})")
    rh, rw = h // gh, w // gw
    row_starts = np.arange(gh) * rh
    col_starts = np.arange(gw) * rw
    row_sizes = np.diff(np.append(row_starts, h))
    col_sizes = np.diff(np.append(col_starts, w))
    sums = np.add.reduceat(clip.frames, row_starts, axis=1)
    sums = np.add.reduceat(sums, col_starts, axis=2)
    areas = np.outer(row_sizes, col_sizes).astype(np.float64)
    return sums / areas[None, :, :]


def temporal_subsample(
    pooled: np.ndarray, stride_frames: int, source_rate_hz: float
) -> LatentSequence:
    """Keep every stride_frames-th pooled grid and attach spatial position tags."""
    pooled = np.asarray(pooled, dtype=np.float64)
    if pooled.ndim != 3:
        raise ValueError("pooled must have shape (F, Gh, Gw)")
    if stride_frames < 1:
        raise ValueError("stride_frames must be >= 1")
    kept = pooled[::stride_frames]
    s, gh, gw = kept.shape
    rows = (np.arange(gh, dtype=np.float64) + 0.5) / gh
    cols = (np.arange(gw, dtype=np.float64) + 0.5) / gw
    row_tags = np.repeat(rows, gw)
    col_tags = np.tile(cols, gh)
    tokens = np.empty((s, gh * gw, 3), dtype=np.float64)
    tokens[:, :, 0] = kept.reshape(s, gh * gw)
    tokens[:, :, 1] = row_tags[None, :]
    tokens[:, :, 2] = col_tags[None, :]
    return LatentSequence(
        tokens=tokens,
        grid_h=gh,
        grid_w=gw,
        stride_frames=stride_frames,
        source_rate_hz=source_rate_hz,
    )


def flatten_latent_slice(slice_tokens: np.ndarray, stride_frames: int) -> np.ndarray:
    """Flatten a (S, G, 3) latent slice into denoiser tokens (S*G, 4).

    Columns are (value, row, col, temporal center in sample units); set s
    covers source samples [s*stride, (s+1)*stride), so its center is
    (s + 0.5) * stride relative to the slice origin.
    """
    slice_tokens = np.asarray(slice_tokens, dtype=np.float64)
    if slice_tokens.ndim != 3 or slice_tokens.shape[2] != 3:
        raise ValueError("latent slice must have shape (S, G, 3)")
    s, g, _ = slice_tokens.shape
    flat = np.empty((s * g, 4), dtype=np.float64)
    flat[:, :3] = slice_tokens.reshape(s * g, 3)
    centers = (np.arange(s, dtype=np.float64) + 0.5) * stride_frames
    flat[:, 3] = np.repeat(centers, g)
    return flat


def simulate_blob_paths(spec: SynthSceneSpec) -> np.ndarray:
    """Simulate blob center motion; returns (F, blob_count, 2) in [0, 1].

    Each blob moves with an Ornstein-Uhlenbeck velocity (mean speed close to
    `motion_speed` units/s) and reflects off the frame boundary.
    """
    rng = np.random.default_rng(spec.seed)
    frames = spec.frame_count
    b = spec.blob_count
    dt = 1.0 / spec.rate_hz
    # Per-axis stationary std such that E[speed] = motion_speed for 2-d
    # Gaussian velocity: E|v| = sigma * sqrt(pi/2).
    sigma_axis = spec.motion_speed * math.sqrt(2.0 / math.pi)
    pos = rng.uniform(0.15, 0.85, size=(b, 2))
    vel = rng.normal(0.0, sigma_axis, size=(b, 2))
    diffusion = sigma_axis * math.sqrt(2.0 * _OU_THETA * dt)
    out = np.empty((frames, b, 2), dtype=np.float64)
    out[0] = pos
    for f in range(1, frames):
        vel = vel - _OU_THETA * vel * dt + diffusion * rng.standard_normal((b, 2))
        pos = pos + vel * dt
        for i in range(b):
            for ax in range(2):
                p = pos[i, ax]
                if p < 0.0:
                    pos[i, ax] = -p
                    vel[i, ax] = -vel[i, ax]
                elif p > 1.0:
                    pos[i, ax] = 2.0 - p
                    vel[i, ax] = -vel[i, ax]
        out[f] = pos
    return out


def synth_scene(spec: SynthSceneSpec, video_id: str = "synth") -> SaliencyClip:
    """Render a moving-Gaussian-blob saliency clip, each frame peak-normalized to 1."""
    centers = simulate_blob_paths(spec)
    frames = render_blob_frames(centers, spec.blob_sigma, spec.height, spec.width)
    return SaliencyClip(frames=frames, rate_hz=spec.rate_hz, video_id=video_id)


def render_blob_frames(
    centers: np.ndarray, blob_sigma: float, height: int, width: int
) -> np.ndarray:
    """Render Gaussian blobs at `centers` (F, B, 2); frames normalized to max 1."""
    centers = np.asarray(centers, dtype=np.float64)
    f = centers.shape[0]
    xs = (np.arange(width, dtype=np.float64) + 0.5) / width
    ys = (np.arange(height, dtype=np.float64) + 0.5) / height
    inv = 1.0 / (2.0 * blob_sigma * blob_sigma)
    out = np.empty((f, height, width), dtype=np.float64)
    for lo in range(0, f, _RENDER_CHUNK):
        hi = min(lo + _RENDER_CHUNK, f)
        c = centers[lo:hi]
        dx2 = (xs[None, None, :] - c[:, :, 0:1]) ** 2
        dy2 = (ys[None, None, :] - c[:, :, 1:2]) ** 2
        field = np.exp(-(dx2[:, :, None, :] + dy2[:, :, :, None]) * inv).sum(axis=1)
        field /= field.max(axis=(1, 2), keepdims=True)
        out[lo:hi] = field
    return np.clip(out, 0.0, 1.0)


def _refine_axis(f_lo: float, f_c: float, f_hi: float) -> float:
    """Sub-pixel peak offset from a log-parabola through three samples.

    Exact for a pure Gaussian profile; clamped to half a pixel otherwise.
    """
    if f_lo <= 1e-12 or f_c <= 1e-12 or f_hi <= 1e-12:
        return 0.0
    l_lo, l_c, l_hi = math.log(f_lo), math.log(f_c), math.log(f_hi)
    denom = l_lo - 2.0 * l_c + l_hi
    if abs(denom) < 1e-12:
        return 0.0
    off = 0.5 * (l_lo - l_hi) / denom
    return min(0.5, max(-0.5, off))


def find_peaks(
    frame: np.ndarray,
    threshold: float = _PEAK_THRESHOLD,
    min_sep: float = _PEAK_MIN_SEP,
) -> list[tuple[np.ndarray, float]]:
    """Detect local saliency maxima with sub-pixel positions.

    Returns (position, value) pairs sorted by descending value; positions are
    normalized (x, y). Candidates closer than `min_sep` to a stronger peak are
    suppressed.
    """
    frame = np.asarray(frame, dtype=np.float64)
    h, w = frame.shape
    local_max = frame == maximum_filter(frame, size=5, mode="nearest")
    mask = local_max & (frame >= threshold)
    rows, cols = np.nonzero(mask)
    order = np.argsort(frame[rows, cols])[::-1]
    peaks: list[tuple[np.ndarray, float]] = []
    for idx in order:
        i, j = int(rows[idx]), int(cols[idx])
        off_x = off_y = 0.0
        if 0 < j < w - 1:
            off_x = _refine_axis(frame[i, j - 1], frame[i, j], frame[i, j + 1])
        if 0 < i < h - 1:
            off_y = _refine_axis(frame[i - 1, j], frame[i, j], frame[i + 1, j])
        pos = np.array([(j + 0.5 + off_x) / w, (i + 0.5 + off_y) / h])
        if any(np.hypot(*(pos - p)) < min_sep for p, _ in peaks):
            continue
        peaks.append((pos, float(frame[i, j])))
    return peaks


def synth_gaze_oracle(
    clip: SaliencyClip,
    seed: int,
    params: OracleParams = OracleParams(),
    observer_id: str = "oracle",
) -> GazeTrajectory:
    """Simulate one observer watching a saliency clip.

    The observer fixates the currently attended saliency peak with first-order
    pursuit (per-frame correction `pursuit_gain` toward the peak), dwells for
    an exponentially distributed time, then saccades to another peak along a
    minimum-jerk profile. Measurement jitter is added to emitted samples only,
    never to the internal state.
    """
    rng = np.random.default_rng(seed)
    dt = 1.0 / clip.rate_hz
    all_peaks = [find_peaks(f) for f in clip.frames]
    if not all_peaks[0]:
        raise DataError(f"{clip.video_id}: no saliency peak in first frame")

    def draw_dwell() -> float:
        return max(_DWELL_FLOOR_S, rng.exponential(params.fixation_dwell_s))

    def track(peaks, ref: np.ndarray) -> np.ndarray:
        best = min(peaks, key=lambda pv: float(np.hypot(*(pv[0] - ref))))
        return best[0]

    # Initial target drawn with probability proportional to peak value.
    first = all_peaks[0]
    weights = np.array([v for _, v in first])
    target = first[rng.choice(len(first), p=weights / weights.sum())][0].copy()
    gaze = target.copy()
    dwell = draw_dwell()
    in_saccade = False
    sac_from = np.zeros(2)
    sac_goal = target.copy()
    sac_t = 0.0

    emitted = np.empty((clip.frame_count, 2), dtype=np.float64)
    for f in range(clip.frame_count):
        peaks = all_peaks[f] if all_peaks[f] else [(target.copy(), 1.0)]
        if in_saccade:
            sac_goal = track(peaks, sac_goal)
            sac_t += dt
            tau = min(1.0, sac_t / params.saccade_dur_s)
            s = tau * tau * tau * (10.0 + tau * (-15.0 + 6.0 * tau))
            gaze = sac_from + (sac_goal - sac_from) * s
            if tau >= 1.0:
                in_saccade = False
                target = sac_goal
                dwell = draw_dwell()
        else:
            # Correct toward the last observed target position, then update
            # the track; one frame of sensing latency gives the first-order
            # tracker its steady-state offset speed/(gain*rate).
            gaze = gaze + params.pursuit_gain * (target - gaze)
            target = track(peaks, target)
            dwell -= dt
            if dwell <= 0.0:
                candidates = [
                    (p, v)
                    for p, v in peaks
                    if float(np.hypot(*(p - target))) > _RETARGET_MIN_DIST
                ]
                if candidates:
                    cw = np.array([v for _, v in candidates])
                    pick = candidates[rng.choice(len(candidates), p=cw / cw.sum())][0]
                    in_saccade = True
                    sac_from = gaze.copy()
                    sac_goal = pick.copy()
                    sac_t = 0.0
                else:
                    dwell = draw_dwell()
        sample = gaze
        if params.jitter_sigma > 0:
            sample = gaze + rng.normal(0.0, params.jitter_sigma, size=2)
        emitted[f] = np.clip(sample, 0.0, 1.0)

    times = np.arange(clip.frame_count, dtype=np.float64) / clip.rate_hz
    return GazeTrajectory(
        t=times,
        xy=emitted,
        rate_hz=clip.rate_hz,
        observer_id=observer_id,
        video_id=clip.video_id,
    )


def random_walk_like(traj: GazeTrajectory, seed: int, observer_id: str = "walk") -> GazeTrajectory:
    """Reflected Gaussian random walk with per-step scale matched to `traj`.

    Starts at the reference trajectory's first point and draws per-axis steps
    with the reference's RMS per-step displacement, reflecting at the frame
    boundary. Length, timestamps and rate match the reference.
    """
    if len(traj) < 2:
        raise DataError("reference trajectory too short for a matched random walk")
    rng = np.random.default_rng(seed)
    steps = np.diff(traj.xy, axis=0)
    scale = math.sqrt(float(np.mean(steps**2)))
    draws = rng.normal(0.0, scale, size=steps.shape)
    path = np.concatenate([traj.xy[0:1], traj.xy[0:1] + np.cumsum(draws, axis=0)], axis=0)
    # Fold into [0, 1]: reflect with period 2.
    folded = np.mod(path, 2.0)
    folded = np.where(folded > 1.0, 2.0 - folded, folded)
    return GazeTrajectory(
        t=traj.t,
        xy=folded,
        rate_hz=traj.rate_hz,
        observer_id=observer_id,
        video_id=traj.video_id,
    )


def write_salb(clip: SaliencyClip, path: str | Path) -> None:
    """Write a clip in the SALB container (little-endian, float32 row-major)."""
    path = Path(path)
    header = struct.pack(
        "<4sIIII", SALB_MAGIC, SALB_VERSION, clip.frame_count, clip.height, clip.width
    )
    data = clip.frames.astype("<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(data)
    except OSError as exc:
        raise DataError(f"{path}: cannot write: {exc}") from exc


def read_salb(path: str | Path, rate_hz: float, video_id: str | None = None) -> SaliencyClip:
    """Read a SALB file; the container carries no rate, so the caller supplies it."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read: {exc}") from exc
    if len(blob) < 20:
        raise DataError(f"{path}: truncated header ({len(blob)} bytes, need 20)")
    magic, version, frames, h, w = struct.unpack_from("<4sIIII", blob, 0)
    if magic != SALB_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r} at offset 0")
    if version != SALB_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    if frames < 1 or h < 1 or w < 1:
        raise DataError(f"{path}: bad dimensions F={frames} H={h} W={w}")
    expected = 20 + frames * h * w * 4
    if len(blob) != expected:
        raise DataError(
            f"{path}: payload size mismatch at offset 20: have {len(blob) - 20} bytes, "
            f"expected {expected - 20}"
        )
    values = np.frombuffer(blob, dtype="<f4", offset=20).astype(np.float64)
    values = values.reshape(frames, h, w)
    if not np.all(np.isfinite(values)) or values.min() < 0.0 or values.max() > 1.0:
        raise DataError(f"{path}: values outside [0, 1]")
    return SaliencyClip(
        frames=values, rate_hz=rate_hz, video_id=video_id or path.stem
    )


def write_pgm_frames(clip: SaliencyClip, directory: str | Path) -> None:
    """Write clip frames as binary PGM files named %06d.pgm (values scaled by 255)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(clip.frame_count):
        pixels = np.round(clip.frames[i] * 255.0).astype(np.uint8)
        header = f"P5\n{clip.width} {clip.height}\n255\n".encode("ascii")
        (directory / f"{i:06d}.pgm").write_bytes(header + pixels.tobytes())


def _parse_pgm(blob: bytes, path: Path) -> np.ndarray:
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = re.match(rb"(?:\s+|#[^\n]*\n)*([^\s#]+)", blob[pos:])
        if m is None:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(m.group(1))
        pos += m.end()
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise DataError(f"{path}: bad PGM header field: {exc}") from exc
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    data = blob[pos + 1 : pos + 1 + w * h]
    if len(data) != w * h:
        raise DataError(f"{path}: expected {w * h} pixel bytes, got {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w) / 255.0


def read_pgm_dir(
    directory: str | Path, rate_hz: float, video_id: str | None = None
) -> SaliencyClip:
    """Read a directory of %06d.pgm frames as a saliency clip."""
    directory = Path(directory)
    files = sorted(directory.glob("*.pgm"))
    if not files:
        raise DataError(f"{directory}: no .pgm frames")
    frames = []
    for i, f in enumerate(files):
        if f.stem != f"{i:06d}":
            raise DataError(f"{directory}: expected frame {i:06d}.pgm, found {f.name}")
        frames.append(_parse_pgm(f.read_bytes(), f))
    if len({fr.shape for fr in frames}) != 1:
        raise DataError(f"{directory}: inconsistent frame sizes")
    stack = np.stack(frames, axis=0)
    return SaliencyClip(
        frames=stack, rate_hz=rate_hz, video_id=video_id or directory.name
    )
