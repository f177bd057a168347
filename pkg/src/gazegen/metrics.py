"""Scanpath similarity metrics and the best/mean evaluation protocol.

Distances (Levenshtein on quantized cell strings, discrete Frechet, DTW) are
lower-better; maximum temporal correlation is higher-better. The protocol
compares every generated trajectory against every ground-truth path of the
same clip, keeps per-path best and mean values, and averages per video and
then across videos with equal weight.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from .core import GazeTrajectory, VideoMeta, denormalize_points
from .errors import DataError

METRIC_NAMES = ("levenshtein", "discrete_frechet", "dtw", "max_temporal_correlation")
HIGHER_BETTER = frozenset({"max_temporal_correlation"})

_jitkw = {"cache": True, "nogil": True}


@dataclass(frozen=True)
class MetricConfig:
    """Shared metric parameters.

    `space` selects the coordinate frame for Frechet/DTW: "pixels" scales by
    the video geometry, "normalized" keeps the unit square. `grid` quantizes
    trajectories for the Levenshtein string; `max_lag_s` bounds the temporal
    correlation search.
    """

    grid: tuple[int, int] = (8, 8)
    max_lag_s: float = 2.0
    space: str = "pixels"

    def __post_init__(self):
        if self.grid[0] < 1 or self.grid[1] < 1:
            raise ValueError("grid dimensions must be >= 1")
        if self.max_lag_s < 0:
            raise ValueError("max_lag_s must be >= 0")
        if self.space not in ("pixels", "normalized"):
            raise ValueError(f"unknown space {self.space!r}")


def quantize_to_string(traj: GazeTrajectory, grid: tuple[int, int] = (8, 8)) -> np.ndarray:
    """Map each sample to a row-major cell index on a (rows, cols) grid.

    Cell boundaries split the unit square evenly; the coordinate 1.0 falls in
    the last cell. Returns an int64 array of length len(traj).
    """
    rows, cols = grid
    if rows < 1 or cols < 1:
        raise ValueError("grid dimensions must be >= 1")
    r = np.minimum((traj.xy[:, 1] * rows).astype(np.int64), rows - 1)
    c = np.minimum((traj.xy[:, 0] * cols).astype(np.int64), cols - 1)
    return r * cols + c


@njit(**_jitkw)
def _lev_kernel(a, b):
    n, m = a.shape[0], b.shape[0]
    prev = np.arange(m + 1)
    curr = np.empty(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        curr[0] = i
        ai = a[i - 1]
        for j in range(1, m + 1):
            cost = 0 if ai == b[j - 1] else 1
            best = prev[j - 1] + cost
            if prev[j] + 1 < best:
                best = prev[j] + 1
            if curr[j - 1] + 1 < best:
                best = curr[j - 1] + 1
            curr[j] = best
        prev, curr = curr, prev
    return prev[m]


def levenshtein(a: np.ndarray, b: np.ndarray) -> int:
    """Edit distance between two integer symbol strings.

    Parameters
    ----------
    a, b : ndarray
        1-d integer arrays (e.g. quantized cell indices).

    Returns
    -------
    int
        Minimum number of insertions, deletions and substitutions turning
        `a` into `b`.
    """
    a = np.ascontiguousarray(np.asarray(a, dtype=np.int64))
    b = np.ascontiguousarray(np.asarray(b, dtype=np.int64))
    if a.ndim != 1 or b.ndim != 1:
        raise ValueError("inputs must be 1-d symbol arrays")
    if a.size == 0 or b.size == 0:
        raise ValueError("empty symbol string")
    return int(_lev_kernel(a, b))


def _point_matrix(points: np.ndarray, label: str) -> np.ndarray:
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64))
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] == 0:
        raise ValueError(f"{label} must be a non-empty (N, 2) point array")
    return pts


def _dist_matrix(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    diff = p[:, None, :] - q[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2))


@njit(**_jitkw)
def _frechet_kernel(dist):
    n, m = dist.shape
    prev = np.empty(m)
    curr = np.empty(m)
    prev[0] = dist[0, 0]
    for j in range(1, m):
        prev[j] = max(prev[j - 1], dist[0, j])
    for i in range(1, n):
        curr[0] = max(prev[0], dist[i, 0])
        for j in range(1, m):
            reach = min(prev[j], prev[j - 1], curr[j - 1])
            curr[j] = max(reach, dist[i, j])
        prev, curr = curr, prev
    return prev[m - 1]


def discrete_frechet(p: np.ndarray, q: np.ndarray) -> float:
    """Discrete Frechet distance between two polygonal curves.

    Parameters
    ----------
    p, q : ndarray
        Point sequences of shape (N, 2) and (M, 2); lengths may differ.

    Returns
    -------
    float
        The minimax coupling distance: the smallest leash length that lets
        two walkers traverse both curves monotonically.
    """
    p = _point_matrix(p, "p")
    q = _point_matrix(q, "q")
    return float(_frechet_kernel(_dist_matrix(p, q)))


@njit(**_jitkw)
def _dtw_kernel(dist):
    n, m = dist.shape
    prev = np.empty(m)
    curr = np.empty(m)
    prev[0] = dist[0, 0]
    for j in range(1, m):
        prev[j] = prev[j - 1] + dist[0, j]
    for i in range(1, n):
        curr[0] = prev[0] + dist[i, 0]
        for j in range(1, m):
            curr[j] = dist[i, j] + min(prev[j], prev[j - 1], curr[j - 1])
        prev, curr = curr, prev
    return prev[m - 1]


def dtw(p: np.ndarray, q: np.ndarray) -> float:
    """Dynamic-time-warping alignment cost between two point sequences.

    Parameters
    ----------
    p, q : ndarray
        Point sequences of shape (N, 2) and (M, 2); lengths may differ.

    Returns
    -------
    float
        Sum of Euclidean distances along the optimal monotone alignment
        (unit step pattern, no normalization).
    """
    p = _point_matrix(p, "p")
    q = _point_matrix(q, "q")
    return float(_dtw_kernel(_dist_matrix(p, q)))


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    sa = a - a.mean()
    sb = b - b.mean()
    va = float(sa @ sa)
    vb = float(sb @ sb)
    if va <= 0.0 or vb <= 0.0:
        return 0.0
    r = float(sa @ sb) / math.sqrt(va * vb)
    return min(1.0, max(-1.0, r))


def max_temporal_correlation(p: np.ndarray, q: np.ndarray, max_lag: int) -> float:
    """Best mean per-axis Pearson correlation over integer sample lags.

    Parameters
    ----------
    p, q : ndarray
        Equal-rate point sequences (N, 2) and (M, 2).
    max_lag : int
        Lags -max_lag..max_lag (in samples) are scanned; the overlapping
        segments are correlated per axis and the two axes averaged. A
        zero-variance axis contributes 0.

    Returns
    -------
    float
        Maximum of the lagged correlation; raises ValueError when no lag
        leaves an overlap of at least two samples.
    """
    p = _point_matrix(p, "p")
    q = _point_matrix(q, "q")
    if max_lag < 0:
        raise ValueError("max_lag must be >= 0")
    n, m = p.shape[0], q.shape[0]
    best = None
    for lag in range(-max_lag, max_lag + 1):
        # Positive lag shifts q forward: compare p[i + lag] with q[i].
        lo_p = max(0, lag)
        lo_q = max(0, -lag)
        overlap = min(n - lo_p, m - lo_q)
        if overlap < 2:
            continue
        ps = p[lo_p : lo_p + overlap]
        qs = q[lo_q : lo_q + overlap]
        r = 0.5 * (_pearson(ps[:, 0], qs[:, 0]) + _pearson(ps[:, 1], qs[:, 1]))
        if best is None or r > best:
            best = r
    if best is None:
        raise ValueError("no lag leaves an overlap of >= 2 samples")
    return float(best)


@dataclass(frozen=True)
class ScoreReport:
    """Aggregated protocol scores.

    `per_video` maps video id -> metric -> {"mean": .., "best": ..};
    `overall` holds the unweighted average over videos. Construction enforces
    the protocol sanity invariant: best <= mean for distances and
    best >= mean for correlations, per video and overall.
    """

    per_video: dict[str, dict[str, dict[str, float]]]
    overall: dict[str, dict[str, float]]
    gt_counts: dict[str, int]
    gen_counts: dict[str, int]

    def __post_init__(self):
        if not self.per_video:
            raise ValueError("report contains no videos")
        scopes = list(self.per_video.items()) + [("overall", self.overall)]
        for scope, by_metric in scopes:
            if set(by_metric) != set(METRIC_NAMES):
                raise ValueError(f"{scope}: metrics {sorted(by_metric)} incomplete")
            for metric, variants in by_metric.items():
                best, mean = variants["best"], variants["mean"]
                if metric in HIGHER_BETTER:
                    if best < mean - 1e-12:
                        raise ValueError(
                            f"{scope}/{metric}: best {best} < mean {mean}"
                        )
                elif best > mean + 1e-12:
                    raise ValueError(f"{scope}/{metric}: best {best} > mean {mean}")

    def value(self, metric: str, variant: str = "mean") -> float:
        return self.overall[metric][variant]


def _pair_metrics(
    gt: GazeTrajectory, gen: GazeTrajectory, cfg: MetricConfig, meta: VideoMeta
) -> dict[str, float]:
    """All four metrics for one (ground truth, generated) pair."""
    if abs(gt.rate_hz - gen.rate_hz) > 0.01 * gt.rate_hz:
        raise DataError(
            f"{meta.video_id}: rate mismatch {gt.rate_hz:.3f} vs {gen.rate_hz:.3f} Hz"
        )
    common = min(len(gt), len(gen))
    if common < 2:
        raise DataError(f"{meta.video_id}: trajectories too short to compare")
    if cfg.space == "pixels":
        p_full = denormalize_points(gt.xy, meta)
        q_full = denormalize_points(gen.xy, meta)
    else:
        p_full = gt.xy
        q_full = gen.xy
    sa = quantize_to_string(gt, cfg.grid)[:common]
    sb = quantize_to_string(gen, cfg.grid)[:common]
    max_lag = int(round(cfg.max_lag_s * gt.rate_hz))
    return {
        "levenshtein": float(levenshtein(sa, sb)),
        "discrete_frechet": discrete_frechet(p_full, q_full),
        "dtw": dtw(p_full, q_full),
        "max_temporal_correlation": max_temporal_correlation(
            p_full[:common], q_full[:common], max_lag
        ),
    }


def evaluate_protocol(
    gt_by_video: dict[str, list[GazeTrajectory]],
    gen_by_video: dict[str, list[GazeTrajectory]],
    metas: dict[str, VideoMeta],
    cfg: MetricConfig = MetricConfig(),
    workers: int = 1,
) -> ScoreReport:
    """Best/mean evaluation over per-video trajectory sets.

    For every ground-truth path the generated set yields a mean value and a
    best value (minimum for distances, maximum for correlation) per metric;
    these are averaged over the video's paths, then videos are averaged with
    equal weight. Both dicts must cover the same video ids with at least one
    trajectory each.
    """
    if set(gt_by_video) != set(gen_by_video):
        only = set(gt_by_video) ^ set(gen_by_video)
        raise DataError(f"video sets differ: {sorted(only)}")
    if not gt_by_video:
        raise DataError("nothing to evaluate")
    for vid in gt_by_video:
        if vid not in metas:
            raise DataError(f"missing video meta for {vid}")
        if not gt_by_video[vid] or not gen_by_video[vid]:
            raise DataError(f"{vid}: empty trajectory set")

    videos = sorted(gt_by_video)
    jobs = []
    for vid in videos:
        for gi, gt in enumerate(gt_by_video[vid]):
            for si, gen in enumerate(gen_by_video[vid]):
                jobs.append((vid, gi, si, gt, gen))

    def run(job):
        vid, gi, si, gt, gen = job
        return (vid, gi, si, _pair_metrics(gt, gen, cfg, metas[vid]))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    table: dict[tuple[str, int], dict[str, list[float]]] = {}
    for vid, gi, si, values in results:
        row = table.setdefault((vid, gi), {name: [] for name in METRIC_NAMES})
        for name, val in values.items():
            row[name].append(val)

    per_video: dict[str, dict[str, dict[str, float]]] = {}
    for vid in videos:
        by_metric: dict[str, dict[str, float]] = {}
        for name in METRIC_NAMES:
            bests, means = [], []
            for gi in range(len(gt_by_video[vid])):
                vals = table[(vid, gi)][name]
                means.append(float(np.mean(vals)))
                bests.append(max(vals) if name in HIGHER_BETTER else min(vals))
            by_metric[name] = {
                "best": float(np.mean(bests)),
                "mean": float(np.mean(means)),
            }
        per_video[vid] = by_metric

    overall = {
        name: {
            variant: float(np.mean([per_video[v][name][variant] for v in videos]))
            for variant in ("best", "mean")
        }
        for name in METRIC_NAMES
    }
    return ScoreReport(
        per_video=per_video,
        overall=overall,
        gt_counts={v: len(gt_by_video[v]) for v in videos},
        gen_counts={v: len(gen_by_video[v]) for v in videos},
    )


def write_report_csv(report: ScoreReport, path: str | Path) -> None:
    """Write per-video rows ``video_id,metric,variant,value`` plus overall rows."""
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["video_id", "metric", "variant", "value"])
            for vid in sorted(report.per_video):
                for metric in METRIC_NAMES:
                    for variant in ("mean", "best"):
                        writer.writerow(
                            [vid, metric, variant,
                             f"{report.per_video[vid][metric][variant]:.6f}"]
                        )
            for metric in METRIC_NAMES:
                for variant in ("mean", "best"):
                    writer.writerow(
                        ["overall", metric, variant,
                         f"{report.overall[metric][variant]:.6f}"]
                    )
    except OSError as exc:
        raise DataError(f"{path}: cannot write: {exc}") from exc


def format_report(report: ScoreReport) -> str:
    """Human-readable summary table of the overall scores."""
    lines = ["metric                        mean        best"]
    for metric in METRIC_NAMES:
        lines.append(
            f"{metric:<26}{report.overall[metric]['mean']:>10.4f}"
            f"{report.overall[metric]['best']:>12.4f}"
        )
    return "\n".join(lines)
