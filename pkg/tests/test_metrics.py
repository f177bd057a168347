from __future__ import annotations

import math

import numpy as np
import pytest

from gazegen.core import GazeTrajectory, VideoMeta
from gazegen.errors import DataError
from gazegen.metrics import (
    HIGHER_BETTER,
    METRIC_NAMES,
    MetricConfig,
    ScoreReport,
    discrete_frechet,
    dtw,
    evaluate_protocol,
    format_report,
    levenshtein,
    max_temporal_correlation,
    quantize_to_string,
    write_report_csv,
)

META = VideoMeta(video_id="clip00", width_px=100, height_px=100, rate_hz=30.0, frame_count=300)


# ----------------------------------------------------------------- oracles
#
# Deliberately naive reference implementations, structured differently from
# the production kernels: plain recursion for the edit distance and explicit
# enumeration of every monotone coupling for Frechet/DTW.


def _lev_naive(a, b):
    if len(a) == 0:
        return len(b)
    if len(b) == 0:
        return len(a)
    cost = 0 if a[0] == b[0] else 1
    return min(
        _lev_naive(a[1:], b[1:]) + cost,
        _lev_naive(a[1:], b) + 1,
        _lev_naive(a, b[1:]) + 1,
    )


def _couplings(n, m):
    """All monotone step sequences from (0, 0) to (n-1, m-1)."""

    def walk(i, j, path):
        if i == n - 1 and j == m - 1:
            yield path
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            ni, nj = i + di, j + dj
            if ni < n and nj < m:
                yield from walk(ni, nj, path + [(ni, nj)])

    yield from walk(0, 0, [(0, 0)])


def _frechet_naive(p, q):
    d = np.sqrt(((p[:, None, :] - q[None, :, :]) ** 2).sum(axis=2))
    return min(
        max(d[i, j] for i, j in path) for path in _couplings(len(p), len(q))
    )


def _dtw_naive(p, q):
    d = np.sqrt(((p[:, None, :] - q[None, :, :]) ** 2).sum(axis=2))
    return min(
        sum(d[i, j] for i, j in path) for path in _couplings(len(p), len(q))
    )


def _mtc_naive(p, q, max_lag):
    best = -np.inf
    found = False
    for lag in range(-max_lag, max_lag + 1):
        lo_p, lo_q = max(0, lag), max(0, -lag)
        ov = min(len(p) - lo_p, len(q) - lo_q)
        if ov < 2:
            continue
        found = True
        rs = []
        for ax in range(2):
            a = p[lo_p : lo_p + ov, ax]
            b = q[lo_q : lo_q + ov, ax]
            if a.std() == 0.0 or b.std() == 0.0:
                rs.append(0.0)
            else:
                rs.append(float(np.corrcoef(a, b)[0, 1]))
        best = max(best, float(np.mean(rs)))
    if not found:
        raise ValueError("no overlap")
    return best


def _traj(xy, rate=30.0, obs="s01", vid="clip00"):
    xy = np.asarray(xy, dtype=float)
    return GazeTrajectory(
        t=np.arange(len(xy)) / rate, xy=xy, rate_hz=rate, observer_id=obs, video_id=vid
    )


# ----------------------------------------------------------------- levenshtein


def test_levenshtein_known_pairs():
    # kitten -> sitting, the textbook distance-3 pair, mapped to ints.
    chars = {c: i for i, c in enumerate("egiknst")}
    a = np.array([chars[c] for c in "kitten"])
    b = np.array([chars[c] for c in "sitting"])
    assert levenshtein(a, b) == 3
    assert levenshtein(a, a) == 0
    assert levenshtein(np.array([1]), np.array([2, 3, 4])) == 3


def test_levenshtein_matches_recursion():
    rng = np.random.default_rng(0)
    for _ in range(30):
        a = rng.integers(0, 4, size=rng.integers(1, 8))
        b = rng.integers(0, 4, size=rng.integers(1, 8))
        assert levenshtein(a, b) == _lev_naive(list(a), list(b))


def test_levenshtein_rejects_empty_and_2d():
    with pytest.raises(ValueError):
        levenshtein(np.array([]), np.array([1]))
    with pytest.raises(ValueError):
        levenshtein(np.zeros((2, 2)), np.array([1]))


# ----------------------------------------------------------------- frechet


def test_frechet_parallel_segments():
    t = np.linspace(0, 1, 9)
    p = np.stack([t, np.zeros(9)], axis=1)
    q = np.stack([t, np.full(9, 0.25)], axis=1)
    assert discrete_frechet(p, q) == pytest.approx(0.25, rel=1e-12)
    assert discrete_frechet(p, p) == 0.0


def test_frechet_matches_enumeration():
    rng = np.random.default_rng(1)
    for _ in range(25):
        p = rng.uniform(size=(rng.integers(2, 6), 2))
        q = rng.uniform(size=(rng.integers(2, 6), 2))
        assert discrete_frechet(p, q) == pytest.approx(_frechet_naive(p, q), rel=1e-12)


def test_frechet_symmetry_and_unequal_lengths():
    rng = np.random.default_rng(2)
    p, q = rng.uniform(size=(7, 2)), rng.uniform(size=(13, 2))
    assert discrete_frechet(p, q) == pytest.approx(discrete_frechet(q, p), rel=1e-12)


# ----------------------------------------------------------------- dtw


def test_dtw_zero_on_identical_and_known_value():
    p = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    assert dtw(p, p) == 0.0
    # Against a single repeated point the cost is the sum of distances.
    q = np.array([[0.0, 1.0]])
    expected = sum(math.hypot(x, 1.0) for x in (0.0, 1.0, 2.0))
    assert dtw(p, q) == pytest.approx(expected, rel=1e-12)


def test_dtw_matches_enumeration():
    rng = np.random.default_rng(3)
    for _ in range(25):
        p = rng.uniform(size=(rng.integers(2, 6), 2))
        q = rng.uniform(size=(rng.integers(2, 6), 2))
        assert dtw(p, q) == pytest.approx(_dtw_naive(p, q), rel=1e-12)


def test_dtw_absorbs_time_shift_cheaply():
    t = np.linspace(0, 4 * np.pi, 60)
    p = np.stack([np.sin(t), np.cos(t)], axis=1)
    q = np.roll(p, 5, axis=0)
    direct = float(np.sqrt(((p - q) ** 2).sum(axis=1)).sum())
    assert dtw(p, q) < 0.5 * direct


# ----------------------------------------------------------------- correlation


def test_mtc_identical_signals():
    rng = np.random.default_rng(4)
    p = rng.uniform(size=(50, 2))
    assert max_temporal_correlation(p, p, max_lag=5) == pytest.approx(1.0, abs=1e-12)


def test_mtc_recovers_known_shift():
    t = np.arange(200) / 30.0
    sig = np.stack([np.sin(2 * np.pi * 0.7 * t), np.cos(2 * np.pi * 0.5 * t)], axis=1)
    shifted = np.roll(sig, 6, axis=0)[6:]
    base = sig[6:]
    # Allowing lags past 6 must recover alignment almost perfectly; capping
    # the search below the true shift must lose correlation.
    wide = max_temporal_correlation(base, shifted[:-6], max_lag=10)
    narrow = max_temporal_correlation(base, shifted[:-6], max_lag=2)
    assert wide > 0.99
    assert narrow < wide - 0.05


def test_mtc_matches_naive():
    rng = np.random.default_rng(5)
    for _ in range(20):
        p = rng.uniform(size=(rng.integers(4, 20), 2))
        q = rng.uniform(size=(rng.integers(4, 20), 2))
        assert max_temporal_correlation(p, q, 6) == pytest.approx(
            _mtc_naive(p, q, 6), abs=1e-12
        )


def test_mtc_zero_variance_axis_contributes_zero():
    n = 30
    x = np.linspace(0, 1, n)
    p = np.stack([x, np.full(n, 0.5)], axis=1)
    q = np.stack([x, np.full(n, 0.2)], axis=1)
    # x-correlation is 1, flat y contributes 0 -> mean 0.5.
    assert max_temporal_correlation(p, q, 0) == pytest.approx(0.5, abs=1e-12)


def test_mtc_requires_overlap():
    p = np.array([[0.1, 0.1]])
    q = np.array([[0.2, 0.2], [0.3, 0.3]])
    with pytest.raises(ValueError, match="overlap"):
        max_temporal_correlation(p, q, 0)
    with pytest.raises(ValueError):
        max_temporal_correlation(p, q, -1)


# ----------------------------------------------------------------- quantize


def test_quantize_cells_row_major_and_boundaries():
    traj = _traj(
        [[0.0, 0.0], [0.999, 0.0], [0.0, 0.999], [1.0, 1.0], [0.13, 0.26]]
    )
    cells = quantize_to_string(traj, grid=(8, 8))
    assert list(cells[:4]) == [0, 7, 56, 63]
    assert cells[4] == int(0.26 * 8) * 8 + int(0.13 * 8)
    ones = quantize_to_string(traj, grid=(1, 1))
    assert np.all(ones == 0)


# ----------------------------------------------------------------- protocol


def _protocol_inputs():
    rng = np.random.default_rng(6)
    gt = {
        "clip00": [_traj(rng.uniform(size=(40, 2)), obs=f"s{i}") for i in range(2)],
        "clip01": [_traj(rng.uniform(size=(40, 2)), obs="s0", vid="clip01")],
    }
    gen = {
        "clip00": [_traj(rng.uniform(size=(40, 2)), obs=f"g{i}") for i in range(3)],
        "clip01": [
            _traj(rng.uniform(size=(40, 2)), obs=f"g{i}", vid="clip01") for i in range(3)
        ],
    }
    metas = {
        "clip00": META,
        "clip01": VideoMeta("clip01", 100, 100, 30.0, 300),
    }
    return gt, gen, metas


def test_protocol_best_mean_against_direct_computation():
    gt, gen, metas = _protocol_inputs()
    cfg = MetricConfig(space="normalized", max_lag_s=0.5)
    report = evaluate_protocol(gt, gen, metas, cfg)
    # Recompute clip00's dtw entries directly from the metric functions.
    vals = np.array(
        [[dtw(g.xy, s.xy) for s in gen["clip00"]] for g in gt["clip00"]]
    )
    assert report.per_video["clip00"]["dtw"]["mean"] == pytest.approx(vals.mean())
    assert report.per_video["clip00"]["dtw"]["best"] == pytest.approx(
        vals.min(axis=1).mean()
    )
    # Correlation keeps the maximum as its best.
    cvals = np.array(
        [
            [max_temporal_correlation(g.xy, s.xy, 15) for s in gen["clip00"]]
            for g in gt["clip00"]
        ]
    )
    assert report.per_video["clip00"]["max_temporal_correlation"]["best"] == pytest.approx(
        cvals.max(axis=1).mean()
    )
    for name in METRIC_NAMES:
        expect = np.mean(
            [report.per_video[v][name]["mean"] for v in ("clip00", "clip01")]
        )
        assert report.overall[name]["mean"] == pytest.approx(expect)
    assert report.gt_counts == {"clip00": 2, "clip01": 1}
    assert report.gen_counts == {"clip00": 3, "clip01": 3}


def test_protocol_self_evaluation_is_perfect():
    gt, _, metas = _protocol_inputs()
    report = evaluate_protocol(gt, gt, metas, MetricConfig(space="normalized"))
    for name in METRIC_NAMES:
        if name in HIGHER_BETTER:
            assert report.overall[name]["best"] == pytest.approx(1.0, abs=1e-9)
        else:
            assert report.overall[name]["best"] == pytest.approx(0.0, abs=1e-9)


def test_protocol_workers_agree():
    gt, gen, metas = _protocol_inputs()
    cfg = MetricConfig(space="pixels")
    serial = evaluate_protocol(gt, gen, metas, cfg, workers=1)
    threaded = evaluate_protocol(gt, gen, metas, cfg, workers=4)
    assert serial.per_video == threaded.per_video
    assert serial.overall == threaded.overall


def test_protocol_space_scales_distances():
    gt, gen, metas = _protocol_inputs()
    px = evaluate_protocol(gt, gen, metas, MetricConfig(space="pixels"))
    norm = evaluate_protocol(gt, gen, metas, MetricConfig(space="normalized"))
    # 100 x 100 frame: pixel-space distances are exactly 100x normalized.
    assert px.overall["dtw"]["mean"] == pytest.approx(100 * norm.overall["dtw"]["mean"])
    assert px.overall["discrete_frechet"]["best"] == pytest.approx(
        100 * norm.overall["discrete_frechet"]["best"]
    )
    # Correlation and the quantized edit distance are scale invariant.
    assert px.overall["max_temporal_correlation"] == norm.overall["max_temporal_correlation"]
    assert px.overall["levenshtein"] == norm.overall["levenshtein"]


def test_protocol_input_validation():
    gt, gen, metas = _protocol_inputs()
    with pytest.raises(DataError, match="video sets differ"):
        evaluate_protocol(gt, {"clip00": gen["clip00"]}, metas)
    with pytest.raises(DataError, match="missing video meta"):
        evaluate_protocol(gt, gen, {"clip00": META})
    with pytest.raises(DataError, match="empty"):
        evaluate_protocol(gt, {**gen, "clip01": []}, metas)
    bad_rate = {
        "clip00": gen["clip00"],
        "clip01": [_traj(np.random.default_rng(1).uniform(size=(40, 2)), rate=25.0)],
    }
    with pytest.raises(DataError, match="rate mismatch"):
        evaluate_protocol(gt, bad_rate, metas)


def test_score_report_enforces_ordering():
    good = {name: {"mean": 5.0, "best": 1.0} for name in METRIC_NAMES}
    good["max_temporal_correlation"] = {"mean": 0.2, "best": 0.8}
    ScoreReport(
        per_video={"v": good}, overall=good, gt_counts={"v": 1}, gen_counts={"v": 1}
    )
    bad = {name: {"mean": 5.0, "best": 1.0} for name in METRIC_NAMES}
    bad["max_temporal_correlation"] = {"mean": 0.8, "best": 0.2}
    with pytest.raises(ValueError, match="best"):
        ScoreReport(
            per_video={"v": bad}, overall=bad, gt_counts={"v": 1}, gen_counts={"v": 1}
        )
    flipped = dict(good)
    flipped["dtw"] = {"mean": 1.0, "best": 5.0}
    with pytest.raises(ValueError, match="best"):
        ScoreReport(
            per_video={"v": flipped}, overall=flipped,
            gt_counts={"v": 1}, gen_counts={"v": 1},
        )


def test_report_csv_and_format(tmp_path):
    gt, gen, metas = _protocol_inputs()
    report = evaluate_protocol(gt, gen, metas)
    p = tmp_path / "report.csv"
    write_report_csv(report, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "video_id,metric,variant,value"
    # 2 videos + overall, 4 metrics, 2 variants.
    assert len(lines) == 1 + 3 * 4 * 2
    row = dict(zip(("video_id", "metric", "variant", "value"), lines[1].split(",")))
    assert row["video_id"] == "clip00"
    assert float(row["value"]) == pytest.approx(
        report.per_video["clip00"][row["metric"]][row["variant"]], abs=1e-6
    )
    text = format_report(report)
    for name in METRIC_NAMES:
        assert name in text
    assert report.value("dtw") == report.overall["dtw"]["mean"]
