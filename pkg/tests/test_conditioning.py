from __future__ import annotations

import math

import numpy as np
import pytest

from gazegen.conditioning import (
    LatentSequence,
    OracleParams,
    SaliencyClip,
    SynthSceneSpec,
    find_peaks,
    flatten_latent_slice,
    pool_compress,
    random_walk_like,
    read_pgm_dir,
    read_salb,
    render_blob_frames,
    simulate_blob_paths,
    synth_gaze_oracle,
    synth_scene,
    temporal_subsample,
    write_pgm_frames,
    write_salb,
)
from gazegen.core import GazeTrajectory
from gazegen.errors import DataError


def _clip(frames, rate=30.0, vid="synth00"):
    return SaliencyClip(frames=np.asarray(frames, dtype=float), rate_hz=rate, video_id=vid)


def _spec(**kw):
    base = dict(
        blob_count=1, blob_sigma=0.12, motion_speed=0.1, seed=5,
        duration_s=2.0, rate_hz=30.0, height=32, width=32,
    )
    base.update(kw)
    return SynthSceneSpec(**base)


# --------------------------------------------------------------- pooling


def test_pool_compress_uniform_frame():
    clip = _clip(np.full((3, 16, 24), 0.4))
    pooled = pool_compress(clip, (4, 4))
    assert pooled.shape == (3, 4, 4)
    assert pooled == pytest.approx(np.full((3, 4, 4), 0.4))


def test_pool_compress_matches_direct_mean_with_remainders():
    # 5x7 onto (2, 3): rows split [0:2),[2:5); cols [0:2),[2:4),[4:7). The
    # remainder rows/cols must land in the last cell along each axis.
    rng = np.random.default_rng(0)
    frames = rng.uniform(size=(2, 5, 7))
    pooled = pool_compress(_clip(frames), (2, 3))
    row_edges = [0, 2, 5]
    col_edges = [0, 2, 4, 7]
    for f in range(2):
        for i in range(2):
            for j in range(3):
                cell = frames[f, row_edges[i]:row_edges[i + 1], col_edges[j]:col_edges[j + 1]]
                assert pooled[f, i, j] == pytest.approx(cell.mean())


def test_pool_compress_stays_in_unit_interval():
    rng = np.random.default_rng(1)
    pooled = pool_compress(_clip(rng.uniform(size=(4, 33, 17))), (8, 8))
    assert pooled.min() >= 0.0 and pooled.max() <= 1.0


def test_pool_compress_rejects_oversized_grid():
    with pytest.raises(ValueError, match="exceeds frame size"):
        pool_compress(_clip(np.zeros((1, 4, 4))), (8, 2))
    with pytest.raises(ValueError):
        pool_compress(_clip(np.zeros((1, 4, 4))), (0, 2))


def test_temporal_subsample_stride_and_tags():
    pooled = np.arange(10 * 2 * 2, dtype=float).reshape(10, 2, 2) / 40.0
    lat = temporal_subsample(pooled, stride_frames=3, source_rate_hz=30.0)
    assert lat.num_sets == 4  # frames 0, 3, 6, 9
    assert lat.tokens.shape == (4, 4, 3)
    assert lat.tokens[:, :, 0] == pytest.approx(pooled[::3].reshape(4, 4))
    assert lat.tokens[0, :, 1] == pytest.approx([0.25, 0.25, 0.75, 0.75])
    assert lat.tokens[0, :, 2] == pytest.approx([0.25, 0.75, 0.25, 0.75])
    assert lat.stride_frames == 3


def test_latent_sequence_slice_bounds():
    lat = temporal_subsample(np.zeros((6, 2, 2)), 2, 30.0)
    assert lat.slice_sets(0, 3).shape == (3, 4, 3)
    with pytest.raises(ValueError, match="outside"):
        lat.slice_sets(1, 3)
    with pytest.raises(ValueError):
        lat.slice_sets(-1, 1)


def test_flatten_latent_slice_temporal_centers():
    lat = temporal_subsample(np.random.default_rng(2).uniform(size=(20, 2, 2)), 5, 30.0)
    flat = flatten_latent_slice(lat.slice_sets(1, 3), lat.stride_frames)
    assert flat.shape == (12, 4)
    assert flat[:, :3] == pytest.approx(lat.tokens[1:4].reshape(12, 3))
    assert flat[:, 3] == pytest.approx(np.repeat([2.5, 7.5, 12.5], 4))


# --------------------------------------------------------------- synthesis


def test_blob_paths_bounds_shape_determinism():
    spec = _spec(blob_count=3, duration_s=4.0)
    a = simulate_blob_paths(spec)
    b = simulate_blob_paths(spec)
    assert a.shape == (120, 3, 2)
    assert np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0
    c = simulate_blob_paths(_spec(blob_count=3, duration_s=4.0, seed=6))
    assert not np.array_equal(a, c)


def test_blob_paths_zero_speed_is_static():
    paths = simulate_blob_paths(_spec(motion_speed=0.0, duration_s=1.0))
    assert np.ptp(paths, axis=0) == pytest.approx(np.zeros((1, 2)))


def test_blob_mean_speed_near_requested():
    spec = _spec(blob_count=8, motion_speed=0.2, duration_s=30.0, seed=9)
    paths = simulate_blob_paths(spec)
    steps = np.diff(paths, axis=0)
    speeds = np.hypot(steps[:, :, 0], steps[:, :, 1]) * spec.rate_hz
    # Reflections alias the displacement, but at 0.2 units/s the step is far
    # smaller than the frame, so the sample mean should sit near the target.
    assert abs(speeds.mean() - 0.2) < 0.05


def test_render_normalizes_each_frame():
    centers = np.array([[[0.5, 0.5]], [[0.2, 0.8]]])
    frames = render_blob_frames(centers, 0.1, 24, 24)
    assert frames.shape == (2, 24, 24)
    assert frames.max(axis=(1, 2)) == pytest.approx([1.0, 1.0])
    assert frames.min() >= 0.0


def test_synth_scene_peak_tracks_blob_center():
    spec = _spec(duration_s=1.0, height=48, width=48, seed=3)
    clip = synth_scene(spec)
    centers = simulate_blob_paths(spec)
    for f in (0, 15, 29):
        peaks = find_peaks(clip.frames[f])
        assert len(peaks) >= 1
        assert np.hypot(*(peaks[0][0] - centers[f, 0])) < 1.5 / 48


# --------------------------------------------------------------- peaks


def _gaussian_frame(cx, cy, sigma, h, w):
    return render_blob_frames(np.array([[[cx, cy]]]), sigma, h, w)[0]


def test_find_peaks_subpixel_exact_for_gaussian():
    # Log-parabola refinement recovers a Gaussian's center exactly, so the
    # error should be far below one pixel even off the pixel lattice.
    frame = _gaussian_frame(0.437, 0.611, 0.1, 64, 64)
    peaks = find_peaks(frame)
    assert len(peaks) == 1
    pos, val = peaks[0]
    assert val == pytest.approx(1.0)
    assert abs(pos[0] - 0.437) < 0.1 / 64
    assert abs(pos[1] - 0.611) < 0.1 / 64


def test_find_peaks_orders_by_value_and_separates():
    f1 = _gaussian_frame(0.25, 0.25, 0.06, 64, 64)
    f2 = _gaussian_frame(0.75, 0.75, 0.06, 64, 64)
    frame = np.clip(f1 * 0.6 + f2, 0.0, 1.0)
    peaks = find_peaks(frame)
    assert len(peaks) == 2
    assert peaks[0][1] > peaks[1][1]
    assert np.hypot(*(peaks[0][0] - [0.75, 0.75])) < 0.02
    assert np.hypot(*(peaks[1][0] - [0.25, 0.25])) < 0.02


def test_find_peaks_threshold_and_min_sep():
    frame = _gaussian_frame(0.5, 0.5, 0.08, 64, 64) * 0.2
    assert find_peaks(frame, threshold=0.3) == []
    # Two nearby blobs inside min_sep collapse to the stronger one.
    near = np.clip(
        _gaussian_frame(0.50, 0.5, 0.05, 64, 64)
        + 0.8 * _gaussian_frame(0.55, 0.5, 0.05, 64, 64),
        0.0,
        1.0,
    )
    peaks = find_peaks(near, min_sep=0.2)
    assert len(peaks) == 1


# --------------------------------------------------------------- gaze oracle


def test_oracle_static_blob_settles_on_center():
    frames = np.repeat(_gaussian_frame(0.3, 0.7, 0.1, 48, 48)[None], 60, axis=0)
    clip = _clip(frames)
    traj = synth_gaze_oracle(clip, seed=4, params=OracleParams(jitter_sigma=0.0))
    assert len(traj) == 60
    # After pursuit converges the gaze must sit on the blob center.
    tail = traj.xy[20:]
    assert np.abs(tail - [0.3, 0.7]).max() < 1e-3


def test_oracle_deterministic_and_jitter_bounded():
    clip = synth_scene(_spec(duration_s=2.0, seed=8))
    p = OracleParams(jitter_sigma=0.004)
    a = synth_gaze_oracle(clip, seed=11, params=p)
    b = synth_gaze_oracle(clip, seed=11, params=p)
    c = synth_gaze_oracle(clip, seed=12, params=p)
    assert np.array_equal(a.xy, b.xy)
    assert not np.array_equal(a.xy, c.xy)
    clean = synth_gaze_oracle(clip, seed=11, params=OracleParams(jitter_sigma=0.0))
    # Jitter is measurement noise on emitted samples: the underlying state
    # matches the clean run, so the gap stays within a few sigma.
    assert np.abs(a.xy - clean.xy).max() < 6 * 0.004


def test_oracle_pursuit_lag_matches_closed_form():
    # A single blob moving at constant speed v is tracked with per-frame
    # correction g += gain * (target - g). The steady-state lag solves
    # L = (1 - gain) * L + v * dt, i.e. L = v / (gain * rate).
    rate, speed, gain = 30.0, 0.12, 0.4
    frames_n = 90
    xs = 0.25 + speed * np.arange(frames_n) / rate
    centers = np.stack([np.stack([xs, np.full(frames_n, 0.5)], axis=1)], axis=1)
    clip = _clip(render_blob_frames(centers, 0.1, 64, 64))
    params = OracleParams(
        fixation_dwell_s=1e6, pursuit_gain=gain, jitter_sigma=0.0
    )
    traj = synth_gaze_oracle(clip, seed=0, params=params)
    lag = centers[30:, 0, 0] - traj.xy[30:, 0]
    expected = speed / (gain * rate)
    assert np.mean(lag) == pytest.approx(expected, rel=0.05)
    assert np.abs(traj.xy[30:, 1] - 0.5).max() < 1e-3


def test_oracle_needs_first_frame_peak():
    clip = _clip(np.full((5, 16, 16), 0.01))
    with pytest.raises(DataError, match="no saliency peak"):
        synth_gaze_oracle(clip, seed=0)


def test_oracle_saccades_between_blobs():
    f1 = _gaussian_frame(0.2, 0.2, 0.07, 48, 48)
    f2 = _gaussian_frame(0.8, 0.8, 0.07, 48, 48)
    frames = np.repeat(np.clip(f1 + f2, 0, 1)[None], 300, axis=0)
    clip = _clip(frames)
    traj = synth_gaze_oracle(
        clip, seed=1, params=OracleParams(fixation_dwell_s=0.5, jitter_sigma=0.0)
    )
    # With short dwells over 10 s the observer must visit both blobs.
    d1 = np.hypot(*(traj.xy - [0.2, 0.2]).T)
    d2 = np.hypot(*(traj.xy - [0.8, 0.8]).T)
    assert (d1 < 0.05).any() and (d2 < 0.05).any()


# --------------------------------------------------------------- random walk


def test_random_walk_matches_reference_frame():
    rng = np.random.default_rng(6)
    xy = np.clip(0.5 + np.cumsum(rng.normal(0, 0.01, (400, 2)), axis=0), 0, 1)
    ref = GazeTrajectory(
        t=np.arange(400) / 30.0, xy=xy, rate_hz=30.0, observer_id="s01", video_id="v",
    )
    walk = random_walk_like(ref, seed=7)
    assert len(walk) == len(ref)
    assert np.array_equal(walk.t, ref.t)
    assert walk.xy[0] == pytest.approx(ref.xy[0])
    assert walk.xy.min() >= 0.0 and walk.xy.max() <= 1.0
    ref_rms = math.sqrt(float(np.mean(np.diff(ref.xy, axis=0) ** 2)))
    walk_rms = math.sqrt(float(np.mean(np.diff(walk.xy, axis=0) ** 2)))
    # Folding can only shorten steps; at this scale the effect is tiny.
    assert walk_rms == pytest.approx(ref_rms, rel=0.15)
    assert np.array_equal(walk.xy, random_walk_like(ref, seed=7).xy)


def test_random_walk_requires_two_samples():
    ref = GazeTrajectory(
        t=np.array([0.0]), xy=np.array([[0.5, 0.5]]), rate_hz=30.0,
        observer_id="s", video_id="v",
    )
    with pytest.raises(DataError, match="too short"):
        random_walk_like(ref, seed=0)


# --------------------------------------------------------------- containers


def test_salb_round_trip_exact_float32(tmp_path):
    rng = np.random.default_rng(10)
    frames = rng.uniform(size=(7, 12, 9)).astype(np.float32).astype(np.float64)
    clip = _clip(frames, rate=24.0, vid="clip03")
    p = tmp_path / "clip03.salb"
    write_salb(clip, p)
    back = read_salb(p, rate_hz=24.0)
    assert np.array_equal(back.frames, frames)
    assert back.video_id == "clip03"
    assert back.rate_hz == 24.0


@pytest.mark.parametrize(
    "mutate,fragment",
    [
        (lambda b: b[:10], "truncated header"),
        (lambda b: b"XXXX" + b[4:], "bad magic"),
        (lambda b: b[:4] + (99).to_bytes(4, "little") + b[8:], "unsupported version"),
        (lambda b: b[:-4], "payload size mismatch"),
        (lambda b: b + b"\0\0\0\0", "payload size mismatch"),
    ],
)
def test_salb_rejects_corrupt_files(tmp_path, mutate, fragment):
    clip = _clip(np.random.default_rng(0).uniform(size=(2, 4, 4)))
    p = tmp_path / "x.salb"
    write_salb(clip, p)
    p.write_bytes(mutate(p.read_bytes()))
    with pytest.raises(DataError, match=fragment):
        read_salb(p, rate_hz=30.0)


def test_salb_rejects_out_of_range_values(tmp_path):
    clip = _clip(np.full((1, 2, 2), 0.5))
    p = tmp_path / "x.salb"
    write_salb(clip, p)
    blob = bytearray(p.read_bytes())
    blob[20:24] = np.array([2.5], dtype="<f4").tobytes()
    p.write_bytes(bytes(blob))
    with pytest.raises(DataError, match=r"\[0, 1\]"):
        read_salb(p, rate_hz=30.0)


def test_pgm_round_trip_within_quantization(tmp_path):
    rng = np.random.default_rng(11)
    clip = _clip(rng.uniform(size=(4, 10, 14)))
    d = tmp_path / "frames"
    write_pgm_frames(clip, d)
    assert sorted(f.name for f in d.iterdir()) == [f"{i:06d}.pgm" for i in range(4)]
    back = read_pgm_dir(d, rate_hz=30.0, video_id="v")
    assert back.frames.shape == clip.frames.shape
    assert np.abs(back.frames - clip.frames).max() <= 0.5 / 255 + 1e-12


def test_pgm_reader_rejects_gapped_numbering(tmp_path):
    clip = _clip(np.zeros((2, 4, 4)))
    d = tmp_path / "frames"
    write_pgm_frames(clip, d)
    (d / "000001.pgm").rename(d / "000005.pgm")
    with pytest.raises(DataError, match="expected frame"):
        read_pgm_dir(d, rate_hz=30.0)


def test_pgm_reader_handles_comments_and_rejects_bad_maxval(tmp_path):
    d = tmp_path / "frames"
    d.mkdir()
    body = bytes(range(16))
    (d / "000000.pgm").write_bytes(b"P5\n# a comment\n4 4\n255\n" + body)
    clip = read_pgm_dir(d, rate_hz=30.0)
    assert clip.frames.shape == (1, 4, 4)
    assert clip.frames[0, 0, 1] == pytest.approx(1 / 255)
    (d / "000000.pgm").write_bytes(b"P5\n4 4\n65535\n" + body * 2)
    with pytest.raises(DataError, match="maxval"):
        read_pgm_dir(d, rate_hz=30.0)


def test_latent_sequence_rejects_bad_shapes():
    with pytest.raises(ValueError):
        LatentSequence(
            tokens=np.zeros((2, 5, 3)), grid_h=2, grid_w=2,
            stride_frames=5, source_rate_hz=30.0,
        )
    with pytest.raises(ValueError):
        LatentSequence(
            tokens=np.zeros((0, 4, 3)), grid_h=2, grid_w=2,
            stride_frames=5, source_rate_hz=30.0,
        )
