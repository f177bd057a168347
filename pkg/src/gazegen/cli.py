"""Command line front end: synth, train, generate, evaluate, inspect.

Configuration is a flat ``key = value`` file with ``#`` comment lines and
dotted keys; unknown keys are rejected. Exit codes: 0 success, 1 usage or
configuration error, 2 data error, 3 numerical error.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .conditioning import (
    LatentSequence,
    OracleParams,
    SaliencyClip,
    SynthSceneSpec,
    pool_compress,
    random_walk_like,
    read_pgm_dir,
    read_salb,
    synth_gaze_oracle,
    synth_scene,
    temporal_subsample,
    write_salb,
)
from .core import (
    GazeTrajectory,
    VideoMeta,
    WindowSpec,
    derive_seed,
    ingest_gaze_csv,
    to_windows,
    write_trajectory_csv,
)
from .denoiser import (
    DenoiserConfig,
    GazeDenoiser,
    TrainingData,
    inspect_checkpoint,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .diffusion import DiffusionConfig, linear_beta_schedule, rollout
from .errors import ConfigError, DataError, GazegenError, NumericsError
from .metrics import MetricConfig, evaluate_protocol, format_report, write_report_csv

MANIFEST_NAME = "manifest.json"


@dataclass
class RunConfig:
    """Flattened run configuration; one field per config key."""

    data_root: str = ""
    width: int = 32
    height: int = 32
    rate_hz: float = 30.0
    duration_s: float = 60.0
    clip_count: int = 8
    observers: int = 4
    holdout: int = 1
    blob_counts: tuple = (1, 2)
    blob_sigma: float = 0.12
    motion_speed: float = 0.10
    dwell_s: float = 2.0
    saccade_s: float = 0.08
    gain: float = 0.4
    jitter: float = 0.004
    history: int = 90
    predict: int = 45
    grid_h: int = 4
    grid_w: int = 4
    stride: int = 5
    steps: int = 1000
    sample_steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    eta: float = 0.0
    base_width: int = 48
    level_mults: tuple = (1,)
    attn_levels: tuple | None = None
    cond_dim: int = 32
    heads: int = 4
    epochs: int = 70
    lr: float = 1e-4
    seed: int = 0
    checkpoint: str = ""
    loss_csv: str = ""
    samples: int = 10
    horizon_s: float = 57.0
    gen_observer: str = ""
    out_dir: str = ""
    eval_grid_rows: int = 8
    eval_grid_cols: int = 8
    max_lag_s: float = 2.0
    space: str = "pixels"
    eval_observers: str = "holdout"
    workers: int = 0


# config key -> (dataclass field, parser kind)
_KEYMAP: dict[str, tuple[str, str]] = {
    "data.root": ("data_root", "str"),
    "data.width": ("width", "int"),
    "data.height": ("height", "int"),
    "data.rate_hz": ("rate_hz", "float"),
    "data.duration_s": ("duration_s", "float"),
    "data.clip_count": ("clip_count", "int"),
    "data.observers": ("observers", "int"),
    "data.holdout": ("holdout", "int"),
    "data.blob_counts": ("blob_counts", "ints"),
    "data.blob_sigma": ("blob_sigma", "float"),
    "data.motion_speed": ("motion_speed", "float"),
    "oracle.dwell_s": ("dwell_s", "float"),
    "oracle.saccade_s": ("saccade_s", "float"),
    "oracle.gain": ("gain", "float"),
    "oracle.jitter": ("jitter", "float"),
    "window.history": ("history", "int"),
    "window.predict": ("predict", "int"),
    "cond.grid_h": ("grid_h", "int"),
    "cond.grid_w": ("grid_w", "int"),
    "cond.stride": ("stride", "int"),
    "sched.steps": ("steps", "int"),
    "sched.sample_steps": ("sample_steps", "int"),
    "sched.beta_start": ("beta_start", "float"),
    "sched.beta_end": ("beta_end", "float"),
    "sched.eta": ("eta", "float"),
    "model.base_width": ("base_width", "int"),
    "model.level_mults": ("level_mults", "ints"),
    "model.attn_levels": ("attn_levels", "ints_or_auto"),
    "model.cond_dim": ("cond_dim", "int"),
    "model.heads": ("heads", "int"),
    "train.epochs": ("epochs", "int"),
    "train.lr": ("lr", "float"),
    "train.seed": ("seed", "int"),
    "train.checkpoint": ("checkpoint", "str"),
    "train.loss_csv": ("loss_csv", "str"),
    "generate.samples": ("samples", "int"),
    "generate.horizon_s": ("horizon_s", "float"),
    "generate.observer": ("gen_observer", "str"),
    "generate.out": ("out_dir", "str"),
    "eval.grid_rows": ("eval_grid_rows", "int"),
    "eval.grid_cols": ("eval_grid_cols", "int"),
    "eval.max_lag_s": ("max_lag_s", "float"),
    "eval.space": ("space", "str"),
    "eval.observers": ("eval_observers", "str"),
    "workers": ("workers", "int"),
}


def _parse_value(key: str, raw: str, kind: str):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "str":
            return raw
        if kind == "ints":
            return tuple(int(p.strip()) for p in raw.split(",") if p.strip())
        if kind == "ints_or_auto":
            if raw in ("", "auto"):
                return None
            return tuple(int(p.strip()) for p in raw.split(",") if p.strip())
    except ValueError as exc:
        raise ConfigError(f"config key {key}: cannot parse {raw!r}: {exc}") from exc
    raise ConfigError(f"config key {key}: unknown kind {kind}")


def parse_config(path: str | Path) -> RunConfig:
    """Parse a flat key=value config file into a RunConfig."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc}") from exc
    cfg = RunConfig()
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}: line {lineno}: expected 'key = value'")
        key, raw = stripped.split("=", 1)
        key, raw = key.strip(), raw.strip()
        if key not in _KEYMAP:
            raise ConfigError(f"{path}: line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{path}: line {lineno}: duplicate key {key!r}")
        seen.add(key)
        attr, kind = _KEYMAP[key]
        cfg = replace(cfg, **{attr: _parse_value(key, raw, kind)})
    _validate_config(cfg, path)
    return cfg


def _validate_config(cfg: RunConfig, path) -> None:
    checks = [
        (cfg.width > 0 and cfg.height > 0, "frame dimensions must be positive"),
        (cfg.rate_hz > 0, "data.rate_hz must be positive"),
        (cfg.duration_s > 0, "data.duration_s must be positive"),
        (cfg.clip_count >= 1, "data.clip_count must be >= 1"),
        (cfg.observers >= 1, "data.observers must be >= 1"),
        (0 <= cfg.holdout < cfg.observers, "data.holdout must leave a training observer"),
        (len(cfg.blob_counts) >= 1, "data.blob_counts must be non-empty"),
        (cfg.history >= 0 and cfg.predict >= 1, "window sizes invalid"),
        (cfg.stride >= 1, "cond.stride must be >= 1"),
        (cfg.predict % cfg.stride == 0, "window.predict must be a multiple of cond.stride"),
        (cfg.epochs >= 1, "train.epochs must be >= 1"),
        (cfg.lr > 0, "train.lr must be positive"),
        (cfg.samples >= 1, "generate.samples must be >= 1"),
        (cfg.horizon_s > 0, "generate.horizon_s must be positive"),
        (cfg.eval_observers in ("holdout", "train", "all"), "eval.observers invalid"),
        (cfg.workers >= 0, "workers must be >= 0"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(f"{path}: {msg}")


def _resolve_workers(cfg: RunConfig, override: int | None) -> int:
    w = override if override is not None else cfg.workers
    if w <= 0:
        w = min(8, os.cpu_count() or 1)
    return max(1, w)


def _resolve_seed(cfg: RunConfig, override: int | None) -> int:
    return override if override is not None else cfg.seed


# ------------------------------------------------------------------- dataset


def _manifest_file(root: Path) -> Path:
    return root / MANIFEST_NAME


def write_manifest(root: Path, payload: dict) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    _manifest_file(root).write_text(text, encoding="utf-8")


def load_manifest(root: str | Path) -> dict:
    root = Path(root)
    path = _manifest_file(root)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"{path}: cannot read manifest: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from exc
    for key in ("width", "height", "rate_hz", "duration_s", "clips"):
        if key not in payload:
            raise DataError(f"{path}: manifest missing key {key!r}")
    if not payload["clips"]:
        raise DataError(f"{path}: manifest lists no clips")
    for entry in payload["clips"]:
        for key in ("video_id", "salb", "frame_count", "observers"):
            if key not in entry:
                raise DataError(f"{path}: clip entry missing key {key!r}")
    return payload


def _clip_meta(manifest: dict, entry: dict) -> VideoMeta:
    return VideoMeta(
        video_id=entry["video_id"],
        width_px=int(manifest["width"]),
        height_px=int(manifest["height"]),
        rate_hz=float(manifest["rate_hz"]),
        frame_count=int(entry["frame_count"]),
    )


def _load_clip(root: Path, manifest: dict, entry: dict) -> SaliencyClip:
    return read_salb(
        root / entry["salb"], rate_hz=float(manifest["rate_hz"]), video_id=entry["video_id"]
    )


def _clip_latents(cfg: RunConfig, clip: SaliencyClip) -> LatentSequence:
    pooled = pool_compress(clip, (cfg.grid_h, cfg.grid_w))
    return temporal_subsample(pooled, cfg.stride, clip.rate_hz)


def _observer_split(cfg: RunConfig, entry: dict) -> tuple[list[dict], list[dict]]:
    obs = entry["observers"]
    if cfg.holdout >= len(obs):
        raise DataError(
            f"{entry['video_id']}: holdout {cfg.holdout} >= observer count {len(obs)}"
        )
    cut = len(obs) - cfg.holdout
    return obs[:cut], obs[cut:]


def _load_observer(root: Path, meta: VideoMeta, obs_entry: dict) -> GazeTrajectory:
    trajs = ingest_gaze_csv(root / obs_entry["csv"], meta)
    for traj in trajs:
        if traj.observer_id == obs_entry["id"]:
            return traj
    raise DataError(f"{obs_entry['csv']}: observer {obs_entry['id']!r} not found")


def _diffusion_config(cfg: RunConfig) -> DiffusionConfig:
    return DiffusionConfig(
        schedule=linear_beta_schedule(cfg.steps, cfg.beta_start, cfg.beta_end),
        window=WindowSpec(history_len=cfg.history, predict_len=cfg.predict),
        sample_steps=cfg.sample_steps,
        cond_stride=cfg.stride,
        eta=cfg.eta,
        rate_hz=cfg.rate_hz,
    )


def _model_config(cfg: RunConfig) -> DenoiserConfig:
    try:
        return DenoiserConfig(
            window_len=cfg.history + cfg.predict,
            base_width=cfg.base_width,
            level_mults=cfg.level_mults,
            attn_levels=cfg.attn_levels,
            cond_dim=cfg.cond_dim,
            heads=cfg.heads,
        )
    except ValueError as exc:
        raise ConfigError(f"model configuration invalid: {exc}") from exc


# ------------------------------------------------------------------ commands


def cmd_synth(cfg: RunConfig, seed: int, workers: int) -> int:
    if not cfg.data_root:
        raise ConfigError("data.root must be set for synth")
    root = Path(cfg.data_root)
    (root / "clips").mkdir(parents=True, exist_ok=True)
    (root / "gaze").mkdir(parents=True, exist_ok=True)
    oracle = OracleParams(
        fixation_dwell_s=cfg.dwell_s,
        saccade_dur_s=cfg.saccade_s,
        pursuit_gain=cfg.gain,
        jitter_sigma=cfg.jitter,
    )
    clips_payload = []
    for i in range(cfg.clip_count):
        vid = f"clip{i:02d}"
        blob_count = cfg.blob_counts[i % len(cfg.blob_counts)]
        scene_seed = derive_seed(seed, 100, i)
        spec = SynthSceneSpec(
            blob_count=blob_count,
            blob_sigma=cfg.blob_sigma,
            motion_speed=cfg.motion_speed,
            seed=scene_seed,
            duration_s=cfg.duration_s,
            rate_hz=cfg.rate_hz,
            height=cfg.height,
            width=cfg.width,
        )
        clip = synth_scene(spec, vid)
        write_salb(clip, root / "clips" / f"{vid}.salb")
        meta = VideoMeta(
            video_id=vid,
            width_px=cfg.width,
            height_px=cfg.height,
            rate_hz=cfg.rate_hz,
            frame_count=clip.frame_count,
        )
        (root / "gaze" / vid).mkdir(parents=True, exist_ok=True)
        observers_payload = []
        for j in range(cfg.observers):
            oid = f"o{j}"
            oseed = derive_seed(seed, 200, i, j)
            traj = synth_gaze_oracle(clip, oseed, oracle, observer_id=oid)
            rel = f"gaze/{vid}/{oid}.csv"
            write_trajectory_csv(traj, meta, root / rel)
            observers_payload.append({"id": oid, "csv": rel, "seed": oseed})
        clips_payload.append(
            {
                "video_id": vid,
                "salb": f"clips/{vid}.salb",
                "frame_count": clip.frame_count,
                "blob_count": blob_count,
                "scene_seed": scene_seed,
                "observers": observers_payload,
            }
        )
        print(f"synth: {vid}: {clip.frame_count} frames, {cfg.observers} observers")
    write_manifest(
        root,
        {
            "width": cfg.width,
            "height": cfg.height,
            "rate_hz": cfg.rate_hz,
            "duration_s": cfg.duration_s,
            "clips": clips_payload,
        },
    )
    print(f"synth: wrote {cfg.clip_count} clips under {root}")
    return 0


def cmd_train(cfg: RunConfig, seed: int, workers: int, resume: bool) -> int:
    if not cfg.data_root:
        raise ConfigError("data.root must be set for train")
    if not cfg.checkpoint:
        raise ConfigError("train.checkpoint must be set for train")
    root = Path(cfg.data_root)
    manifest = load_manifest(root)
    dcfg = _diffusion_config(cfg)
    mcfg = _model_config(cfg)
    spec = dcfg.window
    sets_needed = dcfg.sets_per_window

    window_list, token_list = [], []
    for entry in manifest["clips"]:
        meta = _clip_meta(manifest, entry)
        clip = _load_clip(root, manifest, entry)
        latents = _clip_latents(cfg, clip)
        train_obs, _ = _observer_split(cfg, entry)
        for obs_entry in train_obs:
            traj = _load_observer(root, meta, obs_entry)
            wins = to_windows(traj, spec, stride=spec.predict_len)
            if wins.too_short:
                print(f"train: skipping short trajectory {entry['video_id']}/{obs_entry['id']}")
                continue
            for w_idx in range(len(wins)):
                start = int(wins.starts[w_idx])
                set_start = start // cfg.stride
                if set_start + sets_needed > latents.num_sets:
                    continue
                window_list.append(wins.windows[w_idx])
                token_list.append(
                    np.asarray(
                        _flatten_slice(latents, set_start, sets_needed), dtype=np.float64
                    )
                )
    if not window_list:
        raise DataError("no usable training windows in dataset")
    data = TrainingData(
        windows=np.stack(window_list, axis=0), tokens=np.stack(token_list, axis=0)
    )
    params = None
    if resume:
        params = load_checkpoint(cfg.checkpoint, mcfg)
        print(f"train: resuming from step {params.step}")
    print(f"train: {data.size} windows, model params {_param_count(mcfg)}")

    def log(epoch, loss):
        print(f"train: epoch {epoch + 1}/{cfg.epochs} loss {loss:.6f}", flush=True)

    result = train(
        data, dcfg, mcfg, epochs=cfg.epochs, seed=seed, lr=cfg.lr, params=params, log_fn=log
    )
    ckpt = Path(cfg.checkpoint)
    if ckpt.parent != Path(""):
        ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.params, ckpt)
    print(f"train: saved checkpoint {ckpt} at step {result.params.step}")
    if cfg.loss_csv:
        _write_loss_csv(Path(cfg.loss_csv), result.epoch_losses, cfg.epochs, resume)
    return 0


def _param_count(mcfg: DenoiserConfig) -> int:
    from .denoiser import param_registry

    return sum(int(np.prod(shape)) for shape, _ in param_registry(mcfg).values())


def _flatten_slice(latents: LatentSequence, set_start: int, count: int) -> np.ndarray:
    from .conditioning import flatten_latent_slice

    return flatten_latent_slice(latents.slice_sets(set_start, count), latents.stride_frames)


def _write_loss_csv(path: Path, losses: list[float], total_epochs: int, resume: bool) -> None:
    start = total_epochs - len(losses) + 1
    mode = "a" if (resume and path.exists()) else "w"
    with open(path, mode, encoding="utf-8", newline="\n") as fh:
        if mode == "w":
            fh.write("epoch,loss\n")
        for i, loss in enumerate(losses):
            fh.write(f"{start + i},{loss:.10f}\n")


def _parse_cold_start(tokens: list[str] | None) -> tuple[float, float] | None:
    if tokens is None:
        return None
    values = {}
    for tok in tokens:
        m = re.fullmatch(r"([xy])=([-+0-9.eE]+)", tok.strip())
        if m is None:
            raise ConfigError(f"--cold-start expects x=<val> y=<val>, got {tok!r}")
        try:
            values[m.group(1)] = float(m.group(2))
        except ValueError as exc:
            raise ConfigError(f"--cold-start: bad number in {tok!r}") from exc
    if set(values) != {"x", "y"}:
        raise ConfigError("--cold-start needs exactly one x= and one y= token")
    if not (0.0 <= values["x"] <= 1.0 and 0.0 <= values["y"] <= 1.0):
        raise ConfigError("--cold-start coordinates must lie in [0, 1]")
    return values["x"], values["y"]


def cmd_generate(
    cfg: RunConfig,
    seed: int,
    workers: int,
    video: str,
    checkpoint: str | None,
    out_dir: str | None,
    num_samples: int | None,
    horizon_s: float | None,
    cold_start: tuple[float, float] | None,
    observer: str | None,
    baseline: str | None,
) -> int:
    if not cfg.data_root:
        raise ConfigError("data.root must be set for generate")
    out = Path(out_dir or cfg.out_dir)
    if str(out) == ".":
        raise ConfigError("generate.out (or --out) must be set")
    root = Path(cfg.data_root)
    manifest = load_manifest(root)
    entry = next((e for e in manifest["clips"] if e["video_id"] == video), None)
    if entry is None:
        raise DataError(f"video {video!r} not in manifest")
    meta = _clip_meta(manifest, entry)
    samples = num_samples if num_samples is not None else cfg.samples
    horizon = horizon_s if horizon_s is not None else cfg.horizon_s
    horizon_count = int(round(horizon * meta.rate_hz))
    if horizon_count < 1:
        raise ConfigError("horizon too short for one sample")
    _, holdout_obs = _observer_split(cfg, entry)
    obs_id = observer or cfg.gen_observer or (
        holdout_obs[-1]["id"] if holdout_obs else entry["observers"][-1]["id"]
    )
    obs_entry = next((o for o in entry["observers"] if o["id"] == obs_id), None)
    if obs_entry is None:
        raise DataError(f"{video}: observer {obs_id!r} not in manifest")
    ref = _load_observer(root, meta, obs_entry)
    video_out = out / video
    video_out.mkdir(parents=True, exist_ok=True)

    if baseline is not None:
        if baseline != "random-walk":
            raise ConfigError(f"unknown baseline {baseline!r}")
        for s in range(samples):
            walk = random_walk_like(
                ref, derive_seed(seed, 7777, s), observer_id=f"gen{s:02d}"
            )
            write_trajectory_csv(walk, meta, video_out / f"gen{s:02d}.csv")
        print(f"generate: wrote {samples} random-walk baselines to {video_out}")
        return 0

    ckpt_path = checkpoint or cfg.checkpoint
    if not ckpt_path:
        raise ConfigError("a checkpoint is required to generate (set train.checkpoint or --checkpoint)")
    dcfg = _diffusion_config(cfg)
    mcfg = _model_config(cfg)
    params = load_checkpoint(ckpt_path, mcfg)
    model = GazeDenoiser(mcfg, params)
    clip = _load_clip(root, manifest, entry)
    latents = _clip_latents(cfg, clip)
    k = dcfg.window.history_len

    if cold_start is not None:
        point = np.array(cold_start, dtype=np.float64)
        prefix = np.tile(point, (k, 1))
        init = point
    else:
        if len(ref) < k:
            raise DataError(f"{video}: observer {obs_id} too short for warm start")
        prefix = ref.xy[:k].copy()
        init = prefix

    def one(s: int):
        res = rollout(
            init,
            latents,
            model,
            dcfg,
            horizon_samples=horizon_count,
            seed=derive_seed(seed, 900, s),
            video_id=video,
            observer_id=f"gen{s:02d}",
        )
        gen = res.trajectory
        full_xy = np.concatenate([prefix, gen.xy], axis=0)
        times = np.arange(full_xy.shape[0], dtype=np.float64) / dcfg.rate_hz
        full = GazeTrajectory(
            t=times,
            xy=full_xy,
            rate_hz=dcfg.rate_hz,
            observer_id=f"gen{s:02d}",
            video_id=video,
        )
        write_trajectory_csv(full, meta, video_out / f"gen{s:02d}.csv")
        return res.truncated

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            truncated = list(pool.map(one, range(samples)))
    else:
        truncated = [one(s) for s in range(samples)]
    note = " (horizon truncated to latent coverage)" if any(truncated) else ""
    print(f"generate: wrote {samples} trajectories to {video_out}{note}")
    return 0


def cmd_evaluate(
    cfg: RunConfig,
    workers: int,
    gt_root: str,
    gen_root: str,
    report_path: str | None,
) -> int:
    root = Path(gt_root)
    gen = Path(gen_root)
    manifest = load_manifest(root)
    gt_by_video: dict[str, list[GazeTrajectory]] = {}
    gen_by_video: dict[str, list[GazeTrajectory]] = {}
    metas: dict[str, VideoMeta] = {}
    for entry in manifest["clips"]:
        vid = entry["video_id"]
        meta = _clip_meta(manifest, entry)
        train_obs, holdout_obs = _observer_split(cfg, entry)
        chosen = {
            "holdout": holdout_obs,
            "train": train_obs,
            "all": entry["observers"],
        }[cfg.eval_observers]
        if not chosen:
            raise DataError(f"{vid}: no observers selected by eval.observers={cfg.eval_observers}")
        gt_by_video[vid] = [_load_observer(root, meta, o) for o in chosen]
        gen_dir = gen / vid
        if not gen_dir.is_dir():
            raise DataError(f"{gen_dir}: no generated trajectories for {vid}")
        gen_list = []
        for f in sorted(gen_dir.glob("*.csv")):
            gen_list.extend(ingest_gaze_csv(f, meta))
        if not gen_list:
            raise DataError(f"{gen_dir}: no CSV files")
        gen_by_video[vid] = gen_list
        metas[vid] = meta
    mcfg = MetricConfig(
        grid=(cfg.eval_grid_rows, cfg.eval_grid_cols),
        max_lag_s=cfg.max_lag_s,
        space=cfg.space,
    )
    report = evaluate_protocol(gt_by_video, gen_by_video, metas, mcfg, workers=workers)
    print(format_report(report))
    if report_path:
        write_report_csv(report, report_path)
        print(f"evaluate: wrote report {report_path}")
    return 0


def cmd_inspect(path_str: str) -> int:
    path = Path(path_str)
    if path.is_dir():
        clip = read_pgm_dir(path, rate_hz=1.0)
        print(f"{path}: PGM frame directory")
        print(f"  frames={clip.frame_count} height={clip.height} width={clip.width}")
        print(f"  value range [{clip.frames.min():.4f}, {clip.frames.max():.4f}]")
        return 0
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"SALB":
        clip = read_salb(path, rate_hz=1.0)
        print(f"{path}: SALB saliency clip")
        print(f"  frames={clip.frame_count} height={clip.height} width={clip.width}")
        print(f"  value range [{clip.frames.min():.4f}, {clip.frames.max():.4f}]")
        return 0
    if magic == b"GZDF":
        info = inspect_checkpoint(path)
        print(f"{path}: GZDF checkpoint")
        print(f"  tensors={len(info['tensors'])} params={info['param_count']} step={info['step']}")
        for name, shape in info["tensors"][:8]:
            print(f"  {name}: {tuple(shape)}")
        if len(info["tensors"]) > 8:
            print(f"  ... {len(info['tensors']) - 8} more")
        return 0
    if path.suffix == ".csv":
        return _inspect_csv(path)
    raise DataError(f"{path}: unrecognized format (magic {magic!r})")


def _inspect_csv(path: Path) -> int:
    import csv as _csv

    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = _csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != ("t", "x", "y", "observer"):
            raise DataError(f"{path}: not a gaze CSV (header {header!r})")
        count = 0
        observers = {}
        t_min = t_max = None
        for row in reader:
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"{path}: malformed row {count + 2}")
            count += 1
            observers[row[3]] = observers.get(row[3], 0) + 1
            try:
                t = float(row[0])
            except ValueError as exc:
                raise DataError(f"{path}: row {count + 1}: bad timestamp: {exc}") from exc
            t_min = t if t_min is None else min(t_min, t)
            t_max = t if t_max is None else max(t_max, t)
    print(f"{path}: gaze CSV")
    print(f"  rows={count} observers={len(observers)}")
    for oid in sorted(observers):
        print(f"  {oid}: {observers[oid]} samples")
    if t_min is not None:
        print(f"  t range [{t_min:.3f}, {t_max:.3f}] s")
    return 0


# ---------------------------------------------------------------- entrypoint


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="path to key=value config file")
    common.add_argument("--seed", type=int, default=None, help="override config seed")
    common.add_argument("--workers", type=int, default=None, help="worker thread count")

    parser = _Parser(prog="gazegen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="synthesize a stimulus/gaze dataset")

    p_train = sub.add_parser("train", parents=[common], help="train the denoiser")
    p_train.add_argument("--resume", action="store_true", help="continue from the checkpoint")

    p_gen = sub.add_parser("generate", parents=[common], help="sample gaze trajectories")
    p_gen.add_argument("--video", required=True, help="video id from the dataset manifest")
    p_gen.add_argument("--checkpoint", default=None, help="checkpoint path override")
    p_gen.add_argument("--out", default=None, help="output directory override")
    p_gen.add_argument("--num-samples", type=int, default=None)
    p_gen.add_argument("--horizon-s", type=float, default=None)
    p_gen.add_argument("--observer", default=None, help="history/reference observer id")
    p_gen.add_argument(
        "--cold-start",
        nargs=2,
        metavar=("x=V", "y=V"),
        default=None,
        help="replace warm-start history with a replicated point, e.g. x=0.5 y=0.5",
    )
    p_gen.add_argument(
        "--baseline",
        default=None,
        help="generate a baseline instead of model samples (random-walk)",
    )

    p_eval = sub.add_parser("evaluate", parents=[common], help="score generated trajectories")
    p_eval.add_argument("--gt-root", required=True, help="dataset root with manifest")
    p_eval.add_argument("--gen-root", required=True, help="directory of generated CSVs")
    p_eval.add_argument("--report", default=None, help="write a CSV report here")

    p_ins = sub.add_parser("inspect", parents=[common], help="describe a data file")
    p_ins.add_argument("path", help="SALB, GZDF, gaze CSV, or PGM directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command == "inspect":
            return cmd_inspect(ns.path)
        if ns.config is None:
            raise ConfigError(f"{ns.command} requires --config")
        cfg = parse_config(ns.config)
        seed = _resolve_seed(cfg, ns.seed)
        workers = _resolve_workers(cfg, ns.workers)
        if ns.command == "synth":
            return cmd_synth(cfg, seed, workers)
        if ns.command == "train":
            return cmd_train(cfg, seed, workers, resume=ns.resume)
        if ns.command == "generate":
            return cmd_generate(
                cfg,
                seed,
                workers,
                video=ns.video,
                checkpoint=ns.checkpoint,
                out_dir=ns.out,
                num_samples=ns.num_samples,
                horizon_s=ns.horizon_s,
                cold_start=_parse_cold_start(ns.cold_start),
                observer=ns.observer,
                baseline=ns.baseline,
            )
        if ns.command == "evaluate":
            return cmd_evaluate(
                cfg,
                workers,
                gt_root=ns.gt_root,
                gen_root=ns.gen_root,
                report_path=ns.report,
            )
        raise ConfigError(f"unknown command {ns.command!r}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericsError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entry()
