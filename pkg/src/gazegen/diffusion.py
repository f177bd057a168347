"""Diffusion processes over gaze windows: noising, masked loss, DDIM, rollout.

A window holds n = history_len + predict_len consecutive samples. Training
noises only the suffix while the history prefix stays clean; sampling keeps
the prefix pinned at every denoising step and integrates the suffix from pure
noise. Long trajectories come from an autoregressive rollout that slides the
window by predict_len per step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .conditioning import LatentSequence, flatten_latent_slice
from .core import GazeTrajectory, WindowSpec, _readonly
from .errors import NumericsError

# A denoiser maps (window (n, 3), timestep, latent tokens (M, 4)) -> eps (n, 2).
DenoiserFn = Callable[[np.ndarray, int, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete diffusion schedule; arrays are indexed by t - 1 for t in 1..T."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        alpha = np.asarray(self.alpha, dtype=np.float64)
        alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 2:
            raise ValueError("beta must be 1-d with at least two steps")
        if alpha.shape != beta.shape or alpha_bar.shape != beta.shape:
            raise ValueError("schedule arrays must share one shape")
        if beta.min() <= 0.0 or beta.max() >= 1.0:
            raise ValueError("beta values must lie in (0, 1)")
        if np.any(np.diff(beta) < 0):
            raise ValueError("beta must be non-decreasing")
        if not np.allclose(alpha, 1.0 - beta, rtol=0, atol=0):
            raise ValueError("alpha must equal 1 - beta")
        if np.any(np.diff(alpha_bar) >= 0) or alpha_bar.min() <= 0 or alpha_bar.max() >= 1:
            raise ValueError("alpha_bar must be strictly decreasing within (0, 1)")
        object.__setattr__(self, "beta", _readonly(beta))
        object.__setattr__(self, "alpha", _readonly(alpha))
        object.__setattr__(self, "alpha_bar", _readonly(alpha_bar))

    @property
    def timesteps(self) -> int:
        return self.beta.size

    def alpha_bar_at(self, t: int) -> float:
        """Cumulative signal fraction at step t; t = 0 means the clean data."""
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bar[t - 1])

    def _check_t(self, t: int) -> None:
        if not (1 <= t <= self.timesteps):
            raise ValueError(f"timestep {t} outside 1..{self.timesteps}")


def linear_beta_schedule(
    timesteps: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2
) -> NoiseSchedule:
    """Linearly spaced beta from beta_start at t=1 to beta_end at t=T."""
    if timesteps < 2:
        raise ValueError("timesteps must be >= 2")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = beta_start + np.arange(timesteps, dtype=np.float64) / (timesteps - 1) * (
        beta_end - beta_start
    )
    alpha = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


@dataclass(frozen=True)
class DiffusionConfig:
    """Everything the sampler needs besides the denoiser itself."""

    schedule: NoiseSchedule
    window: WindowSpec
    sample_steps: int = 50
    cond_stride: int = 5
    eta: float = 0.0
    rate_hz: float = 30.0

    def __post_init__(self):
        if not (1 <= self.sample_steps <= self.schedule.timesteps):
            raise ValueError("sample_steps must lie in 1..timesteps")
        if self.cond_stride < 1:
            raise ValueError("cond_stride must be >= 1")
        if not (0.0 <= self.eta <= 1.0):
            raise ValueError("eta must lie in [0, 1]")
        if self.rate_hz <= 0:
            raise ValueError("rate_hz must be positive")

    @property
    def sets_per_window(self) -> int:
        return -(-self.window.window_len // self.cond_stride)


@dataclass
class TrainingExample:
    """One masked-suffix training example.

    `model_input` is (n, 3): clean history rows with flag 1, noised suffix
    rows with flag 0. `mask` is 1.0 exactly on the suffix; `target_eps` holds
    the injected noise (zeros on the prefix, which the loss never reads).
    """

    model_input: np.ndarray
    mask: np.ndarray
    target_eps: np.ndarray
    k: int
    t: int


def forward_noise(
    x0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule
) -> np.ndarray:
    """Closed-form forward process: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    ab = schedule.alpha_bar_at(int(t))
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def make_training_example(
    window: np.ndarray, k: int, t: int, schedule: NoiseSchedule, seed: int
) -> TrainingExample:
    """Build the masked training input for one window with prefix length k."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2 or window.shape[1] != 2:
        raise ValueError("window must have shape (n, 2)")
    n = window.shape[0]
    if not (0 <= k < n):
        raise ValueError(f"prefix length {k} outside 0..{n - 1}")
    schedule._check_t(int(t))
    rng = np.random.default_rng(seed)
    eps_suffix = rng.standard_normal((n - k, 2))
    noised = forward_noise(window[k:], t, eps_suffix, schedule)
    model_input = np.zeros((n, 3), dtype=np.float64)
    model_input[:k, :2] = window[:k]
    model_input[:k, 2] = 1.0
    model_input[k:, :2] = noised
    mask = np.zeros(n, dtype=np.float64)
    mask[k:] = 1.0
    target_eps = np.zeros((n, 2), dtype=np.float64)
    target_eps[k:] = eps_suffix
    return TrainingExample(
        model_input=model_input, mask=mask, target_eps=target_eps, k=int(k), t=int(t)
    )


def ddpm_loss(pred_eps: np.ndarray, target_eps: np.ndarray, mask: np.ndarray) -> float:
    """Mean squared error over masked rows only (both coordinates count)."""
    pred_eps = np.asarray(pred_eps, dtype=np.float64)
    target_eps = np.asarray(target_eps, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if pred_eps.shape != target_eps.shape or pred_eps.ndim != 2 or pred_eps.shape[1] != 2:
        raise ValueError("pred_eps and target_eps must both have shape (n, 2)")
    if mask.shape != (pred_eps.shape[0],):
        raise ValueError("mask must have shape (n,)")
    total = float(mask.sum())
    if total == 0.0:
        raise ValueError("mask selects no rows")
    diff = (pred_eps - target_eps) * mask[:, None]
    return float(np.sum(diff * diff) / (2.0 * total))


def ddpm_loss_grad(
    pred_eps: np.ndarray, target_eps: np.ndarray, mask: np.ndarray
) -> tuple[float, np.ndarray]:
    """Masked loss together with its exact gradient w.r.t. pred_eps."""
    pred_eps = np.asarray(pred_eps, dtype=np.float64)
    target_eps = np.asarray(target_eps, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    loss = ddpm_loss(pred_eps, target_eps, mask)
    total = float(mask.sum())
    grad = (pred_eps - target_eps) * mask[:, None] / total
    return loss, grad


def ddim_timesteps(timesteps: int, sample_steps: int) -> list[int]:
    """Descending timestep subset for DDIM: stride floor(T/S) down from T."""
    if not (1 <= sample_steps <= timesteps):
        raise ValueError("sample_steps must lie in 1..timesteps")
    stride = timesteps // sample_steps
    taus = [timesteps - i * stride for i in range(sample_steps)]
    if taus[-1] < 1:
        raise ValueError("timestep subset underflows step 1")
    return taus


def ddim_sample_window(
    history: np.ndarray,
    latent_slice: np.ndarray,
    denoiser: DenoiserFn,
    cfg: DiffusionConfig,
    seed: int,
) -> np.ndarray:
    """Sample one window suffix by deterministic DDIM (stochastic when eta > 0).

    `history` is the clean (history_len, 2) prefix; `latent_slice` the
    (sets_per_window, G, 3) conditioning slice aligned with the window start.
    Returns (predict_len, 2) clamped into the unit square. The prefix rows of
    the model input are reset to the clean history before every denoiser
    call, and the per-step clean estimate is clamped to the unit square
    before the state update.
    """
    history = np.asarray(history, dtype=np.float64)
    spec = cfg.window
    if history.shape != (spec.history_len, 2):
        raise ValueError(
            f"history shape {history.shape} != ({spec.history_len}, 2)"
        )
    latent_slice = np.asarray(latent_slice, dtype=np.float64)
    if latent_slice.ndim != 3 or latent_slice.shape[0] != cfg.sets_per_window:
        raise ValueError(
            f"latent slice must have {cfg.sets_per_window} sets, got {latent_slice.shape}"
        )
    tokens = flatten_latent_slice(latent_slice, cfg.cond_stride)
    k, n = spec.history_len, spec.window_len
    sched = cfg.schedule
    taus = ddim_timesteps(sched.timesteps, cfg.sample_steps)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((spec.predict_len, 2))
    model_input = np.zeros((n, 3), dtype=np.float64)
    model_input[:k, :2] = history
    model_input[:k, 2] = 1.0
    for i, t in enumerate(taus):
        t_prev = taus[i + 1] if i + 1 < len(taus) else 0
        model_input[k:, :2] = x
        eps = np.asarray(denoiser(model_input, t, tokens), dtype=np.float64)
        if eps.shape != (n, 2):
            raise ValueError(f"denoiser returned shape {eps.shape}, expected ({n}, 2)")
        if not np.all(np.isfinite(eps)):
            raise NumericsError(f"denoiser output not finite at timestep {t}")
        eps_suffix = eps[k:]
        ab_t = sched.alpha_bar_at(t)
        ab_prev = sched.alpha_bar_at(t_prev)
        x0_pred = (x - math.sqrt(1.0 - ab_t) * eps_suffix) / math.sqrt(ab_t)
        # Keep the running clean estimate inside the data cube; the division
        # by sqrt(ab_t) amplifies denoiser error by ~1/sqrt(ab_t) at high t,
        # and an unbounded estimate feeds back into every later step. The
        # direction noise is recomputed from the clamped estimate so the
        # update stays an exact DDIM step toward it.
        np.clip(x0_pred, 0.0, 1.0, out=x0_pred)
        eps_dir = (x - math.sqrt(ab_t) * x0_pred) / math.sqrt(1.0 - ab_t)
        if cfg.eta > 0.0 and t_prev > 0:
            sigma = (
                cfg.eta
                * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t))
                * math.sqrt(1.0 - ab_t / ab_prev)
            )
        else:
            sigma = 0.0
        direction = math.sqrt(max(1.0 - ab_prev - sigma * sigma, 0.0))
        x = math.sqrt(ab_prev) * x0_pred + direction * eps_dir
        if sigma > 0.0:
            x = x + sigma * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise NumericsError(f"sample state not finite after timestep {t}")
    return np.clip(x, 0.0, 1.0)


@dataclass
class RolloutState:
    """Mutable state of an autoregressive rollout."""

    history: np.ndarray
    emitted: list = field(default_factory=list)
    sample_cursor: int = 0
    step_index: int = 0


@dataclass(frozen=True)
class RolloutResult:
    trajectory: GazeTrajectory
    truncated: bool
    windows_run: int


def init_rollout_state(init_history: np.ndarray, spec: WindowSpec) -> RolloutState:
    """Start a rollout from a full (history_len, 2) buffer or one (2,) point.

    A single point is the cold start: it is replicated to fill the whole
    history window.
    """
    init_history = np.asarray(init_history, dtype=np.float64)
    k = spec.history_len
    if init_history.shape == (2,):
        history = np.tile(init_history, (k, 1))
    elif init_history.shape == (k, 2):
        history = init_history.copy()
    else:
        raise ValueError(
            f"init_history must have shape ({k}, 2) or (2,), got {init_history.shape}"
        )
    if history.min() < 0.0 or history.max() > 1.0:
        raise ValueError("history coordinates must lie in [0, 1]")
    return RolloutState(history=history, sample_cursor=k)


def rollout(
    init_history: np.ndarray,
    latents: LatentSequence,
    denoiser: DenoiserFn,
    cfg: DiffusionConfig,
    horizon_samples: int,
    seed: int,
    video_id: str = "generated",
    observer_id: str = "gen",
) -> RolloutResult:
    """Generate `horizon_samples` gaze samples by sliding-window DDIM.

    Window step m covers source samples [m * predict_len, m * predict_len + n)
    and is conditioned on the latent sets overlapping that span; its sampler
    seed is ``seed XOR m``. Generated samples are timestamped at the config
    rate starting at sample index history_len (the first generated sample of a
    warm-started rollout directly follows the supplied history). If the latent
    sequence runs out before the horizon, the result is truncated and flagged.
    """
    if horizon_samples < 1:
        raise ValueError("horizon_samples must be >= 1")
    if not (0 <= seed < 2**64):
        raise ValueError("seed must fit in an unsigned 64-bit integer")
    if latents.stride_frames != cfg.cond_stride:
        raise ValueError(
            f"latent stride {latents.stride_frames} != config stride {cfg.cond_stride}"
        )
    spec = cfg.window
    state = init_rollout_state(init_history, spec)
    n, p = spec.window_len, spec.predict_len
    sets_needed = cfg.sets_per_window
    truncated = False
    produced = 0
    while produced < horizon_samples:
        window_start = state.step_index * p
        set_start = window_start // cfg.cond_stride
        if set_start + sets_needed > latents.num_sets:
            truncated = True
            break
        latent_slice = latents.slice_sets(set_start, sets_needed)
        window_seed = seed ^ state.step_index
        suffix = ddim_sample_window(state.history, latent_slice, denoiser, cfg, window_seed)
        state.emitted.append(suffix)
        state.history = np.concatenate([state.history, suffix], axis=0)[-spec.history_len :]
        state.sample_cursor += p
        state.step_index += 1
        produced += p
    if produced == 0:
        raise ValueError("latent sequence too short for even one window")
    samples = np.concatenate(state.emitted, axis=0)[:horizon_samples]
    k = spec.history_len
    times = (k + np.arange(samples.shape[0], dtype=np.float64)) / cfg.rate_hz
    traj = GazeTrajectory(
        t=times,
        xy=samples,
        rate_hz=cfg.rate_hz,
        observer_id=observer_id,
        video_id=video_id,
    )
    return RolloutResult(trajectory=traj, truncated=truncated, windows_run=state.step_index)
