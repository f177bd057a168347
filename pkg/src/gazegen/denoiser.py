"""Noise-prediction network, its optimizer, training loop, and checkpoints.

The network is a batchless 1-d U-Net over gaze windows (n, 3) -> (n, 2).
Each level runs two convolution blocks with timestep-conditioned biases,
cross-attention into pooled saliency tokens, and optionally self-attention.
All math runs in float64 on the autodiff tape in `nn`; parameters and Adam
moments are stored float32 so checkpoints round-trip bit-exactly.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .core import derive_seed
from .diffusion import DiffusionConfig, TrainingExample, make_training_example
from .errors import ConfigError, DataError, NumericsError

GZDF_MAGIC = b"GZDF"
GZDF_VERSION = 1

# Scale applied to normalized spatial token positions before the sinusoidal
# encoding so that neighboring grid cells are well separated in phase.
SPATIAL_PE_SCALE = 32.0

_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8

# Input lift: coordinate channels map [0, 1] -> [-1, 1], flag channel unchanged.
_LIFT_SCALE = np.array([2.0, 2.0, 1.0])
_LIFT_SHIFT = np.array([-1.0, -1.0, 0.0])


@dataclass(frozen=True)
class TimestepEmbedding:
    """Sinusoidal embedding of a scalar diffusion timestep."""

    dim: int

    def __post_init__(self):
        if self.dim < 2 or self.dim % 2:
            raise ValueError("embedding dim must be even and >= 2")

    def __call__(self, t: float) -> np.ndarray:
        return sinusoidal_embed(t, self.dim)


def sinusoidal_positions(positions: np.ndarray, dim: int) -> np.ndarray:
    """Interleaved sin/cos encoding of positions: component 2i is
    sin(p / 10000^(2i/dim)), component 2i+1 the matching cos."""
    if dim < 2 or dim % 2:
        raise ValueError("embedding dim must be even and >= 2")
    positions = np.asarray(positions, dtype=np.float64)
    i = np.arange(dim // 2, dtype=np.float64)
    freqs = 10000.0 ** (-2.0 * i / dim)
    angles = positions[:, None] * freqs[None, :]
    out = np.empty((positions.size, dim), dtype=np.float64)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def sinusoidal_embed(t: float, dim: int) -> np.ndarray:
    if t < 0:
        raise ValueError("timestep must be >= 0")
    return sinusoidal_positions(np.array([float(t)]), dim)[0]


def _spatial_pe(rows: np.ndarray, cols: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    return np.concatenate(
        [
            sinusoidal_positions(rows * SPATIAL_PE_SCALE, half),
            sinusoidal_positions(cols * SPATIAL_PE_SCALE, half),
        ],
        axis=1,
    )


@dataclass(frozen=True)
class DenoiserConfig:
    """Network shape. `window_len` must be divisible by 2^(levels - 1)."""

    window_len: int
    in_channels: int = 3
    base_width: int = 32
    level_mults: tuple[int, ...] = (1, 2, 4)
    attn_levels: tuple[int, ...] | None = None
    cond_dim: int = 32
    heads: int = 4

    def __post_init__(self):
        if self.window_len < 2:
            raise ValueError("window_len must be >= 2")
        if self.in_channels != 3:
            raise ValueError("input is (x, y, history flag): in_channels must be 3")
        levels = len(self.level_mults)
        if levels < 1 or any(m < 1 for m in self.level_mults):
            raise ValueError("level_mults must be a non-empty tuple of positive ints")
        if self.window_len % (1 << (levels - 1)):
            raise ValueError(
                f"window_len {self.window_len} not divisible by 2^{levels - 1}"
            )
        if self.attn_levels is None:
            object.__setattr__(self, "attn_levels", (levels - 1,))
        else:
            object.__setattr__(self, "attn_levels", tuple(self.attn_levels))
        if any(not (0 <= a < levels) for a in self.attn_levels):
            raise ValueError(f"attn_levels must lie in 0..{levels - 1}")
        if self.cond_dim < 4 or self.cond_dim % 4:
            raise ValueError("cond_dim must be a positive multiple of 4")
        if self.heads < 1:
            raise ValueError("heads must be >= 1")
        for w in self.widths:
            if w % self.heads:
                raise ValueError(f"width {w} not divisible by heads {self.heads}")
            if w % 2:
                raise ValueError(f"width {w} must be even")

    @property
    def levels(self) -> int:
        return len(self.level_mults)

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * m for m in self.level_mults)

    @property
    def time_dim(self) -> int:
        return 4 * self.base_width


@dataclass
class ParameterSet:
    """Named float32 tensors plus Adam moments and the optimizer step count."""

    values: dict[str, np.ndarray]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        if not self.m:
            self.m = {k: np.zeros_like(a) for k, a in self.values.items()}
        if not self.v:
            self.v = {k: np.zeros_like(a) for k, a in self.values.items()}
        for store in (self.values, self.m, self.v):
            for name, arr in store.items():
                if arr.dtype != np.float32:
                    raise ValueError(f"{name}: parameters must be float32")
        if set(self.m) != set(self.values) or set(self.v) != set(self.values):
            raise ValueError("moment tensors must mirror parameter names")
        if self.step < 0:
            raise ValueError("step must be >= 0")

    def names(self) -> list[str]:
        return sorted(self.values)

    def count(self) -> int:
        return sum(a.size for a in self.values.values())

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            values={k: a.copy() for k, a in self.values.items()},
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            step=self.step,
        )


def _gn_groups(channels: int) -> int:
    for g in range(min(8, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


def _conv_entries(prefix: str, cin: int, cout: int, time_dim: int) -> list:
    entries = [
        (f"{prefix}.gn.g", (cin,), "ones"),
        (f"{prefix}.gn.b", (cin,), "zeros"),
        (f"{prefix}.conv.w", (cout, cin, 3), "he_conv"),
        (f"{prefix}.conv.b", (cout,), "zeros"),
        (f"{prefix}.time.w", (cout, time_dim), "xavier"),
        (f"{prefix}.time.b", (cout,), "zeros"),
    ]
    if cin != cout:
        entries.append((f"{prefix}.res.w", (cout, cin, 1), "he_conv"))
    return entries


def _attn_entries(prefix: str, width: int, kv_dim: int) -> list:
    return [
        (f"{prefix}.ln.g", (width,), "ones"),
        (f"{prefix}.ln.b", (width,), "zeros"),
        (f"{prefix}.q.w", (width, width), "xavier"),
        (f"{prefix}.q.b", (width,), "zeros"),
        (f"{prefix}.k.w", (width, kv_dim), "xavier"),
        (f"{prefix}.k.b", (width,), "zeros"),
        (f"{prefix}.v.w", (width, kv_dim), "xavier"),
        (f"{prefix}.v.b", (width,), "zeros"),
        (f"{prefix}.o.w", (width, width), "xavier"),
        (f"{prefix}.o.b", (width,), "zeros"),
    ]


def param_registry(cfg: DenoiserConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    """Every parameter tensor's shape and initializer, keyed by name."""
    td = cfg.time_dim
    widths = cfg.widths
    entries: list = [
        ("stem.conv.w", (widths[0], cfg.in_channels, 3), "he_conv"),
        ("stem.conv.b", (widths[0],), "zeros"),
        ("time.fc1.w", (td, td), "xavier"),
        ("time.fc1.b", (td,), "zeros"),
        ("time.fc2.w", (td, td), "xavier"),
        ("time.fc2.b", (td,), "zeros"),
        ("cond.val.w", (cfg.cond_dim,), "normal"),
        ("cond.val.b", (cfg.cond_dim,), "zeros"),
        ("final.gn.g", (widths[0],), "ones"),
        ("final.gn.b", (widths[0],), "zeros"),
        ("final.conv.w", (2, widths[0], 1), "zeros"),
        ("final.conv.b", (2,), "zeros"),
    ]
    for i, w in enumerate(widths):
        cin = widths[0] if i == 0 else widths[i - 1]
        entries += _conv_entries(f"enc{i}.b0", cin, w, td)
        entries += _conv_entries(f"enc{i}.b1", w, w, td)
        entries += _attn_entries(f"enc{i}.xa", w, cfg.cond_dim)
        if i in cfg.attn_levels:
            entries += _attn_entries(f"enc{i}.sa", w, w)
    for i in range(cfg.levels - 2, -1, -1):
        w = widths[i]
        cin = widths[i + 1] + w
        entries += _conv_entries(f"dec{i}.b0", cin, w, td)
        entries += _conv_entries(f"dec{i}.b1", w, w, td)
        entries += _attn_entries(f"dec{i}.xa", w, cfg.cond_dim)
        if i in cfg.attn_levels:
            entries += _attn_entries(f"dec{i}.sa", w, w)
    registry = {}
    for name, shape, kind in entries:
        if name in registry:
            raise ValueError(f"duplicate parameter name {name}")
        registry[name] = (shape, kind)
    return registry


def init_params(cfg: DenoiserConfig, seed: int) -> ParameterSet:
    """Draw initial parameters; tensors are initialized in sorted-name order."""
    registry = param_registry(cfg)
    rng = np.random.default_rng(seed)
    values = {}
    for name in sorted(registry):
        shape, kind = registry[name]
        if kind == "zeros":
            arr = np.zeros(shape)
        elif kind == "ones":
            arr = np.ones(shape)
        elif kind == "normal":
            arr = rng.normal(0.0, 1.0, shape)
        elif kind == "he_conv":
            cout, cin, k = shape
            arr = rng.normal(0.0, math.sqrt(2.0 / (cin * k)), shape)
        elif kind == "xavier":
            arr = rng.normal(0.0, math.sqrt(1.0 / shape[-1]), shape)
        else:
            raise ValueError(f"unknown init kind {kind}")
        values[name] = arr.astype(np.float32)
    return ParameterSet(values=values)


@dataclass
class ForwardCache:
    """Tape handles needed to run backward after a cached forward."""

    output: nn.Tensor
    input_leaf: nn.Tensor
    param_leaves: dict[str, nn.Tensor]


class GazeDenoiser:
    """U-Net noise predictor; callable as denoiser(window, t, tokens) -> eps."""

    def __init__(self, cfg: DenoiserConfig, params: ParameterSet):
        registry = param_registry(cfg)
        missing = set(registry) ^ set(params.values)
        if missing:
            raise ConfigError(f"parameter names do not match config: {sorted(missing)}")
        for name, (shape, _) in registry.items():
            have = params.values[name].shape
            if have != shape:
                raise ConfigError(f"{name}: shape {have} does not match config {shape}")
        self.cfg = cfg
        self.params = params
        # Per-level query positions in sample units, fixed by the window length.
        self._level_pe: dict[int, np.ndarray] = {}
        n = cfg.window_len
        for i, w in enumerate(cfg.widths):
            length = n >> i
            centers = (np.arange(length, dtype=np.float64) + 0.5) * (n / length)
            self._level_pe[i] = sinusoidal_positions(centers, w)

    @classmethod
    def create(cls, cfg: DenoiserConfig, seed: int) -> "GazeDenoiser":
        return cls(cfg, init_params(cfg, seed))

    # ------------------------------------------------------------- building

    def _leaves(self) -> dict[str, nn.Tensor]:
        return {k: nn.leaf(v.astype(np.float64)) for k, v in self.params.values.items()}

    def _conv_block(self, p, prefix, x, tfeat):
        cin = x.shape[1]
        h = nn.groupnorm(x, p[f"{prefix}.gn.g"], p[f"{prefix}.gn.b"], _gn_groups(cin))
        h = nn.silu(h)
        h = nn.conv1d(h, p[f"{prefix}.conv.w"], p[f"{prefix}.conv.b"], pad=1)
        h = nn.add(h, nn.linear(tfeat, p[f"{prefix}.time.w"], p[f"{prefix}.time.b"]))
        if f"{prefix}.res.w" in p:
            cout = h.shape[1]
            res = nn.conv1d(x, p[f"{prefix}.res.w"], nn.constant(np.zeros(cout)), pad=0)
        else:
            res = x
        return nn.add(h, res)

    def _attention(self, p, prefix, x, kv, pe):
        width = x.shape[1]
        heads = self.cfg.heads
        dh = width // heads
        length = x.shape[0]
        h = nn.layernorm(x, p[f"{prefix}.ln.g"], p[f"{prefix}.ln.b"])
        hq = nn.add(h, nn.constant(pe))
        kv_in = hq if kv is None else kv
        q = nn.linear(hq, p[f"{prefix}.q.w"], p[f"{prefix}.q.b"])
        k = nn.linear(kv_in, p[f"{prefix}.k.w"], p[f"{prefix}.k.b"])
        v = nn.linear(kv_in, p[f"{prefix}.v.w"], p[f"{prefix}.v.b"])
        kl = k.shape[0]
        qh = nn.transpose(nn.reshape(q, (length, heads, dh)), (1, 0, 2))
        kh = nn.transpose(nn.reshape(k, (kl, heads, dh)), (1, 2, 0))
        vh = nn.transpose(nn.reshape(v, (kl, heads, dh)), (1, 0, 2))
        scores = nn.mul(nn.matmul(qh, kh), 1.0 / math.sqrt(dh))
        att = nn.softmax(scores, axis=-1)
        oh = nn.matmul(att, vh)
        o = nn.reshape(nn.transpose(oh, (1, 0, 2)), (length, width))
        return nn.add(x, nn.linear(o, p[f"{prefix}.o.w"], p[f"{prefix}.o.b"]))

    def _embed_tokens(self, p, tokens: np.ndarray) -> nn.Tensor:
        cd = self.cfg.cond_dim
        vals = tokens[:, 0:1]
        pe = _spatial_pe(tokens[:, 1], tokens[:, 2], cd)
        pe = pe + sinusoidal_positions(tokens[:, 3], cd)
        e = nn.mul(nn.constant(vals), p["cond.val.w"])
        e = nn.add(e, p["cond.val.b"])
        return nn.add(e, nn.constant(pe))

    def _forward(self, p, input_t: nn.Tensor, t: int, tokens: np.ndarray) -> nn.Tensor:
        cfg = self.cfg
        tokens = np.asarray(tokens, dtype=np.float64)
        if tokens.ndim != 2 or tokens.shape[1] != 4:
            raise ValueError("latent tokens must have shape (M, 4)")
        tok_e = self._embed_tokens(p, tokens)
        se = nn.constant(sinusoidal_embed(float(t), cfg.time_dim))
        tfeat = nn.linear(se, p["time.fc1.w"], p["time.fc1.b"])
        tfeat = nn.silu(tfeat)
        tfeat = nn.linear(tfeat, p["time.fc2.w"], p["time.fc2.b"])

        x = nn.add(nn.mul(input_t, nn.constant(_LIFT_SCALE)), nn.constant(_LIFT_SHIFT))
        x = nn.conv1d(x, p["stem.conv.w"], p["stem.conv.b"], pad=1)
        skips = []
        for i in range(cfg.levels):
            x = self._conv_block(p, f"enc{i}.b0", x, tfeat)
            x = self._conv_block(p, f"enc{i}.b1", x, tfeat)
            x = self._attention(p, f"enc{i}.xa", x, tok_e, self._level_pe[i])
            if i in cfg.attn_levels:
                x = self._attention(p, f"enc{i}.sa", x, None, self._level_pe[i])
            if i < cfg.levels - 1:
                skips.append(x)
                x = nn.avgpool2(x)
        for i in range(cfg.levels - 2, -1, -1):
            x = nn.upsample2(x)
            x = nn.concat([x, skips[i]], axis=1)
            x = self._conv_block(p, f"dec{i}.b0", x, tfeat)
            x = self._conv_block(p, f"dec{i}.b1", x, tfeat)
            x = self._attention(p, f"dec{i}.xa", x, tok_e, self._level_pe[i])
            if i in cfg.attn_levels:
                x = self._attention(p, f"dec{i}.sa", x, None, self._level_pe[i])
        x = nn.groupnorm(x, p["final.gn.g"], p["final.gn.b"], _gn_groups(cfg.widths[0]))
        x = nn.silu(x)
        return nn.conv1d(x, p["final.conv.w"], p["final.conv.b"], pad=0)

    def _check_input(self, window_input: np.ndarray) -> np.ndarray:
        window_input = np.asarray(window_input, dtype=np.float64)
        if window_input.shape != (self.cfg.window_len, 3):
            raise ValueError(
                f"window input shape {window_input.shape} != ({self.cfg.window_len}, 3)"
            )
        return window_input

    # ------------------------------------------------------------- interface

    def __call__(self, window_input: np.ndarray, t: int, tokens: np.ndarray) -> np.ndarray:
        window_input = self._check_input(window_input)
        with nn.no_grad():
            out = self._forward(self._leaves(), nn.constant(window_input), t, tokens)
        return out.value

    def forward(self, window_input: np.ndarray, t: int, tokens: np.ndarray) -> tuple:
        """Tape-building forward; returns (eps (n, 2), cache for backward)."""
        window_input = self._check_input(window_input)
        leaves = self._leaves()
        input_leaf = nn.leaf(window_input)
        out = self._forward(leaves, input_leaf, t, tokens)
        return out.value, ForwardCache(output=out, input_leaf=input_leaf, param_leaves=leaves)

    def backward(self, cache: ForwardCache, output_grad: np.ndarray) -> tuple:
        """Exact gradients from a cached forward: ({name: grad}, input grad)."""
        output_grad = np.asarray(output_grad, dtype=np.float64)
        if output_grad.shape != cache.output.value.shape:
            raise ValueError("output gradient shape mismatch")
        nn.backward(cache.output, output_grad)
        grads = {}
        for name, leaf_t in cache.param_leaves.items():
            grads[name] = (
                leaf_t.grad
                if leaf_t.grad is not None
                else np.zeros_like(leaf_t.value)
            )
        return grads, cache.input_leaf.grad

    def loss_and_grads(self, example: TrainingExample, tokens: np.ndarray) -> tuple:
        """Masked-suffix DDPM loss and its parameter gradients for one example."""
        leaves = self._leaves()
        pred = self._forward(
            leaves, nn.constant(example.model_input), example.t, tokens
        )
        mask_col = example.mask[:, None]
        total = float(example.mask.sum())
        if total == 0.0:
            raise ValueError("mask selects no rows")
        diff = nn.mul(nn.sub(pred, nn.constant(example.target_eps)), nn.constant(mask_col))
        loss_t = nn.mul(nn.tsum(nn.mul(diff, diff)), 1.0 / (2.0 * total))
        loss = float(loss_t.value)
        if not math.isfinite(loss):
            raise NumericsError(f"training loss not finite at t={example.t} k={example.k}")
        nn.backward(loss_t)
        grads = {
            name: (lf.grad if lf.grad is not None else np.zeros_like(lf.value))
            for name, lf in leaves.items()
        }
        return loss, grads


def adam_step(
    params: ParameterSet,
    grads: dict[str, np.ndarray],
    lr: float = 1e-4,
    beta1: float = _ADAM_BETA1,
    beta2: float = _ADAM_BETA2,
    eps: float = _ADAM_EPS,
) -> None:
    """One in-place Adam update with bias correction; increments the step count."""
    if set(grads) != set(params.values):
        raise ValueError("gradient names do not match parameters")
    t = params.step + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name in params.names():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != params.values[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} mismatch")
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"{name}: non-finite gradient")
        m = params.m[name].astype(np.float64) * beta1 + (1.0 - beta1) * g
        v = params.v[name].astype(np.float64) * beta2 + (1.0 - beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        params.values[name] = (
            params.values[name].astype(np.float64) - update
        ).astype(np.float32)
        params.m[name] = m.astype(np.float32)
        params.v[name] = v.astype(np.float32)
    params.step = t


@dataclass(frozen=True)
class TrainingData:
    """Training windows with their flattened conditioning tokens.

    `windows` is (num, n, 2); `tokens` is (num, M, 4) aligned with each
    window's position in its source clip.
    """

    windows: np.ndarray
    tokens: np.ndarray

    def __post_init__(self):
        windows = np.asarray(self.windows, dtype=np.float64)
        tokens = np.asarray(self.tokens, dtype=np.float64)
        if windows.ndim != 3 or windows.shape[2] != 2:
            raise ValueError("windows must have shape (num, n, 2)")
        if tokens.ndim != 3 or tokens.shape[2] != 4 or tokens.shape[0] != windows.shape[0]:
            raise ValueError("tokens must have shape (num, M, 4) matching windows")
        if windows.shape[0] < 1:
            raise ValueError("training set is empty")
        object.__setattr__(self, "windows", windows)
        object.__setattr__(self, "tokens", tokens)

    @property
    def size(self) -> int:
        return self.windows.shape[0]


@dataclass
class TrainResult:
    params: ParameterSet
    epoch_losses: list[float]


def train(
    data: TrainingData,
    dcfg: DiffusionConfig,
    mcfg: DenoiserConfig,
    epochs: int,
    seed: int,
    lr: float = 1e-4,
    params: ParameterSet | None = None,
    log_fn=None,
) -> TrainResult:
    """Train to `epochs` total epochs (resuming from `params` if given).

    Each example draws a fresh prefix length k ~ U{0..history_len}, timestep
    t ~ U{1..T}, and noise. The per-epoch RNG depends only on (seed, epoch),
    so a run resumed from a checkpoint is bit-identical to an uninterrupted
    one.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if dcfg.window.window_len != mcfg.window_len:
        raise ConfigError(
            f"diffusion window {dcfg.window.window_len} != model window {mcfg.window_len}"
        )
    n = dcfg.window.window_len
    if data.windows.shape[1] != n:
        raise ValueError(f"training windows have length {data.windows.shape[1]}, need {n}")
    if params is None:
        params = init_params(mcfg, derive_seed(seed, 0x1711))
    num = data.size
    if params.step % num:
        raise ConfigError(
            f"checkpoint step {params.step} is not a whole number of {num}-example epochs"
        )
    start_epoch = params.step // num
    model = GazeDenoiser(mcfg, params)
    k_max = dcfg.window.history_len
    t_max = dcfg.schedule.timesteps
    losses: list[float] = []
    for epoch in range(start_epoch, epochs):
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(num)
        total = 0.0
        for i in order:
            k = int(rng.integers(0, k_max + 1))
            t = int(rng.integers(1, t_max + 1))
            ex_seed = int(rng.integers(0, 2**63))
            ex = make_training_example(data.windows[i], k, t, dcfg.schedule, ex_seed)
            loss, grads = model.loss_and_grads(ex, data.tokens[i])
            adam_step(params, grads, lr=lr)
            total += loss
        losses.append(total / num)
        if log_fn is not None:
            log_fn(epoch, losses[-1])
    return TrainResult(params=params, epoch_losses=losses)


# ------------------------------------------------------------------ checkpoints


def save_checkpoint(params: ParameterSet, path: str | Path) -> None:
    """Write parameters and Adam moments in the GZDF container.

    Layout: magic, u32 version, u32 tensor count, then per tensor (sorted by
    name) a u16 name length, the UTF-8 name, u8 rank, u32 dims, and float32
    little-endian row-major data; a u64 optimizer step count closes the file.
    """
    tensors: dict[str, np.ndarray] = dict(params.values)
    for name in params.values:
        tensors[f"opt.m.{name}"] = params.m[name]
        tensors[f"opt.v.{name}"] = params.v[name]
    chunks = [struct.pack("<4sII", GZDF_MAGIC, GZDF_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = tensors[name]
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).astype("<f4").tobytes())
    chunks.append(struct.pack("<Q", params.step))
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(b"".join(chunks))
    except OSError as exc:
        raise DataError(f"{path}: cannot write: {exc}") from exc


def _parse_gzdf(blob: bytes, path: Path) -> tuple[dict[str, np.ndarray], int]:
    if len(blob) < 12:
        raise DataError(f"{path}: truncated header at offset {len(blob)}, need 12 bytes")
    magic, version, count = struct.unpack_from("<4sII", blob, 0)
    if magic != GZDF_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r} at offset 0")
    if version != GZDF_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    offset = 12
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        if offset + 2 > len(blob):
            raise DataError(f"{path}: truncated name length at offset {offset}")
        (nlen,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        if offset + nlen + 1 > len(blob):
            raise DataError(f"{path}: truncated tensor header at offset {offset}")
        name = blob[offset : offset + nlen].decode("utf-8")
        offset += nlen
        rank = blob[offset]
        offset += 1
        if offset + 4 * rank > len(blob):
            raise DataError(f"{path}: truncated dims for {name} at offset {offset}")
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        nbytes = size * 4
        if offset + nbytes > len(blob):
            raise DataError(
                f"{path}: truncated data for {name} at offset {offset}, need {nbytes} bytes"
            )
        if name in tensors:
            raise DataError(f"{path}: duplicate tensor {name}")
        data = np.frombuffer(blob, dtype="<f4", count=size, offset=offset)
        tensors[name] = data.reshape(dims).astype(np.float32)
        offset += nbytes
    if offset + 8 > len(blob):
        raise DataError(f"{path}: missing step counter at offset {offset}")
    (step,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    if offset != len(blob):
        raise DataError(f"{path}: {len(blob) - offset} trailing bytes at offset {offset}")
    return tensors, int(step)


def load_checkpoint(path: str | Path, cfg: DenoiserConfig) -> ParameterSet:
    """Read a GZDF checkpoint and validate it against the model config."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read: {exc}") from exc
    tensors, step = _parse_gzdf(blob, path)
    registry = param_registry(cfg)
    values, m, v = {}, {}, {}
    for name, (shape, _) in registry.items():
        for store, key in ((values, name), (m, f"opt.m.{name}"), (v, f"opt.v.{name}")):
            if key not in tensors:
                raise DataError(f"{path}: missing tensor {key}")
            arr = tensors.pop(key)
            if arr.shape != shape:
                raise DataError(
                    f"{path}: tensor {key} has shape {arr.shape}, config expects {shape}"
                )
            store[name] = arr
    if tensors:
        raise DataError(f"{path}: unexpected tensors {sorted(tensors)[:4]}")
    return ParameterSet(values=values, m=m, v=v, step=step)


def inspect_checkpoint(path: str | Path) -> dict:
    """Structural walk of a GZDF file without a config: names, shapes, step."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read: {exc}") from exc
    tensors, step = _parse_gzdf(blob, path)
    return {
        "tensors": [(name, tensors[name].shape) for name in sorted(tensors)],
        "step": step,
        "param_count": sum(
            a.size for n, a in tensors.items() if not n.startswith("opt.")
        ),
    }


# ------------------------------------------------------------------ gradcheck


def finite_difference_report(
    cfg: DenoiserConfig,
    seed: int,
    h: float = 1e-3,
    max_components_per_tensor: int | None = None,
) -> dict[str, float]:
    """Compare analytic gradients against central differences.

    Builds one random masked training example, computes analytic gradients
    through the full network + loss, then probes every parameter component
    with central differences at steps h and h/2, Richardson-combined to
    cancel the quadratic truncation term. Perturbations are applied in the
    float64 compute domain so the steps are exactly symmetric; the stored
    float32 parameters are the linearization point for both routes. Returns
    the max relative error per tensor plus a "__max__" summary entry;
    relative error is |fd - analytic| / max(|fd|, |analytic|, 1e-8).
    """
    from .diffusion import linear_beta_schedule

    params = init_params(cfg, seed)
    rng = np.random.default_rng(derive_seed(seed, 0xFD))
    # Move off the zero-initialized output layer: at exact zeros the loss is
    # constant in every upstream parameter and the comparison would be vacuous.
    for name in params.names():
        jitter = rng.normal(0.0, 0.05, params.values[name].shape)
        params.values[name] = (
            params.values[name].astype(np.float64) + jitter
        ).astype(np.float32)
    model = GazeDenoiser(cfg, params)
    n = cfg.window_len
    sched = linear_beta_schedule(1000)
    window = rng.uniform(0.0, 1.0, (n, 2))
    k = int(rng.integers(0, n))
    t = int(rng.integers(1, sched.timesteps + 1))
    example = make_training_example(window, k, t, sched, derive_seed(seed, 0xE6))
    sets = max(2, n // 4)
    g = 4
    tokens = np.empty((sets * g, 4))
    tokens[:, 0] = rng.uniform(0.0, 1.0, sets * g)
    tokens[:, 1] = rng.uniform(0.0, 1.0, sets * g)
    tokens[:, 2] = rng.uniform(0.0, 1.0, sets * g)
    tokens[:, 3] = np.repeat((np.arange(sets) + 0.5) * (n / sets), g)

    _, analytic = model.loss_and_grads(example, tokens)

    base = {k2: v.astype(np.float64) for k2, v in params.values.items()}

    def loss_value(pname: str, i: int, delta: float) -> float:
        flat = base[pname].reshape(-1)
        orig = flat[i]
        flat[i] = orig + delta
        try:
            with nn.no_grad():
                leaves = {k2: nn.Tensor(v) for k2, v in base.items()}
                pred = model._forward(
                    leaves, nn.constant(example.model_input), example.t, tokens
                )
        finally:
            flat[i] = orig
        diff = (pred.value - example.target_eps) * example.mask[:, None]
        return float(np.sum(diff * diff) / (2.0 * example.mask.sum()))

    report: dict[str, float] = {}
    worst = 0.0
    for name in params.names():
        count = params.values[name].size
        if max_components_per_tensor is not None and count > max_components_per_tensor:
            idx = rng.choice(count, size=max_components_per_tensor, replace=False)
        else:
            idx = np.arange(count)
        ga_flat = analytic[name].reshape(-1)
        tensor_worst = 0.0
        for i in idx:
            d_full = (loss_value(name, i, h) - loss_value(name, i, -h)) / (2.0 * h)
            d_half = (loss_value(name, i, h / 2) - loss_value(name, i, -h / 2)) / h
            fd = (4.0 * d_half - d_full) / 3.0
            ga = float(ga_flat[i])
            rel = abs(fd - ga) / max(abs(fd), abs(ga), 1e-8)
            tensor_worst = max(tensor_worst, rel)
        report[name] = tensor_worst
        worst = max(worst, tensor_worst)
    report["__max__"] = worst
    return report
