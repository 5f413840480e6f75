"""Latent diffusion over the autoencoder's latent grids.

Forward process: the usual variance-preserving chain
z_t = sqrt(1-beta_t) z_{t-1} + sqrt(beta_t) eps_t, whose marginal has the
closed form z_t = sqrt(abar_t) z_0 + sqrt(1-abar_t) eps.  The denoiser is a
small U-shaped conv net over the (gh, gw, c) grid with a sinusoidal time
embedding and an optional condition vector added at the bottleneck.
Sampling walks a uniform subsequence of timesteps deterministically
(eta=0) or with ancestral noise (eta=1).

Latents are standardized per channel before diffusion and de-standardized
after sampling; the stats travel inside the checkpoint.
"""

from __future__ import annotations

import json
import time
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_tensors, save_tensors
from .errors import ConfigError, ShapeError, VersionError
from .graph import _he
from .optim import Adam, cosine_lr
from .rangeimage import PointCloud, RangeImage, unproject
from .rng import substream
from .vae import VaeModel, load_vae_model

BETA_START = 1e-4
BETA_END = 2e-2


@dataclass
class NoiseSchedule:
    """Forward-process schedule; alpha_bars has length T+1 with abar_0 = 1."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        if self.betas.ndim != 1 or len(self.betas) < 1:
            raise ConfigError("schedule needs at least one step")
        if not ((self.betas > 0.0) & (self.betas < 1.0)).all():
            raise ConfigError("betas must lie strictly inside (0, 1)")
        if not (np.diff(self.alpha_bars) < 0.0).all():
            raise ConfigError("alpha_bars must be strictly decreasing")

    @property
    def steps(self) -> int:
        return len(self.betas)


def make_schedule(kind: str = "linear", n_steps: int = 1000) -> NoiseSchedule:
    """Linear betas 1e-4 -> 2e-2, or the squared-cosine alternative."""
    if n_steps < 1:
        raise ConfigError(f"schedule needs n_steps >= 1, got {n_steps}")
    if kind == "linear":
        betas = np.linspace(BETA_START, BETA_END, n_steps)
    elif kind == "cosine":
        s = 0.008
        grid = np.arange(n_steps + 1) / n_steps
        f = np.cos((grid + s) / (1 + s) * np.pi / 2) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], 1e-8, 0.999)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    alphas = 1.0 - betas
    alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
    return NoiseSchedule(betas, alphas, alpha_bars)


def q_sample(z0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form marginal of t forward steps from z0 under fixed noise."""
    if not 1 <= t <= sched.steps:
        raise ConfigError(f"t must lie in [1, {sched.steps}], got {t}")
    if eps.shape != z0.shape:
        raise ShapeError(f"noise shape {eps.shape} does not match latent {z0.shape}")
    ab = sched.alpha_bars[t]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def time_features(t: float, dim: int) -> np.ndarray:
    """Interleaved sin/cos features of the raw timestep."""
    if dim % 2:
        raise ConfigError(f"time embedding dim must be even, got {dim}")
    j = np.arange(dim)
    freq = 10000.0 ** (-(j - j % 2) / dim)
    phase = t * freq
    return np.where(j % 2 == 0, np.sin(phase), np.cos(phase))


class ConditionEmbedder:
    """Deterministic token-hash embedding; empty text maps to the zero vector."""

    def __init__(self, dim: int, table_size: int = 4096, seed: int = 0):
        self.dim = dim
        rng = substream(seed, "cond-table")
        self.table = rng.standard_normal((table_size, dim)) / np.sqrt(dim)

    def __call__(self, text: str) -> np.ndarray:
        tokens = text.lower().split()
        if not tokens:
            return np.zeros(self.dim)
        rows = [self.table[zlib.crc32(tok.encode("utf-8")) % len(self.table)] for tok in tokens]
        return np.mean(rows, axis=0)


class _Block:
    """pad -> 3x3 conv -> add time projection -> leaky relu."""

    def __init__(self, cin: int, cout: int, temb_dim: int, slope: float, seed: int, name: str):
        self.w = _he(substream(seed, f"{name}-w"), cin * 9, (cout, cin, 3, 3))
        self.b = T.Tensor(np.zeros((cout, 1, 1)), requires_grad=True)
        self.tw = _he(substream(seed, f"{name}-t"), temb_dim, (temb_dim, cout))
        self.tb = T.Tensor(np.zeros(cout), requires_grad=True)
        self.slope = slope
        self.cout = cout

    def params(self, prefix: str) -> dict[str, T.Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b, f"{prefix}.tw": self.tw, f"{prefix}.tb": self.tb}

    def __call__(self, x: T.Tensor, temb: T.Tensor, extra: T.Tensor | None = None) -> T.Tensor:
        h = T.conv2d(T.pad2d(x, 1, 1, "edge"), self.w) + self.b
        h = h + (temb @ self.tw + self.tb).reshape((self.cout, 1, 1))
        if extra is not None:
            h = h + extra
        return T.leaky_relu(h, self.slope)


class Denoiser:
    """U-shaped epsilon predictor over (gh, gw, c) latent grids, depth 2."""

    def __init__(
        self,
        in_channels: int,
        widths: tuple[int, int] = (32, 64),
        temb_dim: int = 32,
        cond_dim: int = 16,
        slope: float = 0.2,
        seed: int = 0,
    ):
        if len(widths) != 2:
            raise ConfigError(f"the U-shape has two levels, so widths needs two entries, got {widths}")
        w0, w1 = widths
        self.in_channels = in_channels
        self.widths = (w0, w1)
        self.temb_dim = temb_dim
        self.cond_dim = cond_dim
        self.slope = slope
        self.t_w1 = _he(substream(seed, "temb-1"), temb_dim, (temb_dim, temb_dim))
        self.t_b1 = T.Tensor(np.zeros(temb_dim), requires_grad=True)
        self.t_w2 = _he(substream(seed, "temb-2"), temb_dim, (temb_dim, temb_dim))
        self.t_b2 = T.Tensor(np.zeros(temb_dim), requires_grad=True)
        self.down0 = _Block(in_channels, w0, temb_dim, slope, seed, "down0")
        self.down1 = _Block(w0, w1, temb_dim, slope, seed, "down1")
        self.mid = _Block(w1, w1, temb_dim, slope, seed, "mid")
        self.w_cond = _he(substream(seed, "cond"), cond_dim, (cond_dim, w1))
        self.up1 = _Block(w1 + w1, w0, temb_dim, slope, seed, "up1")
        self.up0 = _Block(w0 + w0, w0, temb_dim, slope, seed, "up0")
        # zero-init output keeps the initial prediction at exactly zero,
        # so the first-step loss sits at the unit-normal second moment
        self.w_out = T.Tensor(np.zeros((in_channels, w0, 3, 3)), requires_grad=True)
        self.b_out = T.Tensor(np.zeros((in_channels, 1, 1)), requires_grad=True)

    def params(self) -> dict[str, T.Tensor]:
        out = {"temb.w1": self.t_w1, "temb.b1": self.t_b1, "temb.w2": self.t_w2, "temb.b2": self.t_b2}
        for name in ("down0", "down1", "mid", "up1", "up0"):
            out.update(getattr(self, name).params(name))
        out["cond.w"] = self.w_cond
        out["out.w"] = self.w_out
        out["out.b"] = self.b_out
        return out

    def _time_embedding(self, t: float) -> T.Tensor:
        feats = T.Tensor(time_features(t, self.temb_dim)[None, :])
        hidden = T.leaky_relu(feats @ self.t_w1 + self.t_b1, self.slope)
        return hidden @ self.t_w2 + self.t_b2

    def __call__(self, z: T.Tensor, t: float, cond: np.ndarray | None = None) -> T.Tensor:
        if z.ndim != 3:
            raise ShapeError(f"latent grid must be (gh, gw, c), got {z.shape}")
        gh, gw, c = z.shape
        if c != self.in_channels:
            raise ShapeError(f"denoiser built for {self.in_channels} channels, got {c}")
        if gh % 4 or gw % 4:
            raise ShapeError(f"grid dims must be divisible by 4 for two poolings, got {gh}x{gw}")
        temb = self._time_embedding(t)
        x = T.transpose(z, (2, 0, 1))
        d0 = self.down0(x, temb)
        d1 = self.down1(T.avgpool2d(d0), temb)
        extra = None
        if cond is not None and np.any(cond):
            if cond.shape != (self.cond_dim,):
                raise ShapeError(f"condition vector must be ({self.cond_dim},), got {cond.shape}")
            proj = T.Tensor(cond[None, :]) @ self.w_cond
            extra = proj.reshape((self.widths[1], 1, 1))
        m = self.mid(T.avgpool2d(d1), temb, extra)
        u1 = self.up1(T.concatenate([T.upsample2d(m, 2, 2), d1], axis=0), temb)
        u0 = self.up0(T.concatenate([T.upsample2d(u1, 2, 2), d0], axis=0), temb)
        out = T.conv2d(T.pad2d(u0, 1, 1, "edge"), self.w_out) + self.b_out
        return T.transpose(out, (1, 2, 0))


def ldm_loss(denoiser, z0: np.ndarray, cond: np.ndarray | None, sched: NoiseSchedule, rng) -> T.Tensor:
    """Noise-prediction MSE at a uniformly drawn timestep."""
    t = int(rng.integers(1, sched.steps + 1))
    eps = rng.standard_normal(z0.shape)
    z_t = q_sample(z0, t, eps, sched)
    pred = denoiser(T.Tensor(z_t), t, cond)
    diff = pred - T.Tensor(eps)
    return (diff * diff).mean()


def sample_timesteps(total: int, steps: int) -> list[int]:
    """Uniform descending subsequence of [1, total] that always includes total."""
    if not 1 <= steps <= total:
        raise ConfigError(f"steps must lie in [1, {total}], got {steps}")
    if steps == 1:
        return [total]
    ts = [int(round(1 + i * (total - 1) / (steps - 1))) for i in range(steps)]
    return ts[::-1]


def sample(
    denoiser,
    sched: NoiseSchedule,
    shape: tuple[int, int, int],
    steps: int,
    cond: np.ndarray | None = None,
    rng=None,
    eta: float = 0.0,
    clip: float | None = None,
) -> np.ndarray:
    """Reverse the chain along a timestep subsequence; eta=0 is deterministic.

    `clip` bounds the per-step clean-sample estimate (static thresholding):
    near t = T the estimate divides by sqrt(alpha_bar) ~ 0, so a small
    prediction error can throw the whole trajectory off the data manifold.
    """
    if rng is None:
        rng = substream(0, "sample")
    z = rng.standard_normal(shape)
    order = sample_timesteps(sched.steps, steps)
    for i, t in enumerate(order):
        t_prev = order[i + 1] if i + 1 < len(order) else 0
        ab_t = sched.alpha_bars[t]
        ab_p = sched.alpha_bars[t_prev]
        eps_hat = denoiser(T.Tensor(z), t, cond).data
        z0_hat = (z - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
        if clip is not None:
            z0_hat = np.clip(z0_hat, -clip, clip)
        sigma = eta * np.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_p)
        direction = np.sqrt(max(1.0 - ab_p - sigma**2, 0.0)) * eps_hat
        z = np.sqrt(ab_p) * z0_hat + direction
        if sigma > 0.0:
            z = z + sigma * rng.standard_normal(shape)
    return z


@dataclass
class LatentStats:
    """Per-channel standardization of latent grids."""

    mean: np.ndarray
    std: np.ndarray


def latent_stats(latents: list[np.ndarray]) -> LatentStats:
    stack = np.stack(latents)
    mean = stack.mean(axis=(0, 1, 2))
    # dead channels would otherwise divide by zero
    std = np.maximum(stack.std(axis=(0, 1, 2)), 1e-8)
    return LatentStats(mean, std)


def standardize(z: np.ndarray, stats: LatentStats) -> np.ndarray:
    return (z - stats.mean) / stats.std


def destandardize(z: np.ndarray, stats: LatentStats) -> np.ndarray:
    return z * stats.std + stats.mean


def encode_dataset(model: VaeModel, images: list[RangeImage]) -> list[np.ndarray]:
    """Evaluation-mode latents for a frozen autoencoder."""
    out = []
    for img in images:
        z, _, _, _ = model.encode_latent(T.Tensor(img.plane[None]))
        out.append(z.data.copy())
    return out


def save_ldm_checkpoint(
    path,
    denoiser: Denoiser,
    opt: Adam | None,
    step: int,
    sched: NoiseSchedule,
    stats: LatentStats,
    grid: tuple[int, int, int],
) -> None:
    tensors = {f"model.{k}": v.data for k, v in denoiser.params().items()}
    if opt is not None:
        tensors.update({f"opt.{k}": v for k, v in opt.state_tensors().items()})
    tensors["meta.step"] = np.array([float(step)])
    tensors["meta.grid"] = np.array(grid, dtype=np.float64)
    tensors["sched.betas"] = sched.betas
    tensors["stats.mean"] = stats.mean
    tensors["stats.std"] = stats.std
    tensors["arch.widths"] = np.array(denoiser.widths, dtype=np.float64)
    tensors["arch.dims"] = np.array(
        [denoiser.in_channels, denoiser.temb_dim, denoiser.cond_dim], dtype=np.float64
    )
    tensors["arch.slope"] = np.array([denoiser.slope])
    save_tensors(path, tensors)


def load_ldm_checkpoint(path, denoiser: Denoiser | None = None, opt: Adam | None = None):
    """Returns (denoiser, sched, stats, grid, step); builds the net if not given."""
    tensors = load_tensors(path)
    for key in ("meta.grid", "sched.betas", "stats.mean", "stats.std", "arch.widths", "arch.dims"):
        if key not in tensors:
            raise VersionError(f"{path}: checkpoint lacks {key!r}")
    if denoiser is None:
        cin, temb_dim, cond_dim = (int(v) for v in tensors["arch.dims"])
        denoiser = Denoiser(
            cin,
            widths=tuple(int(w) for w in tensors["arch.widths"]),
            temb_dim=temb_dim,
            cond_dim=cond_dim,
            slope=float(tensors["arch.slope"][0]),
        )
    for name, p in denoiser.params().items():
        key = f"model.{name}"
        if key not in tensors:
            raise VersionError(f"checkpoint lacks parameter {key!r}")
        if tensors[key].shape != p.data.shape:
            raise VersionError(
                f"checkpoint parameter {key!r} has shape {tensors[key].shape}, "
                f"model expects {p.data.shape}"
            )
        p.data = tensors[key].copy()
    if opt is not None:
        opt_state = {k[len("opt."):]: v for k, v in tensors.items() if k.startswith("opt.")}
        if not opt_state:
            raise VersionError(f"{path}: checkpoint holds no optimizer state")
        opt.load_state_tensors(opt_state)
    betas = tensors["sched.betas"]
    sched = NoiseSchedule(betas, 1.0 - betas, np.concatenate([[1.0], np.cumprod(1.0 - betas)]))
    stats = LatentStats(tensors["stats.mean"], tensors["stats.std"])
    grid = tuple(int(v) for v in tensors["meta.grid"])
    step = int(tensors["meta.step"][0])
    return denoiser, sched, stats, grid, step


def train_ldm(
    denoiser: Denoiser,
    latents: list[np.ndarray],
    sched: NoiseSchedule,
    epochs: int,
    base_lr: float = 1e-4,
    period: int = 100,
    seed: int = 0,
    cond: np.ndarray | None = None,
    checkpoint_path=None,
    resume_from=None,
    log_path=None,
) -> list[dict]:
    """Stage-2 training on frozen-encoder latents (standardized internally)."""
    if not latents:
        raise ConfigError("training needs a non-empty latent set")
    stats = latent_stats(latents)
    data = [standardize(z, stats) for z in latents]
    grid = data[0].shape
    params = denoiser.params()
    opt = Adam(params, lr=base_lr)
    start = 0
    if resume_from is not None:
        _, sched, stats, grid, start = load_ldm_checkpoint(resume_from, denoiser, opt)

    history: list[dict] = []
    log_file = Path(log_path).open("a", encoding="ascii") if log_path else None
    try:
        total = epochs * len(data)
        for step in range(start, total):
            epoch = step // len(data)
            opt.lr = cosine_lr(base_lr, epoch, period)
            rng = substream(seed, f"ldm-{step}")
            opt.zero_grad()
            loss = ldm_loss(denoiser, data[step % len(data)], cond, sched, rng)
            loss.backward()
            opt.step()
            record = {"step": step, "epoch": epoch, "lr": opt.lr, "loss": loss.item()}
            history.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
    finally:
        if log_file:
            log_file.close()
    if checkpoint_path is not None:
        save_ldm_checkpoint(checkpoint_path, denoiser, opt, total, sched, stats, grid)
    return history


def generate_scenes(
    vae_ckpt,
    ldm_ckpt,
    n: int,
    cond_text: str = "",
    steps: int = 50,
    seed: int = 0,
    eta: float = 0.0,
    clip: float | None = 3.0,
) -> tuple[list[PointCloud], list[RangeImage], list[dict]]:
    """Sample latents, decode to range images, unproject to clouds.

    Returns (clouds, images, manifest); manifest rows carry per-scene
    wall-clock so callers can report throughput.  Sampling runs in the
    standardized latent space, so the default `clip` of 3 sigma is a
    loose bound.
    """
    model, _ = load_vae_model(vae_ckpt)
    denoiser, sched, stats, grid, _ = load_ldm_checkpoint(ldm_ckpt)
    if grid[2] != model.latent_dim:
        raise VersionError(
            f"latent dim mismatch: diffusion grid holds {grid[2]} channels, "
            f"autoencoder expects {model.latent_dim}"
        )
    cond = ConditionEmbedder(denoiser.cond_dim)(cond_text)
    clouds: list[PointCloud] = []
    images: list[RangeImage] = []
    manifest: list[dict] = []
    for i in range(n):
        t0 = time.perf_counter()
        rng = substream(seed, f"scene-{i}")
        z = sample(denoiser, sched, grid, steps, cond, rng, eta, clip)
        values = model.decode(T.Tensor(destandardize(z, stats))).data
        img = RangeImage(values[:, :, None], model.cfg)
        cloud = unproject(img)
        wall = time.perf_counter() - t0
        clouds.append(cloud)
        images.append(img)
        manifest.append(
            {
                "index": i,
                "seed": seed,
                "steps": steps,
                "cond": cond_text,
                "points": len(cloud.points),
                "wall_s": round(wall, 4),
            }
        )
    return clouds, images, manifest
