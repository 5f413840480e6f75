"""Topology-preserving autoencoder over range images.

Encoder: the graph encoder (patch embed + k-NN message passing) followed
by a linear head to per-node (mean, log-variance); the latent grid is the
reparameterized sample during training and the mean at evaluation.
Decoder: nearest-neighbor upsampling stages interleaved with circular
convolutions (columns wrap, rows replicate at the border) and a final
sigmoid, so the output is a valid range image in (0, 1).

The training loss is masked L1 over the target's occupied pixels plus the
topology penalty on the decoded image and on the layer-2/layer-4 encoder
taps, plus a small KL term (a VAE used as a diffusion substrate
conventionally keeps a mild one; lambda_kl=0 switches it off).
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_tensors, save_tensors
from .errors import ConfigError, ShapeError, VersionError
from .graph import GraphEncoder, _he
from .homology import topo_loss, topo_loss_on_image
from .optim import Adam, cosine_lr
from .rangeimage import ProjectionConfig, RangeImage
from .rng import substream


class Decoder:
    """Latent grid (gh, gw, c) -> range-image values (H, W) in (0, 1)."""

    def __init__(
        self,
        latent_dim: int,
        f_v: int = 4,
        f_h: int = 8,
        channels: tuple[int, ...] = (16, 8, 8),
        slope: float = 0.2,
        seed: int = 0,
    ):
        n_v, n_h = math.log2(f_v), math.log2(f_h)
        if n_v != int(n_v) or n_h != int(n_h):
            raise ConfigError(f"upsampling factors must be powers of two, got {f_v}, {f_h}")
        self.n_v, self.n_h = int(n_v), int(n_h)
        n_stages = max(self.n_v, self.n_h)
        if len(channels) != n_stages:
            raise ConfigError(
                f"decoder needs one channel count per stage: {n_stages} stages, got {channels}"
            )
        self.slope = slope
        self.conv_w: list[T.Tensor] = []
        self.conv_b: list[T.Tensor] = []
        cin = latent_dim
        for i, cout in enumerate(channels):
            rng = substream(seed, f"dec-conv{i}")
            self.conv_w.append(_he(rng, cin * 9, (cout, cin, 3, 3)))
            self.conv_b.append(T.Tensor(np.zeros((cout, 1, 1)), requires_grad=True))
            cin = cout
        rng = substream(seed, "dec-out")
        self.w_out = _he(rng, cin * 9, (1, cin, 3, 3))
        self.b_out = T.Tensor(np.zeros((1, 1, 1)), requires_grad=True)

    def params(self, prefix: str = "dec") -> dict[str, T.Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            out[f"{prefix}.conv{i}.w"] = w
            out[f"{prefix}.conv{i}.b"] = b
        out[f"{prefix}.out.w"] = self.w_out
        out[f"{prefix}.out.b"] = self.b_out
        return out

    def __call__(self, z: T.Tensor) -> T.Tensor:
        if z.ndim != 3:
            raise ShapeError(f"latent grid must be (gh, gw, c), got {z.shape}")
        x = T.transpose(z, (2, 0, 1))
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            sv = 2 if i < self.n_v else 1
            sh = 2 if i < self.n_h else 1
            x = T.upsample2d(x, sv, sh)
            x = T.leaky_relu(T.conv2d(T.pad2d(x, 1, 1, "edge"), w) + b, self.slope)
        x = T.sigmoid(T.conv2d(T.pad2d(x, 1, 1, "edge"), self.w_out) + self.b_out)
        return x.reshape((x.shape[1], x.shape[2]))


class VaeModel:
    """Graph encoder + (mu, logvar) head + circular-conv decoder."""

    def __init__(
        self,
        patch_h: int = 4,
        patch_w: int = 8,
        latent_dim: int = 16,
        k: int = 20,
        n_layers: int = 4,
        enc_channels: tuple[int, ...] = (8, 16),
        dec_channels: tuple[int, ...] = (16, 8, 8),
        sum_branch: bool = True,
        slope: float = 0.2,
        seed: int = 0,
        cfg: ProjectionConfig | None = None,
    ):
        self.latent_dim = latent_dim
        self.cfg = cfg if cfg is not None else ProjectionConfig()
        # recorded so checkpoints are self-describing (see load_vae_model)
        self.arch = {
            "patch_h": patch_h,
            "patch_w": patch_w,
            "latent_dim": latent_dim,
            "k": k,
            "n_layers": n_layers,
            "enc_channels": tuple(enc_channels),
            "dec_channels": tuple(dec_channels),
            "sum_branch": sum_branch,
            "slope": slope,
        }
        self.encoder = GraphEncoder(
            patch_h=patch_h,
            patch_w=patch_w,
            dim=latent_dim,
            k=k,
            n_layers=n_layers,
            conv_channels=enc_channels,
            sum_branch=sum_branch,
            slope=slope,
            seed=seed,
        )
        rng = substream(seed, "latent-head")
        self.w_mu = _he(rng, latent_dim, (latent_dim, latent_dim))
        self.b_mu = T.Tensor(np.zeros(latent_dim), requires_grad=True)
        # zero-init keeps logvar at exactly 0 (unit sigma) at step 0, so
        # the reparameterized sample can't overflow exp before training
        self.w_logvar = T.Tensor(np.zeros((latent_dim, latent_dim)), requires_grad=True)
        self.b_logvar = T.Tensor(np.zeros(latent_dim), requires_grad=True)
        self.decoder = Decoder(latent_dim, f_v=patch_h, f_h=patch_w, channels=dec_channels, slope=slope, seed=seed)

    def params(self) -> dict[str, T.Tensor]:
        out = {f"enc.{k}": v for k, v in self.encoder.params().items()}
        out["head.w_mu"] = self.w_mu
        out["head.b_mu"] = self.b_mu
        out["head.w_logvar"] = self.w_logvar
        out["head.b_logvar"] = self.b_logvar
        out.update(self.decoder.params())
        return out

    def encode_latent(self, values: T.Tensor, eps_rng=None):
        """Returns (z grid (gh, gw, c), taps, mu (N, c), logvar (N, c)).

        eps_rng drives the reparameterized sample; None means evaluation
        mode (z is the mean).
        """
        grid, taps = self.encoder(values)
        gh, gw, d = grid.shape
        flat = grid.reshape((gh * gw, d))
        mu = flat @ self.w_mu + self.b_mu
        logvar = flat @ self.w_logvar + self.b_logvar
        if eps_rng is None:
            z = mu
        else:
            eps = eps_rng.standard_normal((gh * gw, d))
            z = mu + T.exp(logvar * 0.5) * T.Tensor(eps)
        return z.reshape((gh, gw, d)), taps, mu, logvar

    def decode(self, z: T.Tensor) -> T.Tensor:
        return self.decoder(z)

    def reconstruct(self, img: RangeImage) -> RangeImage:
        """Evaluation-mode round trip to a range image."""
        values = T.Tensor(img.plane[None, :, :])
        z, _, _, _ = self.encode_latent(values)
        out = self.decode(z)
        return RangeImage(out.data[:, :, None], img.meta)


def masked_l1(recon: T.Tensor, target: np.ndarray, mask: np.ndarray) -> T.Tensor:
    """Mean absolute error over the target's occupied pixels only."""
    m = mask.astype(np.float64)
    count = float(m.sum())
    if count == 0:
        return T.Tensor(0.0)
    return (T.absv(recon - T.Tensor(target)) * T.Tensor(m)).sum() / count


def kl_divergence(mu: T.Tensor, logvar: T.Tensor) -> T.Tensor:
    """KL(q(z) || N(0, I)) averaged over nodes; 0 iff mu=0 and logvar=0."""
    n = mu.shape[0]
    terms = (mu * mu + T.exp(logvar) - logvar - 1.0) * 0.5
    return terms.sum() / float(n)


def subsample_rows(x: T.Tensor, cap: int) -> T.Tensor:
    """Evenly strided row subsample, same scheme as the pixel sampler."""
    n = x.shape[0]
    if n <= cap:
        return x
    idx = np.floor(np.arange(cap) * n / cap).astype(np.intp)
    return T.gather(x, idx)


def vae_loss(
    model: VaeModel,
    img: RangeImage,
    eps_rng=None,
    lambda_topo: float = 0.01,
    lambda_kl: float = 1e-6,
    sample_cap: int = 512,
) -> tuple[T.Tensor, dict[str, float]]:
    values = T.Tensor(img.plane[None, :, :])
    z, taps, mu, logvar = model.encode_latent(values, eps_rng)
    recon = model.decode(z)

    loss = masked_l1(recon, img.plane, img.occupancy())
    parts = {"recon": loss.item()}

    if lambda_topo != 0.0:
        recon_img = RangeImage(recon.data[:, :, None], img.meta)
        t_img, _ = topo_loss_on_image(recon, recon_img, sample_cap)
        topo_terms = [t_img]
        for layer in sorted(taps):
            topo_terms.append(topo_loss(subsample_rows(taps[layer], sample_cap)))
        for name, term in zip(["topo_image", "topo_l2", "topo_l4"], topo_terms):
            parts[name] = term.item()
            loss = loss + lambda_topo * term
    kl = kl_divergence(mu, logvar)
    parts["kl"] = kl.item()
    if lambda_kl != 0.0:
        loss = loss + lambda_kl * kl
    parts["total"] = loss.item()
    return loss, parts


def save_vae_checkpoint(path, model: VaeModel, opt: Adam | None, step: int) -> None:
    tensors = {f"model.{k}": v.data for k, v in model.params().items()}
    if opt is not None:
        tensors.update({f"opt.{k}": v for k, v in opt.state_tensors().items()})
    tensors["meta.step"] = np.array([float(step)])
    a, cfg = model.arch, model.cfg
    tensors["arch.shape"] = np.array(
        [a["patch_h"], a["patch_w"], a["latent_dim"], a["k"], a["n_layers"], int(a["sum_branch"])],
        dtype=np.float64,
    )
    tensors["arch.enc_channels"] = np.array(a["enc_channels"], dtype=np.float64)
    tensors["arch.dec_channels"] = np.array(a["dec_channels"], dtype=np.float64)
    tensors["arch.slope"] = np.array([a["slope"]])
    tensors["cfg.projection"] = np.array(
        [cfg.fov_down_deg, cfg.fov_up_deg, cfg.r_min, cfg.r_max, int(cfg.log_scale)]
    )
    save_tensors(path, tensors)


def load_vae_model(path) -> tuple[VaeModel, int]:
    """Rebuild a model purely from a checkpoint file; returns (model, step)."""
    tensors = load_tensors(path)
    for key in ("arch.shape", "arch.enc_channels", "arch.dec_channels", "arch.slope", "cfg.projection"):
        if key not in tensors:
            raise VersionError(f"{path}: checkpoint lacks {key!r}")
    ph, pw, dim, k, n_layers, sum_branch = tensors["arch.shape"]
    fov_down, fov_up, r_min, r_max, log_scale = tensors["cfg.projection"]
    model = VaeModel(
        patch_h=int(ph),
        patch_w=int(pw),
        latent_dim=int(dim),
        k=int(k),
        n_layers=int(n_layers),
        enc_channels=tuple(int(c) for c in tensors["arch.enc_channels"]),
        dec_channels=tuple(int(c) for c in tensors["arch.dec_channels"]),
        sum_branch=bool(sum_branch),
        slope=float(tensors["arch.slope"][0]),
        cfg=ProjectionConfig(
            fov_down_deg=float(fov_down),
            fov_up_deg=float(fov_up),
            r_min=float(r_min),
            r_max=float(r_max),
            log_scale=bool(log_scale),
        ),
    )
    load_model_params(model, tensors)
    return model, int(tensors["meta.step"][0])


def load_model_params(model, tensors: dict[str, np.ndarray], prefix: str = "model.") -> None:
    """Copy checkpoint arrays into a live model; shapes must line up."""
    for name, p in model.params().items():
        key = prefix + name
        if key not in tensors:
            raise VersionError(f"checkpoint lacks parameter {key!r}")
        if tensors[key].shape != p.data.shape:
            raise VersionError(
                f"checkpoint parameter {key!r} has shape {tensors[key].shape}, "
                f"model expects {p.data.shape}"
            )
        p.data = tensors[key].copy()


def load_vae_checkpoint(path, model: VaeModel, opt: Adam | None = None) -> int:
    """Restore params (and optimizer state if given); returns the stored step."""
    tensors = load_tensors(path)
    load_model_params(model, tensors)
    if opt is not None:
        opt_state = {k[len("opt."):]: v for k, v in tensors.items() if k.startswith("opt.")}
        if not opt_state:
            raise VersionError(f"{path}: checkpoint holds no optimizer state")
        opt.load_state_tensors(opt_state)
    return int(tensors["meta.step"][0])


def train_vae(
    model: VaeModel,
    dataset: list[RangeImage],
    epochs: int,
    base_lr: float = 4.5e-6,
    period: int = 100,
    lambda_topo: float = 0.01,
    lambda_kl: float = 1e-6,
    sample_cap: int = 512,
    seed: int = 0,
    stochastic: bool = True,
    checkpoint_path=None,
    resume_from=None,
    log_path=None,
) -> list[dict]:
    """Stage-1 training; per-step RNG substreams make resume bit-exact."""
    if not dataset:
        raise ConfigError("training needs a non-empty dataset")
    params = model.params()
    opt = Adam(params, lr=base_lr)
    start = 0
    if resume_from is not None:
        start = load_vae_checkpoint(resume_from, model, opt)

    history: list[dict] = []
    log_file = Path(log_path).open("a", encoding="ascii") if log_path else None
    try:
        total = epochs * len(dataset)
        for step in range(start, total):
            epoch = step // len(dataset)
            opt.lr = cosine_lr(base_lr, epoch, period)
            img = dataset[step % len(dataset)]
            eps_rng = substream(seed, f"vae-eps-{step}") if stochastic else None
            opt.zero_grad()
            loss, parts = vae_loss(
                model, img, eps_rng, lambda_topo=lambda_topo, lambda_kl=lambda_kl, sample_cap=sample_cap
            )
            loss.backward()
            opt.step()
            record = {"step": step, "epoch": epoch, "lr": opt.lr, **parts}
            history.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
    finally:
        if log_file:
            log_file.close()
    if checkpoint_path is not None:
        save_vae_checkpoint(checkpoint_path, model, opt, total)
    return history
