"""Command-line surface for the full pipeline.

Subcommands: prepare, train-vae, train-ldm, sample, eval, ph.  Exit codes
are a stable contract: 0 success, 1 usage/config error, 2 data or version
error, 3 numerical failure.  Set TOPOLIDAR_LOG=info (or debug) for
progress output.  Report-producing commands render PNG figures next to
their delimited outputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, format_config, load_config
from .diffusion import (
    Denoiser,
    encode_dataset,
    generate_scenes,
    make_schedule,
    train_ldm,
)
from .errors import (
    ConfigError,
    DataFormatError,
    EmptyInputError,
    InvariantError,
    NumericalError,
    ShapeError,
    VersionError,
)
from .figures import (
    save_bev_figure,
    save_diagram_figure,
    save_loss_curves,
    save_range_image_figure,
)
from .homology import persistence_0d, write_diagram_csv
from .metrics import (
    bev_histogram,
    chamfer,
    config_hash,
    frid_h,
    jsd,
    mmd,
    write_metric_report,
)
from .rangeimage import (
    load_range_image,
    project,
    read_kitti_bin,
    save_range_image,
    unproject,
    write_ply,
)
from .rng import substream
from .synth import synth_scene
from .vae import VaeModel, load_vae_model, train_vae

log = logging.getLogger("topolidar")


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here says 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _configure_logging() -> None:
    level = os.environ.get("TOPOLIDAR_LOG", "warning").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _load_image_dir(path: str | Path, proj=None) -> list:
    # .tlri files carry no projection metadata, so the run config decides
    # how rows/values map back to angles and ranges
    files = sorted(Path(path).glob("*.tlri"))
    if not files:
        raise EmptyInputError(f"no .tlri range images under {path}")
    return [load_range_image(f, proj) for f in files]


def _params_digest(model: VaeModel) -> str:
    digest = hashlib.sha256()
    for name in sorted(model.params()):
        digest.update(name.encode("utf-8"))
        digest.update(model.params()[name].data.tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------- commands


def cmd_prepare(args) -> int:
    cfg = _load_run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    proj = cfg.projection()
    rows = []

    if args.scans:
        files = sorted(Path(args.scans).glob("*.bin"))
        if not files:
            raise EmptyInputError(f"no .bin scans under {args.scans}")
        failures = []
        for i, scan in enumerate(files):
            try:
                cloud = read_kitti_bin(scan)
                img = project(cloud, proj, cfg.height, cfg.width)
            except (DataFormatError, EmptyInputError, OSError) as exc:
                failures.append(f"{scan}: {exc}")
                continue
            name = f"scene_{i:04d}.tlri"
            save_range_image(out / name, img)
            rows.append({"index": i, "file": name, "points": int(img.occupancy().sum()), "source": scan.name})
        for line in failures:
            print(line, file=sys.stderr)
        if failures:
            raise DataFormatError(f"{len(failures)} of {len(files)} scans unreadable")
    else:
        spec = cfg.scene_spec()
        for i in range(args.n):
            scene_seed = int(substream(cfg.seed, f"prepare-{i}").integers(2**31))
            cloud = synth_scene(scene_seed, spec, proj, cfg.height, cfg.width)
            img = project(cloud, proj, cfg.height, cfg.width)
            name = f"scene_{i:04d}.tlri"
            save_range_image(out / name, img)
            rows.append({"index": i, "file": name, "points": int(img.occupancy().sum()), "source": f"synth:{scene_seed}"})

    with (out / "manifest.csv").open("w", newline="", encoding="ascii") as fh:
        writer = csv.DictWriter(fh, fieldnames=["index", "file", "points", "source"])
        writer.writeheader()
        writer.writerows(rows)
    (out / "config.txt").write_text(format_config(cfg), encoding="ascii")
    log.info("prepared %d range images under %s", len(rows), out)
    print(f"prepared {len(rows)} scenes -> {out}")
    return 0


def cmd_train_vae(args) -> int:
    cfg = _load_run_config(args)
    images = _load_image_dir(args.data, cfg.projection())
    model = VaeModel(
        patch_h=cfg.f_v,
        patch_w=cfg.f_h,
        latent_dim=cfg.latent_dim,
        k=cfg.k,
        n_layers=cfg.n_layers,
        enc_channels=cfg.enc_channels,
        dec_channels=cfg.dec_channels,
        sum_branch=cfg.sum_branch,
        slope=cfg.slope,
        seed=cfg.seed,
        cfg=cfg.projection(),
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    history = train_vae(
        model,
        images,
        epochs=cfg.epochs_vae,
        base_lr=cfg.lr_vae,
        period=cfg.period,
        lambda_topo=cfg.lambda_topo,
        lambda_kl=cfg.lambda_kl,
        sample_cap=cfg.sample_cap,
        seed=cfg.seed,
        stochastic=cfg.stochastic,
        checkpoint_path=out,
        resume_from=args.resume,
        log_path=out.with_suffix(".log.jsonl"),
    )
    save_loss_curves(out.with_suffix(".loss.png"), history, ("total", "recon", "kl"))
    final = history[-1]["total"] if history else float("nan")
    print(f"trained autoencoder for {len(history)} steps (final loss {final:.4f}) -> {out}")
    return 0


def cmd_train_ldm(args) -> int:
    cfg = _load_run_config(args)
    images = _load_image_dir(args.data, cfg.projection())
    vae, _ = load_vae_model(args.vae)
    if vae.latent_dim != cfg.latent_dim:
        raise VersionError(
            f"config expects latent_dim={cfg.latent_dim}, checkpoint {args.vae} holds {vae.latent_dim}"
        )
    frozen = _params_digest(vae)
    latents = encode_dataset(vae, images)
    denoiser = Denoiser(
        vae.latent_dim,
        widths=cfg.widths,
        temb_dim=cfg.temb_dim,
        cond_dim=cfg.cond_dim,
        slope=cfg.slope,
        seed=cfg.seed,
    )
    sched = make_schedule(cfg.schedule, cfg.t_steps)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    history = train_ldm(
        denoiser,
        latents,
        sched,
        epochs=cfg.epochs_ldm,
        base_lr=cfg.lr_ldm,
        period=cfg.period,
        seed=cfg.seed,
        checkpoint_path=out,
        resume_from=args.resume,
        log_path=out.with_suffix(".log.jsonl"),
    )
    if _params_digest(vae) != frozen:
        raise InvariantError("frozen autoencoder parameters changed during diffusion training")
    log.info("freeze check passed: autoencoder digest unchanged")
    save_loss_curves(out.with_suffix(".loss.png"), history, ("loss",))
    final = history[-1]["loss"] if history else float("nan")
    print(f"trained denoiser for {len(history)} steps (final loss {final:.4f}) -> {out}")
    return 0


def cmd_sample(args) -> int:
    cfg = _load_run_config(args)
    steps = args.steps if args.steps is not None else cfg.sample_steps
    eta = args.eta if args.eta is not None else cfg.eta
    seed = args.seed if args.seed is not None else cfg.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.jsonl"
    if args.n == 0:
        manifest_path.write_text("", encoding="ascii")
        print("sampled 0 scenes")
        return 0
    t0 = time.perf_counter()
    clouds, images, manifest = generate_scenes(
        args.vae, args.ldm, args.n, args.cond, steps=steps, seed=seed, eta=eta
    )
    wall = time.perf_counter() - t0
    with manifest_path.open("w", encoding="ascii") as fh:
        for row in manifest:
            fh.write(json.dumps(row) + "\n")
    for i, (cloud, img) in enumerate(zip(clouds, images)):
        write_ply(out / f"sample_{i:04d}.ply", cloud)
        save_range_image(out / f"sample_{i:04d}.tlri", img)
    save_bev_figure(out / "bev.png", {"samples": bev_histogram(clouds)})
    rate = args.n / wall if wall > 0 else float("inf")
    log.info("sampled %d scenes in %.2fs", args.n, wall)
    print(f"sampled {args.n} scenes at {rate:.2f} samples/s -> {out}")
    return 0


def _pairwise_mmd(gen, ref, workers: int) -> float:
    if workers <= 1:
        return mmd(gen, ref)

    def best(r):
        return min(chamfer(g, r) for g in gen)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        matched = list(pool.map(best, ref))
    # same canonical reduction as metrics.mmd, so --workers never changes the value
    return float(np.mean(np.sort(matched)))


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    gen_imgs = _load_image_dir(args.gen, cfg.projection())
    ref_imgs = _load_image_dir(args.ref, cfg.projection())
    gen_clouds = [unproject(img) for img in gen_imgs]
    ref_clouds = [unproject(img) for img in ref_imgs]

    gen_hist = bev_histogram(gen_clouds)
    ref_hist = bev_histogram(ref_clouds)
    workers = args.workers if args.workers else (os.cpu_count() or 1)
    values = {
        "jsd": jsd(gen_hist, ref_hist),
        "mmd": _pairwise_mmd(gen_clouds, ref_clouds, workers),
        "frid_h": frid_h(gen_imgs, ref_imgs),
    }

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    digest = config_hash(cfg.as_dict())
    rows = [
        {"metric": name, "value": repr(value), "n_gen": len(gen_imgs), "n_ref": len(ref_imgs), "config_hash": digest}
        for name, value in values.items()
    ]
    write_metric_report(out / "report.csv", rows)
    save_bev_figure(out / "bev.png", {"generated": gen_hist, "reference": ref_hist})
    save_range_image_figure(out / "sample_gen.png", gen_imgs[0], "generated")
    save_range_image_figure(out / "sample_ref.png", ref_imgs[0], "reference")
    for name, value in values.items():
        print(f"{name}: {value:.6g}")
    log.info("evaluation written to %s", out)
    return 0


def cmd_ph(args) -> int:
    cfg = _load_run_config(args)
    path = Path(args.input)
    if path.suffix == ".bin":
        cloud = read_kitti_bin(path)
    elif path.suffix == ".tlri":
        cloud = unproject(load_range_image(path, cfg.projection()))
    else:
        raise DataFormatError(f"{path}: expected a .bin scan or .tlri range image")
    diagram = persistence_0d(cloud.points)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_diagram_csv(out, diagram)
    save_diagram_figure(out.with_suffix(".png"), diagram)
    total = diagram.total_persistence()
    print(f"{len(diagram.pairs)} pairs ({len(diagram.finite())} finite), total finite persistence {total:.6g}")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="topolidar", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--config", help="run-config file (key = value lines)")
        return p

    p = add("prepare", cmd_prepare, "render synthetic or scanned clouds to range images")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=16, help="synthetic scene count")
    p.add_argument("--seed", type=int)
    p.add_argument("--scans", help="directory of packed .bin scans instead of synthesis")

    p = add("train-vae", cmd_train_vae, "stage 1: fit the topology-regularized autoencoder")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume")

    p = add("train-ldm", cmd_train_ldm, "stage 2: fit the latent denoiser against a frozen stage 1")
    p.add_argument("--data", required=True)
    p.add_argument("--vae", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume")

    p = add("sample", cmd_sample, "draw scenes from trained checkpoints")
    p.add_argument("--vae", required=True)
    p.add_argument("--ldm", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--steps", type=int, help="default: sample_steps from config")
    p.add_argument("--cond", default="", help="optional text condition")
    p.add_argument("--seed", type=int, help="default: seed from config")
    p.add_argument("--eta", type=float, help="default: eta from config")

    p = add("eval", cmd_eval, "compare generated and reference range-image sets")
    p.add_argument("--gen", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=0, help="0 = all cores")

    p = add("ph", cmd_ph, "persistence diagram of one scan")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)

    return parser


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataFormatError, EmptyInputError, ShapeError, VersionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, InvariantError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
