"""Unpaired GAN training (CycleGAN or CUT) on arm crops."""
from __future__ import annotations

import csv
import itertools
import logging
import time
from pathlib import Path

import numpy as np
import torch

from .. import checkpoint
from ..compositing import extract_arm
from ..config import GanConfig
from ..datagen import list_clips, read_clip
from ..errors import InvalidArgument, MissingData, NumericError
from .crops import CropPolicy, crop_frame
from .losses import discriminator_loss, total_cut_loss, total_cyclegan_loss
from .networks import Generator, PatchDiscriminator, PatchSampleMLP, init_weights

log = logging.getLogger(__name__)

VARIANTS = ("cyclegan", "cut")
LOG_FIELDS = ["epoch", "adv_ab", "adv_ba", "cycle", "identity", "nce", "loss_G", "loss_D", "lr",
              "seconds"]


class ImagePool:
    """Replay buffer of past fakes; with p = 0.5 a stored image is returned instead."""

    def __init__(self, size: int, generator: torch.Generator):
        self.size = size
        self.gen = generator
        self.images: list[torch.Tensor] = []

    def query(self, batch: torch.Tensor) -> torch.Tensor:
        if self.size == 0:
            return batch
        out = []
        for img in batch.detach():
            if len(self.images) < self.size:
                self.images.append(img.clone())
                out.append(img)
            elif torch.rand(1, generator=self.gen).item() > 0.5:
                k = int(torch.randint(0, self.size, (1,), generator=self.gen))
                out.append(self.images[k].clone())
                self.images[k] = img.clone()
            else:
                out.append(img)
        return torch.stack(out)

    def state(self):
        return [t.clone() for t in self.images]


def crop_policy(cfg: GanConfig) -> CropPolicy:
    return CropPolicy(cfg.resolution, cfg.crop_dilate, cfg.crop_mode)


def load_domain_images(domain_dir, cfg: GanConfig, seed=None) -> torch.Tensor:
    """Arm crops (or whole frames) sampled deterministically from a dataset folder."""
    clips = list_clips(domain_dir)
    if not clips:
        raise MissingData(f"no clips found in {domain_dir}")
    policy = crop_policy(cfg)
    frames = []
    for path in clips:
        clip = read_clip(path)
        source = clip.video if cfg.crop_mode == "full_frame" else extract_arm(clip.video, clip.masks)
        for f, m in zip(source.data, clip.masks.data):
            frames.append((f, m))
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    order = rng.permutation(len(frames))
    out = []
    for i in order:
        crop, _ = crop_frame(*frames[i], policy)
        if crop is not None:
            out.append(crop)
        if len(out) >= cfg.images_per_domain:
            break
    if not out:
        raise MissingData(f"no non-empty arm crops in {domain_dir}")
    return torch.stack(out)


def build_models(cfg: GanConfig, variant: str, seed: int):
    if variant not in VARIANTS:
        raise InvalidArgument(f"unknown GAN variant {variant!r}")
    gen = torch.Generator().manual_seed(seed)
    G = Generator(base_width=cfg.base_width, n_residual_blocks=cfg.n_residual_blocks, direction="A->B")
    D_Y = PatchDiscriminator(base_width=cfg.disc_width, n_layers=cfg.disc_layers)
    models = {"G": G, "D_Y": D_Y}
    if variant == "cyclegan":
        models["F"] = Generator(base_width=cfg.base_width, n_residual_blocks=cfg.n_residual_blocks,
                                direction="B->A")
        models["D_X"] = PatchDiscriminator(base_width=cfg.disc_width, n_layers=cfg.disc_layers)
    else:
        models["nce"] = PatchSampleMLP([G.layer_channels(l) for l in G.nce_layers()], cfg.nce_dim)
    for name in sorted(models):
        init_weights(models[name], gen)
    return models


def gan_arch(cfg: GanConfig, variant: str, models) -> str:
    meta = {"variant": variant, "generator": models["G"].meta, "discriminator": models["D_Y"].meta,
            "resolution": cfg.resolution, "crop_mode": cfg.crop_mode}
    return checkpoint.arch_hash(meta, *(models[k] for k in sorted(models)))


def _lr_factor(epoch, total):
    # constant for the first half, then linear decay towards zero over the rest
    half = total // 2
    if epoch < half:
        return 1.0
    return 1.0 - (epoch - half + 1) / float(total - half + 1)


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


def train_gan(dataset_a_dir, dataset_b_dir, cfg: GanConfig, variant="cyclegan", out_dir=".",
              resume=None, max_epochs=None):
    """Train and write ``ckpt_epoch_XXXX.pt`` + ``last.pt`` + ``losses.csv`` to ``out_dir``.

    ``max_epochs`` stops early (used to simulate interruption); the LR
    schedule still follows ``cfg.epochs``.  Returns the checkpoint paths written.
    """
    torch.use_deterministic_algorithms(True)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    imgs_a = load_domain_images(dataset_a_dir, cfg, seed=cfg.seed)
    imgs_b = load_domain_images(dataset_b_dir, cfg, seed=cfg.seed + 1)
    if len(imgs_a) < cfg.batch_size or len(imgs_b) < cfg.batch_size:
        raise MissingData("fewer images than one batch")

    models = build_models(cfg, variant, cfg.seed)
    arch = gan_arch(cfg, variant, models)
    g_params = itertools.chain(*(models[k].parameters() for k in ("G", "F", "nce") if k in models))
    d_params = itertools.chain(*(models[k].parameters() for k in ("D_X", "D_Y") if k in models))
    opt_g = torch.optim.Adam(list(g_params), lr=cfg.lr, betas=tuple(cfg.betas))
    opt_d = torch.optim.Adam(list(d_params), lr=cfg.lr, betas=tuple(cfg.betas))
    data_gen = torch.Generator().manual_seed(cfg.seed + 17)
    pool_gen = torch.Generator().manual_seed(cfg.seed + 29)
    pool_a = ImagePool(cfg.image_buffer_size, pool_gen)
    pool_b = ImagePool(cfg.image_buffer_size, pool_gen)
    start = 0
    log_path = out_dir / "losses.csv"

    if resume is not None:
        ck = checkpoint.load(resume, kind="gan", expect_arch=arch)
        if ck["config"] != _cfg_dict(cfg):
            raise InvalidArgument("resume checkpoint was trained with a different GAN config")
        for k, m in models.items():
            m.load_state_dict(ck["models"][k])
        opt_g.load_state_dict(ck["opt_g"])
        opt_d.load_state_dict(ck["opt_d"])
        data_gen.set_state(ck["rng"]["data"])
        pool_gen.set_state(ck["rng"]["pool"])
        pool_a.images = list(ck["pools"]["a"])
        pool_b.images = list(ck["pools"]["b"])
        start = ck["epoch"]
        _truncate_log(log_path, start)
    elif log_path.exists():
        log_path.unlink()

    written = []
    stop = cfg.epochs if max_epochs is None else min(cfg.epochs, max_epochs)
    for epoch in range(start, stop):
        t0 = time.time()
        lr = cfg.lr * _lr_factor(epoch, cfg.epochs)
        _set_lr(opt_g, lr)
        _set_lr(opt_d, lr)
        for m in models.values():
            m.train()
        perm_a = torch.randperm(len(imgs_a), generator=data_gen)
        perm_b = torch.randperm(len(imgs_b), generator=data_gen)
        n_batches = min(len(imgs_a), len(imgs_b)) // cfg.batch_size
        sums: dict[str, float] = {}
        for bi in range(n_batches):
            sl = slice(bi * cfg.batch_size, (bi + 1) * cfg.batch_size)
            ba, bb = imgs_a[perm_a[sl]], imgs_b[perm_b[sl]]
            terms = _step(models, variant, cfg, ba, bb, opt_g, opt_d, pool_a, pool_b, data_gen)
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v
        row = {k: v / n_batches for k, v in sums.items()}
        if not all(np.isfinite(v) for v in row.values()):
            raise NumericError(f"GAN training diverged at epoch {epoch + 1}: {row}")
        row.update(epoch=epoch + 1, lr=lr, seconds=round(time.time() - t0, 3))
        _append_log(log_path, row)
        log.info("gan epoch %d/%d %s", epoch + 1, cfg.epochs,
                 " ".join(f"{k}={row[k]:.4f}" for k in ("loss_G", "loss_D") if k in row))
        done = epoch + 1
        if done % cfg.checkpoint_every == 0 or done == cfg.epochs or done == stop:
            payload = {
                "models": {k: m.state_dict() for k, m in models.items()},
                "meta": {k: getattr(m, "meta", {}) for k, m in models.items()},
                "opt_g": opt_g.state_dict(),
                "opt_d": opt_d.state_dict(),
                "rng": {"data": data_gen.get_state(), "pool": pool_gen.get_state()},
                "pools": {"a": pool_a.state(), "b": pool_b.state()},
                "config": _cfg_dict(cfg),
                "variant": variant,
                "epoch": done,
            }
            path = out_dir / f"ckpt_epoch_{done:04d}.pt"
            checkpoint.save(path, "gan", arch, payload)
            checkpoint.save(out_dir / "last.pt", "gan", arch, payload)
            written.append(path)
    return written


def _step(models, variant, cfg, ba, bb, opt_g, opt_d, pool_a, pool_b, gen):
    discs = [models[k] for k in ("D_X", "D_Y") if k in models]
    for d in discs:
        d.requires_grad_(False)
    opt_g.zero_grad(set_to_none=True)
    if variant == "cyclegan":
        out = total_cyclegan_loss(ba, bb, models["G"], models["F"], models["D_X"], models["D_Y"], cfg,
                                  discriminator=False)
    else:
        out = total_cut_loss(ba, bb, models["G"], models["D_Y"], models["nce"], cfg, generator=gen,
                             discriminator=False)
    out.total_G.backward()
    opt_g.step()

    for d in discs:
        d.requires_grad_(True)
    opt_d.zero_grad(set_to_none=True)
    fake_a, fake_b = out.fakes
    loss_d = discriminator_loss(models["D_Y"](bb), models["D_Y"](pool_b.query(fake_b)), cfg.adv_mode)
    if variant == "cyclegan":
        loss_d = loss_d + discriminator_loss(
            models["D_X"](ba), models["D_X"](pool_a.query(fake_a)), cfg.adv_mode
        )
    loss_d.backward()
    opt_d.step()

    t = out.terms
    row = {"adv_ab": t["adv_ab"].item(), "loss_G": out.total_G.item(), "loss_D": loss_d.item()}
    for k in ("adv_ba", "cycle", "identity", "nce"):
        if k in t:
            row[k] = t[k].item() if torch.is_tensor(t[k]) else float(t[k])
    return row


def _cfg_dict(cfg):
    from dataclasses import asdict

    from ..config import _plain

    return _plain(asdict(cfg))


def _append_log(path: Path, row: dict):
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, restval="")
        if new:
            w.writeheader()
        w.writerow({k: row.get(k, "") for k in LOG_FIELDS})


def _truncate_log(path: Path, epochs: int):
    if not path.exists():
        return
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for r in rows:
            if int(r["epoch"]) <= epochs:
                w.writerow(r)


def read_log(path) -> list[dict]:
    with Path(path).open() as fh:
        return [{k: float(v) for k, v in r.items() if v != ""} for r in csv.DictReader(fh)]


def load_generator(path, direction="A->B") -> Generator:
    """Load the generator for ``direction`` from a GAN checkpoint, in eval mode."""
    ck = checkpoint.load(path, kind="gan")
    key = "G" if direction == "A->B" else "F"
    if key not in ck["models"]:
        raise InvalidArgument(f"checkpoint variant {ck['variant']!r} has no {direction} generator")
    meta = ck["meta"][key]
    G = Generator(base_width=meta["base_width"], n_residual_blocks=meta["n_residual_blocks"],
                  direction=meta["direction"])
    G.load_state_dict(ck["models"][key])
    G.eval()
    G.arch_hash = ck["arch_hash"]
    G.resolution = ck["config"]["resolution"]
    G.crop_mode = ck["config"]["crop_mode"]
    G.crop_dilate = ck["config"]["crop_dilate"]
    return G
