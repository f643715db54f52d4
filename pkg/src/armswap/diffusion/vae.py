"""Per-frame convolutional VAE: 3 x H x W frames <-> 16 x H/8 x W/8 latents."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .. import checkpoint
from ..config import VaeConfig, _plain
from ..datagen import cross_environment_pairs, list_clips, read_clip, swap_environment
from ..errors import InvalidArgument, MissingData, NumericError
from ..video import VideoTensor, load_frames

log = logging.getLogger(__name__)


@dataclass
class LatentVideo:
    """``C x N x H_l x W_l`` latent clip; ``downsample`` relates it to pixel size."""

    data: torch.Tensor
    downsample: int = 8

    @property
    def shape(self):
        return tuple(self.data.shape)


def _block(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, 1, 1), nn.GroupNorm(8, cout), nn.SiLU())


class FrameVAE(nn.Module):
    def __init__(self, latent_channels=16, width=48, downsample=8):
        super().__init__()
        if downsample != 8:
            raise InvalidArgument("only a downsample factor of 8 is supported")
        w = width
        self.meta = {"latent_channels": latent_channels, "downsample": downsample, "width": width}
        self.encoder = nn.Sequential(
            _block(3, w),
            nn.Conv2d(w, w, 4, 2, 1), nn.SiLU(), _block(w, w),
            nn.Conv2d(w, 2 * w, 4, 2, 1), nn.SiLU(), _block(2 * w, 2 * w),
            nn.Conv2d(2 * w, 2 * w, 4, 2, 1), nn.SiLU(), _block(2 * w, 2 * w),
            nn.Conv2d(2 * w, 2 * latent_channels, 1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, 2 * w, 3, 1, 1), nn.SiLU(), _block(2 * w, 2 * w),
            nn.Upsample(scale_factor=2, mode="nearest"), _block(2 * w, 2 * w),
            nn.Upsample(scale_factor=2, mode="nearest"), _block(2 * w, w),
            nn.Upsample(scale_factor=2, mode="nearest"), _block(w, w),
            nn.Conv2d(w, 3, 3, 1, 1),
        )
        # multiplies latents so the diffusion state has roughly unit variance
        self.register_buffer("latent_scale", torch.ones(()))

    def encode_frames(self, x):
        h = self.encoder(x * 2.0 - 1.0)
        mean, logvar = h.chunk(2, dim=1)
        return mean, logvar.clamp(-20.0, 10.0)

    def decode_frames(self, z):
        return torch.sigmoid(self.decoder(z))

    def forward(self, x, generator=None):
        mean, logvar = self.encode_frames(x)
        if self.training:
            noise = torch.randn(mean.shape, generator=generator)
            z = mean + torch.exp(0.5 * logvar) * noise
        else:
            z = mean
        return self.decode_frames(z), mean, logvar


def _check_size(h, w):
    if h % 8 or w % 8:
        raise InvalidArgument(f"frame size {h}x{w} must be divisible by 8")


@torch.no_grad()
def vae_encode(vae: FrameVAE, video: VideoTensor | np.ndarray, batch=32) -> LatentVideo:
    """Encode to the (scaled) posterior mean; deterministic."""
    data = video.data if isinstance(video, VideoTensor) else np.asarray(video, dtype=np.float32)
    _check_size(*data.shape[-2:])
    was = vae.training
    vae.eval()
    x = torch.from_numpy(np.ascontiguousarray(data))
    means = [vae.encode_frames(x[i:i + batch])[0] for i in range(0, len(x), batch)]
    vae.train(was)
    z = torch.cat(means) * vae.latent_scale
    return LatentVideo(z.permute(1, 0, 2, 3).contiguous(), downsample=8)


@torch.no_grad()
def vae_decode(vae: FrameVAE, latent: LatentVideo | torch.Tensor, fps=8, batch=32) -> VideoTensor:
    z = latent.data if isinstance(latent, LatentVideo) else latent
    if z.ndim != 4:
        raise InvalidArgument(f"latent must be C x N x H_l x W_l, got {tuple(z.shape)}")
    was = vae.training
    vae.eval()
    frames = z.permute(1, 0, 2, 3) / vae.latent_scale
    out = torch.cat([vae.decode_frames(frames[i:i + batch]) for i in range(0, len(frames), batch)])
    vae.train(was)
    return VideoTensor(out.clamp(0.0, 1.0).numpy(), fps=fps)


def psnr(a, b, peak=1.0) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    return 99.0 if mse == 0 else min(99.0, 10 * np.log10(peak**2 / mse))


def collect_frames(dataset_dirs, max_frames, seed, cross_env=False) -> torch.Tensor:
    """A seeded subset of every frame; with ``cross_env`` arms over the other domain's plates too."""
    frames = []
    for d in dataset_dirs:
        for clip in list_clips(d):
            frames.append(load_frames(clip).data)
    if not frames:
        raise MissingData(f"no clips under {[str(d) for d in dataset_dirs]}")
    if cross_env:
        for clip_dir, plate_dir in cross_environment_pairs(dataset_dirs):
            frames.append(swap_environment(read_clip(clip_dir), read_clip(plate_dir)).video.data)
    allf = np.concatenate(frames)
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(allf))[:max_frames]
    return torch.from_numpy(allf[np.sort(idx)])


def vae_arch(vae: FrameVAE) -> str:
    return checkpoint.arch_hash({"kind": "frame_vae", **vae.meta}, vae)


def build_vae(cfg: VaeConfig, seed=None) -> FrameVAE:
    torch.manual_seed(cfg.seed if seed is None else seed)
    return FrameVAE(cfg.latent_channels, cfg.width, cfg.downsample)


LOG_FIELDS = ["epoch", "recon", "kl", "total", "val_psnr", "seconds"]


def train_vae(dataset_dirs, cfg: VaeConfig, out_dir, resume=None, max_epochs=None):
    """Fit the VAE on frames from ``dataset_dirs``; 10% of frames are held out."""
    torch.use_deterministic_algorithms(True)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = collect_frames(dataset_dirs, cfg.max_frames, cfg.seed, cfg.cross_env)
    n_val = max(1, len(frames) // 10)
    val, train = frames[:n_val], frames[n_val:]
    if len(train) == 0:
        raise MissingData("not enough frames to train the VAE")
    vae = build_vae(cfg)
    arch = vae_arch(vae)
    opt = torch.optim.Adam(vae.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed + 101)
    start = 0
    log_path = out_dir / "losses.csv"
    cfg_d = _plain(asdict(cfg))
    if resume is not None:
        ck = checkpoint.load(resume, kind="vae", expect_arch=arch)
        if ck["config"] != cfg_d:
            raise InvalidArgument("resume checkpoint was trained with a different VAE config")
        vae.load_state_dict(ck["model"])
        opt.load_state_dict(ck["opt"])
        gen.set_state(ck["rng"])
        start = ck["epoch"]
        _keep_rows(log_path, start)
    elif log_path.exists():
        log_path.unlink()

    stop = cfg.epochs if max_epochs is None else min(cfg.epochs, max_epochs)
    written = []
    for epoch in range(start, stop):
        t0 = time.time()
        vae.train()
        # cosine decay keeps the late epochs fine-grained
        lr = cfg.lr * 0.5 * (1 + np.cos(np.pi * epoch / cfg.epochs))
        for g in opt.param_groups:
            g["lr"] = lr
        perm = torch.randperm(len(train), generator=gen)
        sums = np.zeros(3)
        nb = 0
        for i in range(0, len(train), cfg.batch_size):
            x = train[perm[i:i + cfg.batch_size]]
            recon, mean, logvar = vae(x, generator=gen)
            rec = F.mse_loss(recon, x)
            kl = 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar).mean()
            loss = rec + cfg.kl_weight * kl
            if not torch.isfinite(loss):
                raise NumericError(f"VAE training diverged at epoch {epoch + 1}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sums += (rec.item(), kl.item(), loss.item())
            nb += 1
        vae.eval()
        with torch.no_grad():
            vrec = torch.cat([vae(val[i:i + 64])[0] for i in range(0, len(val), 64)])
        row = dict(zip(("recon", "kl", "total"), sums / nb))
        row.update(epoch=epoch + 1, val_psnr=psnr(vrec.numpy(), val.numpy()),
                   seconds=round(time.time() - t0, 3))
        _append(log_path, row)
        log.info("vae epoch %d/%d recon=%.5f val_psnr=%.2f", epoch + 1, cfg.epochs, row["recon"],
                 row["val_psnr"])
        done = epoch + 1
        if done % cfg.checkpoint_every == 0 or done == stop:
            if done == cfg.epochs:
                _calibrate_scale(vae, train)
            payload = {"model": vae.state_dict(), "meta": vae.meta, "opt": opt.state_dict(),
                       "rng": gen.get_state(), "config": cfg_d, "epoch": done,
                       "val_psnr": row["val_psnr"]}
            path = out_dir / f"ckpt_epoch_{done:04d}.pt"
            checkpoint.save(path, "vae", arch, payload)
            checkpoint.save(out_dir / "last.pt", "vae", arch, payload)
            written.append(path)
    return written


@torch.no_grad()
def _calibrate_scale(vae, frames):
    vae.eval()
    vae.latent_scale.fill_(1.0)
    means = torch.cat([vae.encode_frames(frames[i:i + 64])[0] for i in range(0, len(frames), 64)])
    vae.latent_scale.fill_(1.0 / float(means.std()))


def load_vae(path) -> FrameVAE:
    ck = checkpoint.load(path, kind="vae")
    m = ck["meta"]
    vae = FrameVAE(m["latent_channels"], m["width"], m["downsample"])
    vae.load_state_dict(ck["model"])
    vae.eval()
    vae.arch_hash = ck["arch_hash"]
    return vae


def _append(path, row):
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if new:
            w.writeheader()
        w.writerow({k: row[k] for k in LOG_FIELDS})


def _keep_rows(path, epochs):
    if not path.exists():
        return
    with path.open() as fh:
        rows = [r for r in csv.DictReader(fh) if int(r["epoch"]) <= epochs]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        w.writerows(rows)
