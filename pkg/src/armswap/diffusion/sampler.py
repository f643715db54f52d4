"""Ancestral sampling of a refined clip from a reference latent."""
from __future__ import annotations

import json
import time
from pathlib import Path

import torch

from ..errors import InvalidArgument
from ..video import VideoTensor, save_frames
from .schedule import NoiseSchedule, ddpm_step, sampling_timesteps
from .vae import LatentVideo, vae_decode


@torch.no_grad()
def sample_latent(denoiser, z_ref: torch.Tensor, d_c: torch.Tensor, sched: NoiseSchedule, seed: int,
                  steps: int | None = None) -> torch.Tensor:
    """Run the reverse chain for one ``C x N x h x w`` reference latent."""
    if z_ref.ndim != 4:
        raise InvalidArgument(f"z_ref must be C x N x h x w, got {tuple(z_ref.shape)}")
    gen = torch.Generator().manual_seed(int(seed))
    ref = z_ref[None]
    z = torch.randn(ref.shape, generator=gen)
    ts = sampling_timesteps(sched.T, steps or sched.T)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        eps = denoiser(z, ref, d_c[None], torch.tensor([t]))
        noise = torch.randn(z.shape, generator=gen) if t_prev > 0 else None
        z = ddpm_step(z, eps, t, sched, noise, t_prev)
    return z[0]


def sample(denoiser, vae, z_ref, d_c, sched: NoiseSchedule, seed: int, steps: int | None = None,
           fps: int = 8) -> VideoTensor:
    """Seeded sample decoded to pixels and clamped to [0, 1]."""
    z_ref = z_ref.data if isinstance(z_ref, LatentVideo) else z_ref
    was = denoiser.training
    denoiser.eval()
    z0 = sample_latent(denoiser, z_ref, d_c, sched, seed, steps)
    denoiser.train(was)
    return vae_decode(vae, LatentVideo(z0), fps=fps)


def write_sample(video: VideoTensor, out_dir, *, seed, steps, prompt, timings: dict):
    out_dir = Path(out_dir)
    save_frames(video, out_dir, "frame")
    record = {"seed": seed, "steps": steps, "prompt": list(prompt), "timings": timings,
              "n_frames": video.n_frames, "frame_size": list(video.frame_size)}
    (out_dir / "result.json").write_text(json.dumps(record, indent=2))
    return record


def timed(fn, *args, **kwargs):
    t0 = time.time()
    out = fn(*args, **kwargs)
    return out, round(time.time() - t0, 4)
