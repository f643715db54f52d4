"""Self-supervised refinement training on (arm, background, video) triplets."""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .. import checkpoint
from ..compositing import DistortionParams, alpha_blend, distort_arm_video, support_mask
from ..config import DiffusionConfig, _plain
from ..datagen import cross_environment_pairs, list_clips, read_clip, swap_environment
from ..errors import InvalidArgument, MissingData, NumericError
from ..video import ArmVideo, MaskSequence, VideoTensor
from .denoiser import Denoiser, adapter_parameters, apply_lora
from .prompt import prompt_tokens
from .schedule import NoiseSchedule, make_schedule, q_sample
from .vae import vae_encode

log = logging.getLogger(__name__)

LOG_FIELDS = ["step", "loss", "ema_loss", "lr", "seconds"]
EMA_LOSS_DECAY = 0.99


def diffusion_loss(model, z0, z_ref, d_c, sched: NoiseSchedule, t, eps):
    """Mean squared error between ``eps`` and the prediction on ``q_sample(z0, t, eps)``."""
    z_t = q_sample(z0, t, eps, sched)
    eps_hat = model(z_t, z_ref, d_c, t)
    loss = F.mse_loss(eps_hat, eps)
    if not torch.isfinite(loss):
        raise NumericError("diffusion loss is not finite")
    return loss


def reference_video(clip, params: DistortionParams | None) -> VideoTensor:
    """Distort the clip's arm layer and blend it back over the clean background.

    The blend uses the distorted arm's own support, which is what the
    translated arm looks like at inference.
    """
    arm = ArmVideo(clip.arm_layer.astype(np.float32), fps=clip.video.fps)
    if params is not None:
        arm = distort_arm_video(arm, params)
    return alpha_blend(arm, clip.background, MaskSequence(support_mask(arm.data)))


def distortion_params(cfg: DiffusionConfig, seed: int) -> DistortionParams | None:
    if not cfg.distort:
        return None
    d = cfg.distortion
    return DistortionParams(d["elastic_alpha"], d["elastic_sigma"], d["perspective_jitter"],
                            tuple(d["blur_sigma_range"]), seed)


def _clip_seed(cfg_seed, clip_dir: Path, variant) -> int:
    h = hashlib.sha256(f"{cfg_seed}:{clip_dir.parent.name}/{clip_dir.name}:{variant}".encode())
    return int.from_bytes(h.digest()[:4], "little")


def build_latent_pool(dataset_dirs, vae, cfg: DiffusionConfig):
    """Encode every clip and ``reference_variants`` distorted references of it.

    Distortions are precomputed once instead of drawn afresh every step; with
    several variants per clip the denoiser still sees varied misalignments.
    With ``cfg.cross_env`` every clip is also added over a clean plate from
    the next domain's folder, prompted with that plate's environment.
    """
    z0, zref, prompts, ids = [], [], [], []

    def add(clip, key, seed_dir, tag):
        z0.append(vae_encode(vae, clip.video).data)
        variants = []
        for k in range(cfg.reference_variants):
            ref = reference_video(clip, distortion_params(cfg, _clip_seed(cfg.seed, seed_dir, f"{tag}{k}")))
            variants.append(vae_encode(vae, ref).data)
        zref.append(torch.stack(variants))
        s = clip.scene
        prompts.append(prompt_tokens(s.domain_id, clip.trajectory.task, s.env_domain or s.domain_id))
        ids.append(key)

    def load(folder):
        try:
            return read_clip(folder)
        except FileNotFoundError as exc:
            raise MissingData(f"incomplete triplet in {folder}: {exc}") from exc

    for d in dataset_dirs:
        clips = list_clips(d)
        if not clips:
            raise MissingData(f"no training clips in {d}")
        for folder in clips:
            add(load(folder), f"{folder.parent.name}/{folder.name}", folder, "")
    if cfg.cross_env:
        for folder, plate in cross_environment_pairs(dataset_dirs):
            key = f"{folder.parent.name}/{folder.name}+{plate.parent.name}/{plate.name}"
            add(swap_environment(load(folder), load(plate)), key, folder, "x")
    shapes = {tuple(z.shape) for z in z0}
    if len(shapes) != 1:
        raise InvalidArgument(f"clips have different latent shapes: {sorted(shapes)}")
    return {"z0": torch.stack(z0), "zref": torch.stack(zref), "prompts": prompts, "ids": ids}


def _pool_key(dataset_dirs, vae, cfg):
    manifest = []
    for d in dataset_dirs:
        m = Path(d).parent / "manifest.json"
        manifest.append(m.read_text() if m.exists() else str(sorted(p.name for p in list_clips(d))))
    payload = json.dumps([manifest, [str(Path(d).name) for d in dataset_dirs],
                          checkpoint.state_hash(vae), cfg.distort, cfg.distortion,
                          cfg.reference_variants, cfg.cross_env, cfg.seed], sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def load_or_build_pool(dataset_dirs, vae, cfg, cache_dir: Path):
    key = _pool_key(dataset_dirs, vae, cfg)
    path = Path(cache_dir) / f"latent_pool_{key}.pt"
    if path.exists():
        return torch.load(path, weights_only=False)
    pool = build_latent_pool(dataset_dirs, vae, cfg)
    tmp = path.with_suffix(".tmp")
    torch.save(pool, tmp)
    tmp.replace(path)
    return pool


def build_denoiser(cfg: DiffusionConfig, latent_channels=16, seed=None) -> Denoiser:
    torch.manual_seed(cfg.seed if seed is None else seed)
    return Denoiser(latent_channels, cfg.width, cfg.n_blocks, cfg.cond_dim, cfg.temporal,
                    cfg.zero_reference, cfg.T)


def denoiser_arch(model) -> str:
    return checkpoint.arch_hash({"kind": "denoiser", **model.meta}, model)


def _ema_update(ema, model, decay):
    with torch.no_grad():
        for pe, pm in zip(ema.parameters(), model.parameters()):
            if not pm.requires_grad:
                # frozen weights are copied so rounding never moves them
                pe.copy_(pm)
                continue
            pe.mul_(decay).add_(pm.detach(), alpha=1 - decay)
        for be, bm in zip(ema.buffers(), model.buffers()):
            be.copy_(bm)


def train_diffusion(dataset_dirs, vae, cfg: DiffusionConfig, out_dir, resume=None,
                    max_steps=None, pool=None):
    """Train the shared refinement denoiser on clips from every directory in ``dataset_dirs``.

    Each step draws clips, one precomputed distorted reference per clip, a
    uniform timestep and Gaussian noise, all from one seeded generator.
    """
    torch.use_deterministic_algorithms(True)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if pool is None:
        pool = load_or_build_pool(dataset_dirs, vae, cfg, out_dir)
    sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end, cfg.schedule, cfg.sigma_mode)
    model = build_denoiser(cfg, pool["z0"].shape[1])
    if cfg.lora_rank:
        raise InvalidArgument("lora_rank applies to finetune_adapters, not base training")
    return _run(model, adapter=False, pool=pool, sched=sched, cfg=cfg, out_dir=out_dir,
                resume=resume, max_steps=max_steps, vae=vae)


def finetune_adapters(base_ckpt, dataset_dirs, vae, cfg: DiffusionConfig, out_dir, rank=None,
                      resume=None, max_steps=None, pool=None):
    """Train only low-rank adapters on top of a frozen base denoiser."""
    torch.use_deterministic_algorithms(True)
    rank = rank or cfg.lora_rank
    base, sched, _ = load_denoiser(base_ckpt, ema=True)
    model = apply_lora(base, rank, seed=cfg.seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if pool is None:
        pool = load_or_build_pool(dataset_dirs, vae, cfg, out_dir)
    return _run(model, adapter=True, pool=pool, sched=sched, cfg=cfg, out_dir=out_dir,
                resume=resume, max_steps=max_steps, vae=vae, base_meta=base.meta)


def _run(model, adapter, pool, sched, cfg, out_dir, resume, max_steps, vae, base_meta=None):
    trainable = adapter_parameters(model) if adapter else list(model.parameters())
    opt = torch.optim.Adam(trainable, lr=cfg.lr)
    ema = copy.deepcopy(model)
    for p in ema.parameters():
        p.requires_grad_(False)
    arch = denoiser_arch(model)
    kind = "lora" if adapter else "diffusion"
    gen = torch.Generator().manual_seed(cfg.seed + 7)
    cfg_d = _plain(asdict(cfg))
    log_path = out_dir / "losses.csv"
    step, ema_loss, window = 0, None, []
    if resume is not None:
        ck = checkpoint.load(resume, kind=kind, expect_arch=arch)
        if ck["config"] != cfg_d:
            raise InvalidArgument("resume checkpoint was trained with a different diffusion config")
        model.load_state_dict(ck["model"])
        ema.load_state_dict(ck["ema"])
        opt.load_state_dict(ck["opt"])
        gen.set_state(ck["rng"])
        step, ema_loss, window = ck["step"], ck["ema_loss"], list(ck["window"])
        _keep_rows(log_path, step)
    elif log_path.exists():
        log_path.unlink()

    n_clips = len(pool["z0"])
    n_var = pool["zref"].shape[1]
    stop = cfg.steps if max_steps is None else min(cfg.steps, max_steps)
    written = []
    t0 = time.time()
    model.train()
    while step < stop:
        idx = torch.randint(n_clips, (cfg.batch_size,), generator=gen)
        variant = torch.randint(n_var, (cfg.batch_size,), generator=gen)
        t = torch.randint(1, cfg.T + 1, (cfg.batch_size,), generator=gen)
        z0 = pool["z0"][idx]
        zref = pool["zref"][idx, variant]
        eps = torch.randn(z0.shape, generator=gen)
        d_c = model.prompts([pool["prompts"][i] for i in idx.tolist()])
        loss = diffusion_loss(model, z0, zref, d_c, sched, t, eps)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        step += 1
        _ema_update(ema, model, min(cfg.ema_decay, (1 + step) / (10 + step)))
        value = loss.item()
        ema_loss = value if ema_loss is None else EMA_LOSS_DECAY * ema_loss + (1 - EMA_LOSS_DECAY) * value
        window.append(value)
        if step % cfg.log_every == 0 or step == stop:
            _append(log_path, {"step": step, "loss": float(np.mean(window)), "ema_loss": ema_loss,
                               "lr": cfg.lr, "seconds": round(time.time() - t0, 3)})
            log.info("%s step %d/%d loss=%.4f ema=%.4f", kind, step, cfg.steps, np.mean(window), ema_loss)
            window = []
        if step % cfg.checkpoint_every == 0 or step == stop:
            payload = {"model": model.state_dict(), "ema": ema.state_dict(), "opt": opt.state_dict(),
                       "rng": gen.get_state(), "step": step, "ema_loss": ema_loss, "window": window,
                       "config": cfg_d, "schedule": sched.to_dict(), "meta": model.meta,
                       "base_meta": base_meta, "vae_state": checkpoint.state_hash(vae)}
            path = out_dir / f"ckpt_step_{step:06d}.pt"
            checkpoint.save(path, kind, arch, payload)
            checkpoint.save(out_dir / "last.pt", kind, arch, payload)
            written.append(path)
    return written


def load_denoiser(path, ema=True):
    """Return ``(model, schedule, checkpoint dict)``; adapters are rebuilt when present."""
    ck = checkpoint.load(path)
    if ck["kind"] not in ("diffusion", "lora"):
        raise InvalidArgument(f"{path} holds a {ck['kind']!r} checkpoint, expected a denoiser")
    meta = ck["base_meta"] or ck["meta"]
    model = Denoiser(meta["latent_channels"], meta["width"], meta["n_blocks"], meta["cond_dim"],
                     meta["temporal"], meta["zero_reference"], meta["T"])
    if ck["kind"] == "lora":
        model = apply_lora(model, ck["meta"]["lora_rank"])
    model.load_state_dict(ck["ema" if ema else "model"])
    model.eval()
    model.arch_hash = ck["arch_hash"]
    return model, NoiseSchedule.from_dict(ck["schedule"]), ck


def read_log(path):
    with Path(path).open() as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _append(path, row):
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if new:
            w.writeheader()
        w.writerow(row)


def _keep_rows(path, step):
    if not path.exists():
        return
    with path.open() as fh:
        rows = [r for r in csv.DictReader(fh) if int(r["step"]) <= step]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        w.writerows(rows)
