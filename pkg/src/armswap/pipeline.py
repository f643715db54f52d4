"""Two-stage arm swap at inference time, plus the ablation variants.

The chain is: segment the source arm, translate it frame by frame with the
GAN, blend it over the source background, then refine the blend with the
latent diffusion model conditioned on it.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .compositing import alpha_blend, extract_arm, extract_background, support_mask
from .datagen import RenderedClip, read_clip
from .diffusion import load_denoiser, load_vae, prompt_tokens, sample, vae_encode
from .errors import ArmSwapError, InvalidArgument, StageError
from .gan import load_generator, translate_full_frames, translate_video
from .video import ArmVideo, BackgroundVideo, MaskSequence, VideoTensor, save_frames, save_masks

DIRECTIONS = ("A->B", "B->A")
VARIANTS = ("gan_only", "blend_only", "swap_full")


@dataclass
class SwapRequest:
    clip: RenderedClip | str | Path
    direction: str = "A->B"
    gan_ckpt: str | Path | None = None
    diffusion_ckpt: str | Path | None = None
    vae_ckpt: str | Path | None = None
    prompt: list | None = None
    background_mode: str = "ground_truth"
    steps: int = 50
    seed: int = 0
    gan_full_ckpt: str | Path | None = None  # whole-frame generator for the gan_only ablation
    debug_dir: str | Path | None = None

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise InvalidArgument(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.steps < 1:
            raise InvalidArgument("sampler steps must be >= 1")

    @property
    def source(self):
        return self.direction[0]

    @property
    def target(self):
        return self.direction[-1]


@dataclass
class SwapModels:
    """Loaded, read-only modules for one swap direction."""

    generator: object = None
    vae: object = None
    denoiser: object = None
    schedule: object = None
    full_frame_generator: object = None


@dataclass
class SwapResult:
    output: VideoTensor
    arm: ArmVideo
    arm_translated: ArmVideo | None
    background: BackgroundVideo
    reference: VideoTensor | None
    translated_mask: MaskSequence | None
    prompt: list
    seed: int
    variant: str = "swap_full"
    timings: dict = field(default_factory=dict)

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.output.data).tobytes()).hexdigest()


_CACHE: dict = {}


def _cached(kind, path, loader):
    path = Path(path)
    key = (kind, str(path.resolve()), path.stat().st_mtime_ns if path.exists() else None)
    if key not in _CACHE:
        _CACHE[key] = loader()
    return _CACHE[key]


def load_models(req: SwapRequest, need=("gan", "diffusion")) -> SwapModels:
    """Load (and memoize) the checkpoints a request names."""
    m = SwapModels()
    if "gan" in need:
        if req.gan_ckpt is None:
            raise InvalidArgument("request has no gan_ckpt")
        m.generator = _stage("load", lambda: _cached(
            "gan" + req.direction, req.gan_ckpt, lambda: load_generator(req.gan_ckpt, req.direction)))
    if "diffusion" in need:
        if req.vae_ckpt is None or req.diffusion_ckpt is None:
            raise InvalidArgument("request needs both vae_ckpt and diffusion_ckpt")
        m.vae = _stage("load", lambda: _cached("vae", req.vae_ckpt, lambda: load_vae(req.vae_ckpt)))
        den, sched, ck = _stage("load", lambda: _cached(
            "den", req.diffusion_ckpt, lambda: load_denoiser(req.diffusion_ckpt)))
        if ck.get("vae_state") != checkpoint.state_hash(m.vae):
            raise StageError("load", InvalidArgument(
                f"{req.diffusion_ckpt} was trained on latents of a different VAE than {req.vae_ckpt}"))
        m.denoiser, m.schedule = den, sched
    if "gan_full" in need:
        if req.gan_full_ckpt is None:
            raise InvalidArgument("gan_only ablation needs gan_full_ckpt")
        m.full_frame_generator = _stage("load", lambda: _cached(
            "ganfull" + req.direction, req.gan_full_ckpt,
            lambda: load_generator(req.gan_full_ckpt, req.direction)))
        if m.full_frame_generator.crop_mode != "full_frame":
            raise StageError("load", InvalidArgument(f"{req.gan_full_ckpt} was not trained on full frames"))
    return m


def _stage(name, fn):
    try:
        return fn()
    except StageError:
        raise
    except (ArmSwapError, FileNotFoundError, RuntimeError, ValueError) as exc:
        raise StageError(name, exc) from exc


def _clip(req) -> RenderedClip:
    if isinstance(req.clip, RenderedClip):
        return req.clip
    return _stage("load", lambda: read_clip(Path(req.clip)))


def request_prompt(req: SwapRequest, clip: RenderedClip) -> list:
    if req.prompt is not None:
        return list(req.prompt)
    env = clip.scene.env_domain or clip.scene.domain_id
    return prompt_tokens(req.target, clip.trajectory.task, env)


def build_reference(req, clip, generator, timings):
    """Stages up to the blended reference ``V_ref``."""
    if clip.scene.domain_id != req.source:
        raise StageError("segment", InvalidArgument(
            f"clip shows arm {clip.scene.domain_id} but direction is {req.direction}"))
    t0 = time.time()
    arm = _stage("segment", lambda: extract_arm(clip.video, clip.masks))
    timings["segment"] = time.time() - t0
    t0 = time.time()
    translated = _stage("gan", lambda: translate_video(generator, arm, masks=clip.masks,
                                                        direction=req.direction))
    timings["gan"] = time.time() - t0
    t0 = time.time()
    bkg = _stage("background", lambda: extract_background(
        clip.video, clip.masks, req.background_mode, clean_plate=clip.background))
    tmask = MaskSequence(support_mask(translated.data))
    ref = _stage("blend", lambda: alpha_blend(translated, bkg, tmask))
    timings["blend"] = time.time() - t0
    return arm, translated, bkg, tmask, ref


def refine(req, models: SwapModels, ref: VideoTensor, prompt, timings) -> VideoTensor:
    t0 = time.time()
    z_ref = _stage("encode", lambda: vae_encode(models.vae, ref))
    timings["encode"] = time.time() - t0
    t0 = time.time()
    with torch.no_grad():
        d_c = _stage("prompt", lambda: models.denoiser.prompts([prompt])[0])
    out = _stage("diffusion", lambda: sample(models.denoiser, models.vae, z_ref, d_c,
                                             models.schedule, req.seed, req.steps, fps=ref.fps))
    timings["diffusion"] = time.time() - t0
    return out


def swap(req: SwapRequest, models: SwapModels | None = None) -> SwapResult:
    """Full two-stage swap of ``req.clip``; intermediates go to ``req.debug_dir`` if set."""
    models = models or load_models(req)
    clip = _clip(req)
    timings = {}
    arm, translated, bkg, tmask, ref = build_reference(req, clip, models.generator, timings)
    prompt = request_prompt(req, clip)
    out = refine(req, models, ref, prompt, timings)
    res = SwapResult(out, arm, translated, bkg, ref, tmask, prompt, req.seed, "swap_full", timings)
    if req.debug_dir is not None:
        write_intermediates(res, req.debug_dir)
    return res


def run_ablation(variant: str, req: SwapRequest, models: SwapModels | None = None) -> SwapResult:
    """``gan_only``: whole-frame GAN; ``blend_only``: V_ref unrefined; ``swap_full``: :func:`swap`."""
    if variant not in VARIANTS:
        raise InvalidArgument(f"variant must be one of {VARIANTS}, got {variant!r}")
    if variant == "swap_full":
        return swap(req, models)
    clip = _clip(req)
    timings = {}
    prompt = request_prompt(req, clip)
    arm = _stage("segment", lambda: extract_arm(clip.video, clip.masks))
    if variant == "gan_only":
        models = models or load_models(req, need=("gan_full",))
        t0 = time.time()
        out = _stage("gan", lambda: translate_full_frames(models.full_frame_generator, clip.video))
        timings["gan"] = time.time() - t0
        bkg = _stage("background", lambda: extract_background(
            clip.video, clip.masks, req.background_mode, clean_plate=clip.background))
        res = SwapResult(VideoTensor(out, fps=clip.video.fps), arm, None, bkg, None, None, prompt,
                         req.seed, variant, timings)
    else:
        models = models or load_models(req, need=("gan",))
        arm, translated, bkg, tmask, ref = build_reference(req, clip, models.generator, timings)
        res = SwapResult(ref, arm, translated, bkg, ref, tmask, prompt, req.seed, variant, timings)
    if req.debug_dir is not None:
        write_intermediates(res, req.debug_dir)
    return res


def write_intermediates(res: SwapResult, folder):
    folder = Path(folder)
    save_frames(res.arm, folder / "arm")
    save_frames(res.background, folder / "bkg")
    if res.arm_translated is not None:
        save_frames(res.arm_translated, folder / "arm_translated")
        save_masks(res.translated_mask, folder / "arm_translated", "mask")
    if res.reference is not None:
        save_frames(res.reference, folder / "ref")


def write_result(res: SwapResult, folder, request: SwapRequest | None = None, extra=None):
    """Frame PNGs plus ``result.json`` (seed, steps, prompt, timings, output digest)."""
    folder = Path(folder)
    save_frames(res.output, folder, "frame")
    record = {"variant": res.variant, "seed": res.seed, "prompt": res.prompt,
              "timings": {k: round(v, 4) for k, v in res.timings.items()},
              "output_sha256": res.digest(), "n_frames": res.output.n_frames}
    if request is not None:
        record.update(direction=request.direction, steps=request.steps,
                      background_mode=request.background_mode,
                      source=str(request.clip) if not isinstance(request.clip, RenderedClip) else None)
    if extra:
        record.update(extra)
    (folder / "result.json").write_text(json.dumps(record, indent=2, sort_keys=True))
    return record
