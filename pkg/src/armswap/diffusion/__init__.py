"""Stage 2: latent video diffusion that refines a blended reference clip."""
from .denoiser import Denoiser, adapter_parameters, apply_lora, base_state, denoiser_forward, merge_lora
from .prompt import VOCAB, PromptTable, encode_prompt, prompt_tokens
from .sampler import sample, sample_latent
from .schedule import NoiseSchedule, ddpm_step, make_schedule, q_sample, sampling_timesteps
from .train import diffusion_loss, finetune_adapters, load_denoiser, read_log, train_diffusion
from .vae import FrameVAE, LatentVideo, build_vae, load_vae, train_vae, vae_decode, vae_encode

__all__ = [
    "Denoiser", "FrameVAE", "LatentVideo", "NoiseSchedule", "PromptTable", "VOCAB",
    "adapter_parameters", "apply_lora", "base_state", "build_vae", "ddpm_step", "denoiser_forward",
    "diffusion_loss", "encode_prompt", "finetune_adapters", "load_denoiser", "load_vae",
    "make_schedule", "merge_lora", "prompt_tokens", "q_sample", "read_log", "sample",
    "sample_latent", "sampling_timesteps", "train_diffusion", "train_vae", "vae_decode", "vae_encode",
]
