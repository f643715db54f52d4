"""Latent-video noise predictor conditioned on a reference latent and a prompt vector."""
from __future__ import annotations

import copy
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import InvalidArgument
from .prompt import PromptTable


def timestep_embedding(t, dim, max_period=10000.0):
    """Sinusoidal embedding of integer timesteps, ``len(t) x dim``."""
    t = torch.as_tensor(t, dtype=torch.float32).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _groups(ch):
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


class DenoiserBlock(nn.Module):
    """Norm -> modulated by (t, d_c) -> conv -> optional temporal conv -> gated residual."""

    def __init__(self, width, emb_dim, temporal):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(width), width)
        self.modulation = nn.Linear(emb_dim, 3 * width)
        self.spatial = nn.Conv2d(width, width, 3, 1, 1)
        self.temporal = nn.Conv1d(width, width, 3, 1, 1) if temporal else None
        self.mix = nn.Conv2d(width, width, 1)

    def forward(self, h, emb, n_frames):
        # h: (B*N) x C x h x w ; emb: (B*N) x E
        scale, shift, gate = self.modulation(emb).chunk(3, dim=1)
        x = self.norm(h) * (1 + scale[..., None, None]) + shift[..., None, None]
        x = self.spatial(F.silu(x))
        if self.temporal is not None:
            bn, c, hh, ww = x.shape
            b = bn // n_frames
            xt = x.reshape(b, n_frames, c, hh, ww).permute(0, 3, 4, 2, 1).reshape(-1, c, n_frames)
            xt = self.temporal(F.silu(xt))
            x = x + xt.reshape(b, hh, ww, c, n_frames).permute(0, 4, 3, 1, 2).reshape(bn, c, hh, ww)
        x = self.mix(F.silu(x))
        return h + torch.sigmoid(gate)[..., None, None] * x


class Denoiser(nn.Module):
    """Predicts the noise in ``z_t`` given ``z_ref`` (channel-concatenated), ``t`` and ``d_c``.

    Latents are ``B x C x N x h x w``.  The prompt table lives inside the
    module so that prompt embeddings train jointly with the network.
    """

    def __init__(self, latent_channels=16, width=64, n_blocks=4, cond_dim=64, temporal=True,
                 zero_reference=False, T=1000):
        super().__init__()
        self.meta = {"latent_channels": latent_channels, "width": width, "n_blocks": n_blocks,
                     "cond_dim": cond_dim, "temporal": temporal, "zero_reference": zero_reference,
                     "T": T, "conditioning": "feature_modulation"}
        self.prompts = PromptTable(cond_dim)
        self.in_proj = nn.Conv2d(2 * latent_channels, width, 1)
        self.time_mlp = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))
        self.cond_proj = nn.Linear(cond_dim, width)
        self.blocks = nn.ModuleList(DenoiserBlock(width, width, temporal) for _ in range(n_blocks))
        self.out_norm = nn.GroupNorm(_groups(width), width)
        self.out = nn.Conv2d(width, latent_channels, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, z_t, z_ref, d_c, t):
        if z_t.shape != z_ref.shape:
            raise InvalidArgument(f"z_t {tuple(z_t.shape)} and z_ref {tuple(z_ref.shape)} differ")
        if z_t.ndim != 5 or z_t.shape[1] != self.meta["latent_channels"]:
            raise InvalidArgument(f"expected B x {self.meta['latent_channels']} x N x h x w latents")
        t = torch.as_tensor(t).reshape(-1)
        if (t < 1).any() or (t > self.meta["T"]).any():
            raise InvalidArgument(f"timesteps outside [1, {self.meta['T']}]")
        b, c, n, hh, ww = z_t.shape
        if len(t) == 1:
            t = t.expand(b)
        d_c = d_c.reshape(b, -1) if d_c.ndim == 2 else d_c.reshape(1, -1).expand(b, -1)
        if self.meta["zero_reference"]:
            z_ref = torch.zeros_like(z_ref)
        x = torch.cat([z_t, z_ref], dim=1).permute(0, 2, 1, 3, 4).reshape(b * n, 2 * c, hh, ww)
        emb = self.time_mlp(timestep_embedding(t, self.meta["width"]).to(z_t.dtype)) + self.cond_proj(d_c)
        emb = emb.repeat_interleave(n, dim=0)
        h = self.in_proj(x)
        for blk in self.blocks:
            h = blk(h, emb, n)
        eps = self.out(F.silu(self.out_norm(h)))
        return eps.reshape(b, n, c, hh, ww).permute(0, 2, 1, 3, 4)


def denoiser_forward(params: Denoiser, z_t, z_ref, d_c, t):
    return params(z_t, z_ref, d_c, t)


# -- low-rank adapters -------------------------------------------------------

class LoRALinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, generator=None):
        super().__init__()
        self.base = base
        self.A = nn.Parameter(torch.randn(rank, base.in_features, generator=generator) * 0.01)
        self.B = nn.Parameter(torch.zeros(base.out_features, rank))

    def forward(self, x):
        return self.base(x) + F.linear(F.linear(x, self.A), self.B)


class LoRAConv1x1(nn.Module):
    def __init__(self, base: nn.Conv2d, rank: int, generator=None):
        super().__init__()
        self.base = base
        self.A = nn.Parameter(torch.randn(rank, base.in_channels, 1, 1, generator=generator) * 0.01)
        self.B = nn.Parameter(torch.zeros(base.out_channels, rank, 1, 1))

    def forward(self, x):
        return self.base(x) + F.conv2d(F.conv2d(x, self.A), self.B)


def _adaptable(m):
    if isinstance(m, nn.Linear):
        return min(m.in_features, m.out_features)
    if isinstance(m, nn.Conv2d) and m.kernel_size == (1, 1) and m.groups == 1:
        return min(m.in_channels, m.out_channels)
    return None


def apply_lora(denoiser: Denoiser, rank: int, seed: int = 0) -> Denoiser:
    """Copy of ``denoiser`` whose dense and 1x1-conv layers carry ``B @ A`` adapters.

    ``B`` starts at zero so the adapted model is numerically identical to the
    base.  Only adapter factors require gradients; the prompt table is frozen too.
    """
    if rank < 1:
        raise InvalidArgument("adapter rank must be >= 1")
    model = copy.deepcopy(denoiser)
    targets = [(name, m) for name, m in model.named_modules() if _adaptable(m) is not None]
    for name, m in targets:
        if rank > _adaptable(m):
            raise InvalidArgument(f"rank {rank} exceeds the width of layer {name!r}")
    for p in model.parameters():
        p.requires_grad_(False)
    gen = torch.Generator().manual_seed(seed)
    for name, m in targets:
        parent = model.get_submodule(name.rpartition(".")[0]) if "." in name else model
        leaf = name.rpartition(".")[2]
        wrapped = LoRALinear(m, rank, gen) if isinstance(m, nn.Linear) else LoRAConv1x1(m, rank, gen)
        setattr(parent, leaf, wrapped)
    model.meta = dict(model.meta, lora_rank=rank)
    return model


def adapter_parameters(model):
    return [p for n, p in model.named_parameters() if n.endswith(".A") or n.endswith(".B")]


def base_state(model) -> dict:
    """Non-adapter parameters keyed by their name in the un-adapted model."""
    out = {}
    for n, p in model.named_parameters():
        if n.endswith(".A") or n.endswith(".B"):
            continue
        out[n.replace(".base.", ".")] = p.detach()
    return out


def merge_lora(model) -> Denoiser:
    """Fold adapters into their base layers, returning a plain denoiser."""
    merged = copy.deepcopy(model)
    for name, m in list(merged.named_modules()):
        if isinstance(m, (LoRALinear, LoRAConv1x1)):
            with torch.no_grad():
                if isinstance(m, LoRALinear):
                    m.base.weight += m.B @ m.A
                else:
                    m.base.weight += (m.B[:, :, 0, 0] @ m.A[:, :, 0, 0])[..., None, None]
            parent = merged.get_submodule(name.rpartition(".")[0]) if "." in name else merged
            setattr(parent, name.rpartition(".")[2], m.base)
    for p in merged.parameters():
        p.requires_grad_(True)
    return merged
