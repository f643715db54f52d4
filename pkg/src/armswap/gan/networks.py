"""Encoder / residual / decoder generator and patch discriminator."""
from __future__ import annotations

import torch
import torch.nn as nn

from ..errors import InvalidArgument


class ResidualBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(ch, ch, 3),
            nn.InstanceNorm2d(ch),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(ch, ch, 3),
            nn.InstanceNorm2d(ch),
        )

    def forward(self, x):
        return x + self.block(x)


class Generator(nn.Module):
    """Two stride-2 downsamples, ``n_residual_blocks`` blocks, two upsamples.

    Inputs and outputs live in [0, 1]; the final sigmoid bounds the output.
    """

    def __init__(self, in_channels=3, out_channels=3, base_width=32, n_residual_blocks=4,
                 direction="A->B"):
        super().__init__()
        self.meta = {
            "in_channels": in_channels,
            "out_channels": out_channels,
            "base_width": base_width,
            "n_residual_blocks": n_residual_blocks,
            "direction": direction,
        }
        w = base_width
        self.stem = nn.Sequential(
            nn.ReflectionPad2d(3), nn.Conv2d(in_channels, w, 7), nn.InstanceNorm2d(w), nn.ReLU(True)
        )
        self.down = nn.ModuleList([
            nn.Sequential(nn.Conv2d(w, 2 * w, 3, 2, 1), nn.InstanceNorm2d(2 * w), nn.ReLU(True)),
            nn.Sequential(nn.Conv2d(2 * w, 4 * w, 3, 2, 1), nn.InstanceNorm2d(4 * w), nn.ReLU(True)),
        ])
        self.blocks = nn.ModuleList([ResidualBlock(4 * w) for _ in range(n_residual_blocks)])
        self.up = nn.Sequential(
            nn.ConvTranspose2d(4 * w, 2 * w, 3, 2, 1, output_padding=1),
            nn.InstanceNorm2d(2 * w),
            nn.ReLU(True),
            nn.ConvTranspose2d(2 * w, w, 3, 2, 1, output_padding=1),
            nn.InstanceNorm2d(w),
            nn.ReLU(True),
            nn.ReflectionPad2d(3),
            nn.Conv2d(w, out_channels, 7),
            nn.Sigmoid(),
        )

    def encode(self, x, layers=None):
        """Run the encoder and residual trunk, returning selected activations.

        Layer ids: 0 = stem, 1..2 = after each downsample, 3.. = after each
        residual block.
        """
        feats = []
        h = self.stem(x * 2.0 - 1.0)
        if layers is not None and 0 in layers:
            feats.append(h)
        for i, d in enumerate(self.down):
            h = d(h)
            if layers is not None and 1 + i in layers:
                feats.append(h)
        for i, b in enumerate(self.blocks):
            h = b(h)
            if layers is not None and 3 + i in layers:
                feats.append(h)
        return h, feats

    def forward(self, x):
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise InvalidArgument(f"generator needs H, W divisible by 4, got {tuple(x.shape[-2:])}")
        h, _ = self.encode(x)
        return self.up(h)

    def nce_layers(self):
        # after each downsample and every second residual block
        return [1, 2] + [3 + i for i in range(1, len(self.blocks), 2)]

    def layer_channels(self, layer):
        w = self.meta["base_width"]
        return {0: w, 1: 2 * w, 2: 4 * w}.get(layer, 4 * w)


class PatchDiscriminator(nn.Module):
    """Emits a spatial map of real/fake logits, one per receptive-field patch."""

    def __init__(self, in_channels=3, base_width=32, n_layers=3):
        super().__init__()
        layers = [nn.Conv2d(in_channels, base_width, 4, 2, 1), nn.LeakyReLU(0.2, True)]
        mult = 1
        for n in range(1, n_layers):
            prev, mult = mult, min(2**n, 8)
            layers += [
                nn.Conv2d(base_width * prev, base_width * mult, 4, 2, 1),
                nn.InstanceNorm2d(base_width * mult),
                nn.LeakyReLU(0.2, True),
            ]
        prev, mult = mult, min(2**n_layers, 8)
        layers += [
            nn.Conv2d(base_width * prev, base_width * mult, 4, 1, 1),
            nn.InstanceNorm2d(base_width * mult),
            nn.LeakyReLU(0.2, True),
            nn.Conv2d(base_width * mult, 1, 4, 1, 1),
        ]
        self.model = nn.Sequential(*layers)
        self.meta = {"in_channels": in_channels, "base_width": base_width, "n_layers": n_layers,
                     "receptive_field_px": receptive_field(n_layers)}

    def forward(self, x):
        return self.model(x * 2.0 - 1.0)


def receptive_field(n_layers):
    # n_layers stride-2 k4 convs, then two stride-1 k4 convs
    rf = 1
    for stride in reversed([2] * n_layers + [1, 1]):
        rf = (rf - 1) * stride + 4
    return rf


class PatchSampleMLP(nn.Module):
    """Per-layer two-layer projection heads used by the PatchNCE objective."""

    def __init__(self, in_channels: list[int], dim=128):
        super().__init__()
        self.heads = nn.ModuleList(
            nn.Sequential(nn.Linear(c, dim), nn.ReLU(True), nn.Linear(dim, dim)) for c in in_channels
        )

    def forward(self, feats, n_patches=64, patch_ids=None, generator=None):
        """Sample the same spatial locations per layer; returns (projected, ids)."""
        out, ids = [], []
        for k, f in enumerate(feats):
            b, c, h, w = f.shape
            flat = f.permute(0, 2, 3, 1).reshape(b, h * w, c)
            if patch_ids is None:
                n = min(n_patches, h * w)
                idx = torch.randperm(h * w, generator=generator)[:n]
            else:
                idx = patch_ids[k]
            z = self.heads[k](flat[:, idx])
            out.append(nn.functional.normalize(z, dim=-1))
            ids.append(idx)
        return out, ids


def init_weights(module: nn.Module, generator: torch.Generator, gain=0.02):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator) * gain)
                if m.bias is not None:
                    m.bias.zero_()
