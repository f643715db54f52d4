"""Small arm-domain classifier used as an automatic judge of swap success."""
from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .compositing import difference_mask
from .datagen import DOMAINS, list_clips, read_clip
from .errors import MissingData
from .gan.crops import crop_box, cut

log = logging.getLogger(__name__)

CROP = 32


class DomainClassifier(nn.Module):
    """Two strided conv layers, global average pool, linear head over domains."""

    def __init__(self, width=16):
        super().__init__()
        self.conv1 = nn.Conv2d(3, width, 3, 2, 1)
        self.conv2 = nn.Conv2d(width, 2 * width, 3, 2, 1)
        self.head = nn.Linear(2 * width, len(DOMAINS))

    def forward(self, x):
        h = F.relu(self.conv2(F.relu(self.conv1(x))))
        return self.head(h.mean(dim=(2, 3)))


def arm_crops(frames: np.ndarray, backgrounds: np.ndarray, dilate=2):
    """Crops of the pixels that differ from the background, one per frame.

    Returns ``(crops, valid)``; frames with no differing pixels give a zero
    crop and ``valid = False``.
    """
    masks = difference_mask(frames, backgrounds)
    crops = torch.zeros(len(frames), 3, CROP, CROP)
    valid = np.zeros(len(frames), dtype=bool)
    for i, (f, m) in enumerate(zip(frames, masks)):
        box = crop_box(m, dilate)
        if box is None:
            continue
        crops[i] = cut((f * m[None]).astype(np.float32), box, CROP)
        valid[i] = True
    return crops, valid


def _sample_crops(domain_dir, n, rng):
    clips = list_clips(domain_dir)
    if not clips:
        raise MissingData(f"no clips in {domain_dir}")
    order = rng.permutation(len(clips))
    out = []
    per_clip = max(1, int(np.ceil(n / len(clips))))
    for k in order:
        clip = read_clip(clips[k])
        frames = rng.choice(clip.video.n_frames, size=min(per_clip, clip.video.n_frames), replace=False)
        crops, valid = arm_crops(clip.video.data[frames], clip.background.data[frames])
        out.append(crops[valid])
        if sum(len(c) for c in out) >= n:
            break
    return torch.cat(out)[:n]


def train_classifier(domain_dirs: dict, n_crops=500, seed=0, epochs=60, holdout=0.2):
    """Fit on ``n_crops`` crops per domain; returns ``(model, held-out accuracy)``."""
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    xs, ys = [], []
    for label, dom in enumerate(DOMAINS):
        c = _sample_crops(domain_dirs[dom], n_crops, rng)
        xs.append(c)
        ys.append(torch.full((len(c),), label, dtype=torch.long))
    x, y = torch.cat(xs), torch.cat(ys)
    perm = torch.from_numpy(rng.permutation(len(x)))
    x, y = x[perm], y[perm]
    n_val = int(len(x) * holdout)
    xv, yv, xt, yt = x[:n_val], y[:n_val], x[n_val:], y[n_val:]
    model = DomainClassifier()
    opt = torch.optim.Adam(model.parameters(), lr=3e-3)
    gen = torch.Generator().manual_seed(seed)
    for _ in range(epochs):
        order = torch.randperm(len(xt), generator=gen)
        for i in range(0, len(xt), 64):
            b = order[i:i + 64]
            loss = F.cross_entropy(model(xt[b]), yt[b])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    model.eval()
    with torch.no_grad():
        acc = float((model(xv).argmax(1) == yv).float().mean())
    log.info("domain classifier held-out accuracy %.3f on %d crops", acc, n_val)
    return model, acc


@torch.no_grad()
def domain_probabilities(model, frames: np.ndarray, backgrounds: np.ndarray):
    """Per-frame ``P(domain)`` (``N x 2``) and the validity flags of the crops."""
    crops, valid = arm_crops(frames, backgrounds)
    model.eval()
    return torch.softmax(model(crops), dim=1).numpy(), valid


def swap_rate(model, frames, backgrounds, target: str) -> float:
    """Fraction of frames whose arm is labeled ``target``; empty frames count as failures."""
    probs, valid = domain_probabilities(model, frames, backgrounds)
    hit = (probs.argmax(1) == DOMAINS.index(target)) & valid
    return float(hit.mean())


def save_classifier(model, path, accuracy):
    checkpoint.save(path, "oracle", checkpoint.arch_hash({"kind": "oracle"}, model),
                    {"model": model.state_dict(), "accuracy": accuracy})


def load_classifier(path):
    ck = checkpoint.load(path, kind="oracle")
    model = DomainClassifier()
    model.load_state_dict(ck["model"])
    model.eval()
    return model, ck["accuracy"]
