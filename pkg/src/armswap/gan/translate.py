"""Frame-by-frame arm translation with a trained generator."""
from __future__ import annotations

import numpy as np
import torch

from ..compositing import support_mask
from ..errors import InvalidArgument
from ..video import ArmVideo, MaskSequence
from .crops import CropPolicy, crop_frame, paste


def policy_for(gen) -> CropPolicy:
    return CropPolicy(getattr(gen, "resolution", 64), getattr(gen, "crop_dilate", 4),
                      getattr(gen, "crop_mode", "arm_bbox"))


@torch.no_grad()
def translate_frames(gen, frames: np.ndarray, masks: np.ndarray, policy: CropPolicy) -> np.ndarray:
    n, _, h, w = frames.shape
    out = np.zeros_like(frames)
    for i in range(n):
        crop, box = crop_frame(frames[i], masks[i], policy)
        if crop is None:
            continue
        translated = gen(crop[None])[0]
        out[i] = paste(translated, box, (h, w))
    return out


def translate_video(gen, arm: ArmVideo, crop_policy: CropPolicy | None = None,
                    masks: MaskSequence | None = None, direction: str | None = None) -> ArmVideo:
    """Translate every arm frame: crop, generate, paste back, re-mask.

    Crops are square boxes around the mask bbox dilated by ``policy.dilate``.
    Pixels outside the translated arm's luminance support are zeroed.  Frames
    with an empty mask come out all-zero.
    """
    if direction is not None:
        have = getattr(gen, "meta", {}).get("direction")
        if have is not None and have != direction:
            raise InvalidArgument(f"generator maps {have}, requested {direction}")
    policy = crop_policy or policy_for(gen)
    m = masks.data if masks is not None else support_mask(arm.data)
    if policy.mode == "full_frame":
        raise InvalidArgument("translate_video works on arm crops; use translate_full_frames")
    out = translate_frames(gen, arm.data, m, policy)
    out = out * support_mask(out)[:, None]
    return ArmVideo(np.clip(out, 0.0, 1.0), fps=arm.fps)


@torch.no_grad()
def translate_full_frames(gen, video) -> np.ndarray:
    """Whole-frame translation (no mask disentanglement); frames must be 64-aligned."""
    x = torch.from_numpy(video.data)
    h, w = x.shape[-2:]
    res = getattr(gen, "resolution", h)
    if (h, w) != (res, res):
        x = torch.nn.functional.interpolate(x, size=(res, res), mode="bilinear", align_corners=False)
    y = torch.cat([gen(x[i:i + 4]) for i in range(0, len(x), 4)])
    if (h, w) != (res, res):
        y = torch.nn.functional.interpolate(y, size=(h, w), mode="bilinear", align_corners=False)
    return y.clamp(0, 1).numpy()
