"""Square arm crops around mask bounding boxes and their inverse paste."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class CropPolicy:
    resolution: int = 64
    dilate: int = 4
    mode: str = "arm_bbox"  # or "full_frame"


def crop_box(mask: np.ndarray, dilate: int):
    """Square box (row0, col0, side) around the dilated mask bbox, or None if empty."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    r0, r1 = rows[0] - dilate, rows[-1] + dilate + 1
    c0, c1 = cols[0] - dilate, cols[-1] + dilate + 1
    side = int(max(r1 - r0, c1 - c0))
    rc = (r0 + r1) / 2.0
    cc = (c0 + c1) / 2.0
    return int(np.floor(rc - side / 2.0)), int(np.floor(cc - side / 2.0)), side


def _resize(x: torch.Tensor, size: int) -> torch.Tensor:
    # nearest-exact makes up-then-down resizing an exact identity for side <= size
    return F.interpolate(x, size=(size, size), mode="nearest-exact")


def cut(frame: np.ndarray, box, resolution: int) -> torch.Tensor:
    """Crop ``frame`` (3 x H x W) at ``box`` with zero padding, resized to resolution."""
    r0, c0, side = box
    _, h, w = frame.shape
    canvas = np.zeros((3, side, side), dtype=np.float32)
    rs, re = max(r0, 0), min(r0 + side, h)
    cs, ce = max(c0, 0), min(c0 + side, w)
    canvas[:, rs - r0:re - r0, cs - c0:ce - c0] = frame[:, rs:re, cs:ce]
    return _resize(torch.from_numpy(canvas)[None], resolution)[0]


def paste(crop: torch.Tensor, box, frame_size) -> np.ndarray:
    """Inverse of :func:`cut`: resize back and place into a zero frame."""
    r0, c0, side = box
    h, w = frame_size
    back = _resize(crop[None], side)[0].numpy()
    out = np.zeros((3, h, w), dtype=np.float32)
    rs, re = max(r0, 0), min(r0 + side, h)
    cs, ce = max(c0, 0), min(c0 + side, w)
    out[:, rs:re, cs:ce] = back[:, rs - r0:re - r0, cs - c0:ce - c0]
    return out


def crop_frame(frame: np.ndarray, mask: np.ndarray, policy: CropPolicy):
    """Crop one frame per policy; returns ``(tensor, box)`` or ``(None, None)`` if empty."""
    if policy.mode == "full_frame":
        h, w = frame.shape[1:]
        box = (0, 0, max(h, w))
        return cut(frame, box, policy.resolution), box
    box = crop_box(mask, policy.dilate)
    if box is None:
        return None, None
    return cut(frame, box, policy.resolution), box
