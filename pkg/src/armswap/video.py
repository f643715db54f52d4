"""Array carriers for clips and masks.

Videos are ``N x 3 x H x W`` float32 arrays in [0, 1]; masks are ``N x H x W``
float32 arrays holding only 0 and 1.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidArgument

DEFAULT_FPS = 8


@dataclass
class VideoTensor:
    data: np.ndarray
    fps: int = DEFAULT_FPS

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or self.data.shape[1] != 3:
            raise InvalidArgument(f"video must be N x 3 x H x W, got {self.data.shape}")
        if self.data.shape[0] < 1:
            raise InvalidArgument("video needs at least one frame")
        if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise InvalidArgument("video values must lie in [0, 1]")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def frame_size(self) -> tuple[int, int]:
        return self.data.shape[2], self.data.shape[3]

    def __len__(self):
        return self.n_frames


class ArmVideo(VideoTensor):
    """Arm pixels on black."""


class BackgroundVideo(VideoTensor):
    """Clean plate with the arm removed."""


@dataclass
class MaskSequence:
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise InvalidArgument(f"masks must be N x H x W, got {self.data.shape}")
        if not np.isin(self.data, (0.0, 1.0)).all():
            raise InvalidArgument("masks must be strictly binary")

    def __len__(self):
        return self.data.shape[0]


def check_pair(video: VideoTensor, masks: MaskSequence):
    n, _, h, w = video.data.shape
    if masks.data.shape != (n, h, w):
        raise InvalidArgument(
            f"mask shape {masks.data.shape} does not match video {video.data.shape}"
        )


def to_uint8(frame: np.ndarray) -> np.ndarray:
    """3 x H x W float in [0,1] -> H x W x 3 uint8."""
    return np.clip(np.rint(np.moveaxis(frame, 0, -1) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(img: np.ndarray) -> np.ndarray:
    return np.moveaxis(img.astype(np.float32) / 255.0, -1, 0)


def save_frames(video: VideoTensor | np.ndarray, folder: Path, prefix="frame"):
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    data = video.data if isinstance(video, VideoTensor) else video
    for i, frame in enumerate(data):
        Image.fromarray(to_uint8(frame)).save(folder / f"{prefix}_{i:04d}.png")


def load_frames(folder: Path, prefix="frame", fps=DEFAULT_FPS) -> VideoTensor:
    paths = sorted(Path(folder).glob(f"{prefix}_*.png"))
    if not paths:
        raise FileNotFoundError(f"no {prefix}_*.png frames in {folder}")
    frames = [from_uint8(np.asarray(Image.open(p).convert("RGB"))) for p in paths]
    return VideoTensor(np.stack(frames), fps=fps)


def save_masks(masks: MaskSequence, folder: Path, prefix="mask"):
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(masks.data):
        Image.fromarray((m * 255).astype(np.uint8)).save(folder / f"{prefix}_{i:04d}.png")


def load_masks(folder: Path, prefix="mask") -> MaskSequence:
    paths = sorted(Path(folder).glob(f"{prefix}_*.png"))
    if not paths:
        raise FileNotFoundError(f"no {prefix}_*.png masks in {folder}")
    return MaskSequence(
        np.stack([(np.asarray(Image.open(p).convert("L")) > 127) for p in paths])
    )
