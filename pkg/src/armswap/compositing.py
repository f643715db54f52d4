"""Arm/background disentanglement, blending and train-time arm distortions."""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import InvalidArgument, MissingData
from .video import ArmVideo, BackgroundVideo, MaskSequence, VideoTensor, check_pair

BACKGROUND_MODES = ("ground_truth", "temporal_median", "constant_fill")
# half the luminance of the darkest rendered arm pixel (about 0.3); generator
# speckle and blur halos on the black crop background stay below it
SUPPORT_THRESHOLD = 0.15
DIFF_THRESHOLD = 0.05


@dataclass(frozen=True)
class DistortionParams:
    elastic_alpha: float = 4.0
    elastic_sigma: float = 8.0
    perspective_jitter: float = 0.03
    blur_sigma_range: tuple = (0.3, 1.2)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.blur_sigma_range
        if min(self.elastic_alpha, self.elastic_sigma, self.perspective_jitter, lo, hi) < 0:
            raise InvalidArgument("distortion magnitudes must be non-negative")
        if lo > hi:
            raise InvalidArgument("blur_sigma_range must be (lo, hi) with lo <= hi")
        if self.perspective_jitter > 0.2:
            raise InvalidArgument("perspective_jitter must be <= 0.2")

    @classmethod
    def zero(cls, seed=0):
        return cls(0.0, 0.0, 0.0, (0.0, 0.0), seed)

    def to_dict(self):
        return asdict(self)


def extract_arm(video: VideoTensor, masks: MaskSequence) -> ArmVideo:
    check_pair(video, masks)
    return ArmVideo(video.data * masks.data[:, None], fps=video.fps)


def extract_background(video: VideoTensor, masks: MaskSequence, mode="ground_truth", *,
                       clean_plate: VideoTensor | None = None, fill=0.5) -> BackgroundVideo:
    """Fill the masked region of ``video``; unmasked pixels are copied unchanged.

    ``temporal_median`` takes, per pixel, the median over the frames where that
    pixel is unmasked (falling back to ``fill`` if it is masked in every frame).
    """
    check_pair(video, masks)
    m = masks.data[:, None]
    if mode == "ground_truth":
        if clean_plate is None:
            raise MissingData("ground_truth background needs the clip's clean plate")
        if clean_plate.data.shape != video.data.shape:
            raise InvalidArgument("clean plate shape does not match video")
        filled = clean_plate.data
    elif mode == "temporal_median":
        vals = np.where(m > 0, np.nan, video.data)
        with warnings.catch_warnings():
            # all-NaN pixels (masked in every frame) are handled below
            warnings.simplefilter("ignore", RuntimeWarning)
            med = np.nanmedian(vals, axis=0)
        med = np.where(np.isnan(med), fill, med).astype(np.float32)
        filled = np.broadcast_to(med, video.data.shape)
    elif mode == "constant_fill":
        filled = np.full_like(video.data, fill)
    else:
        raise InvalidArgument(f"unknown background mode {mode!r}")
    out = np.where(m > 0, filled, video.data)
    return BackgroundVideo(out.astype(np.float32), fps=video.fps)


def alpha_blend(arm: VideoTensor, bkg: VideoTensor, masks: MaskSequence) -> VideoTensor:
    check_pair(arm, masks)
    if bkg.data.shape != arm.data.shape:
        raise InvalidArgument(f"background {bkg.data.shape} vs arm {arm.data.shape}")
    m = masks.data[:, None]
    return VideoTensor(m * arm.data + (1.0 - m) * bkg.data, fps=arm.fps)


def support_mask(arm: np.ndarray, threshold=SUPPORT_THRESHOLD) -> np.ndarray:
    """Binary support of an arm-on-black array (``... x 3 x H x W``) by luminance."""
    lum = 0.299 * arm[..., 0, :, :] + 0.587 * arm[..., 1, :, :] + 0.114 * arm[..., 2, :, :]
    return (lum > threshold).astype(np.float32)


def difference_mask(video: np.ndarray, background: np.ndarray, threshold=DIFF_THRESHOLD) -> np.ndarray:
    """Pixels whose luminance of ``|video - background|`` exceeds ``threshold``."""
    return support_mask(np.abs(np.asarray(video) - np.asarray(background)), threshold)


# --------------------------------------------------------------------------
# geometric and photometric transforms on 3 x H x W images


def _bilinear(image, rows, cols):
    """Sample each channel at float (row, col) positions, zero outside."""
    out = np.empty_like(image)
    for c in range(image.shape[0]):
        out[c] = ndimage.map_coordinates(image[c], [rows, cols], order=1, mode="constant",
                                         cval=0.0, prefilter=False)
    return out


def elastic_field(shape, alpha, sigma, seed):
    """Displacement field (d_row, d_col) = alpha * smooth(U(-1, 1), sigma)."""
    h, w = shape
    rng = np.random.default_rng(seed)
    raw = rng.uniform(-1.0, 1.0, size=(2, h, w))
    if sigma > 0:
        raw = np.stack([ndimage.gaussian_filter(r, sigma, mode="reflect") for r in raw])
    return alpha * raw


def elastic_transform(image: np.ndarray, alpha: float, sigma: float, seed: int) -> np.ndarray:
    if alpha < 0 or sigma < 0:
        raise InvalidArgument("alpha and sigma must be >= 0")
    image = np.asarray(image, dtype=np.float32)
    if alpha == 0:
        return image.copy()
    h, w = image.shape[1:]
    d = elastic_field((h, w), alpha, sigma, seed)
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return _bilinear(image, rows + d[0], cols + d[1])


def fit_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 homography mapping 4 ``src`` points to ``dst`` (x, y rows), h33 = 1."""
    A, b = [], []
    for (x, y), (u, v) in zip(src, dst):
        A.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        A.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b += [u, v]
    h = np.linalg.solve(np.asarray(A, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return np.append(h, 1.0).reshape(3, 3)


def _degenerate(pts):
    for i in range(4):
        a, b, c = (pts[j] for j in range(4) if j != i)
        if abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])) < 1e-6:
            return True
    return False


def perspective_homography(shape, jitter_fraction, seed) -> np.ndarray:
    if not 0 <= jitter_fraction <= 0.2:
        raise InvalidArgument("jitter_fraction must be in [0, 0.2]")
    h, w = shape
    corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    if jitter_fraction == 0:
        return np.eye(3)
    rng = np.random.default_rng(seed)
    lim = jitter_fraction * min(h, w)
    while True:
        moved = corners + rng.uniform(-lim, lim, size=(4, 2))
        if not _degenerate(moved):
            break
    return fit_homography(corners, moved)


def warp_homography(image: np.ndarray, H: np.ndarray, order=1) -> np.ndarray:
    """Resample ``image`` so that output pixel p shows input pixel H^-1 p."""
    c, h, w = image.shape
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pts = np.stack([xs.ravel(), ys.ravel(), np.ones(h * w)])
    src = np.linalg.inv(H) @ pts
    sx = (src[0] / src[2]).reshape(h, w)
    sy = (src[1] / src[2]).reshape(h, w)
    if order == 0:
        ri, ci = np.rint(sy).astype(int), np.rint(sx).astype(int)
        ok = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
        out = np.zeros_like(image)
        out[:, ok] = image[:, ri[ok], ci[ok]]
        return out
    return _bilinear(image, sy, sx)


def perspective_transform(image: np.ndarray, jitter_fraction: float, seed: int) -> np.ndarray:
    image = np.asarray(image, dtype=np.float32)
    H = perspective_homography(image.shape[1:], jitter_fraction, seed)
    if jitter_fraction == 0:
        return image.copy()
    return warp_homography(image, H)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, radius ceil(3 sigma), reflect padding."""
    if sigma < 0:
        raise InvalidArgument("sigma must be >= 0")
    image = np.asarray(image, dtype=np.float32)
    if sigma == 0:
        return image.copy()
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    out = image.astype(np.float64)
    for axis in (1, 2):
        pad = [(0, 0)] * 3
        pad[axis] = (r, r)
        p = np.pad(out, pad, mode="symmetric")
        n = out.shape[axis]
        acc = np.zeros_like(out)
        for i, wk in enumerate(k):
            sl = [slice(None)] * 3
            sl[axis] = slice(i, i + n)
            acc += wk * p[tuple(sl)]
        out = acc
    return out.astype(np.float32)


def frame_seeds(seed: int, n: int) -> list[int]:
    ss = np.random.SeedSequence([int(seed), 0xD157])
    return [int(s) for s in ss.generate_state(n)]


def distort_frame(image, params: DistortionParams, frame_seed: int) -> np.ndarray:
    rng = np.random.default_rng(frame_seed)
    s_el, s_pe = (int(v) for v in rng.integers(0, 2**31, size=2))
    lo, hi = params.blur_sigma_range
    blur = float(rng.uniform(lo, hi)) if hi > 0 else 0.0
    # applied in order: blur, then perspective, then elastic
    out = gaussian_blur(image, blur)
    out = perspective_transform(out, params.perspective_jitter, s_pe)
    out = elastic_transform(out, params.elastic_alpha, params.elastic_sigma, s_el)
    return np.clip(out, 0.0, 1.0)


def distort_arm_video(arm: VideoTensor, params: DistortionParams) -> ArmVideo:
    """Independent per-frame elastic o perspective o blur distortion.

    Masks are deliberately not transported, so the result misaligns with the
    source mask the way a GAN-translated arm does.
    """
    seeds = frame_seeds(params.seed, arm.n_frames)
    out = np.stack([distort_frame(f, params, s) for f, s in zip(arm.data, seeds)])
    return ArmVideo(out, fps=arm.fps)
