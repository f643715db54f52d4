"""Stage 1: unpaired arm-to-arm translation."""
from .crops import CropPolicy
from .losses import (
    LossBreakdown,
    PatchFeatureSet,
    adversarial_loss,
    cycle_loss,
    patchnce_loss,
    total_cut_loss,
    total_cyclegan_loss,
)
from .networks import Generator, PatchDiscriminator, PatchSampleMLP
from .train import ImagePool, load_generator, read_log, train_gan
from .translate import translate_full_frames, translate_video


def generator_forward(params: Generator, image):
    """Translate one ``3 x H x W`` image (tensor or array) in eval mode."""
    import numpy as np
    import torch

    x = torch.as_tensor(np.asarray(image, dtype=np.float32))[None]
    params.eval()
    with torch.no_grad():
        return params(x)[0].numpy()


__all__ = [
    "CropPolicy", "Generator", "ImagePool", "LossBreakdown", "PatchDiscriminator",
    "PatchFeatureSet", "PatchSampleMLP", "adversarial_loss", "cycle_loss", "generator_forward",
    "load_generator", "patchnce_loss", "read_log", "total_cut_loss", "total_cyclegan_loss",
    "train_gan", "translate_full_frames", "translate_video",
]
