import json

import numpy as np
import pytest
import torch

from armswap.datagen import build_dataset, build_eval_split, generate_clip, clip_seeds

# config overrides that shrink every stage to seconds
SHRINK = {
    "datagen.train_clips": 4, "datagen.n_frames": 8, "datagen.eval_clips": 2,
    "gan.epochs": 2, "gan.images_per_domain": 8, "gan.base_width": 8, "gan.n_residual_blocks": 1,
    "gan.disc_width": 8, "gan.disc_layers": 2, "gan.resolution": 32, "gan.checkpoint_every": 1,
    "gan.nce_patches": 16, "gan.nce_dim": 16,
    "vae.width": 8, "vae.epochs": 1, "vae.max_frames": 32, "vae.checkpoint_every": 1,
    "diffusion.width": 16, "diffusion.n_blocks": 1, "diffusion.cond_dim": 8, "diffusion.steps": 4,
    "diffusion.checkpoint_every": 2, "diffusion.log_every": 1, "diffusion.reference_variants": 1,
    "diffusion.batch_size": 2,
    "sampler.steps": 2, "metrics.classifier_crops": 40,
}


def cli_argv(command, out, *extra, **overrides):
    sets = {**SHRINK, **overrides}
    argv = [command, "--out", str(out)]
    for k, v in sets.items():
        argv += ["--set", f"{k}={json.dumps(v)}"]
    return argv + list(extra)


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    """Six training clips per domain and two paired eval clips, 8 frames at 64x64."""
    root = tmp_path_factory.mktemp("data")
    for d in ("A", "B"):
        build_dataset(d, 6, 8, (64, 64), 11, root)
    build_eval_split("A", 2, 8, (64, 64), 11, root)
    return root


@pytest.fixture(scope="session")
def clip_a():
    return generate_clip("A", clip_seeds(5, "A", 0), 16, (64, 64))


@pytest.fixture(scope="session")
def clip_b():
    return generate_clip("B", clip_seeds(5, "B", 0), 16, (64, 64))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
