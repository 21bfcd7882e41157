"""Shared fixtures for the test suite (desk-scale configs, parameter jitter)."""
import numpy as np

from mmae.model import DecoderConfig, EncoderConfig


def desk_encoder(modalities=1, depth=2):
    # M = 16 positions, width 32
    return EncoderConfig(image_size=32, patch_size=8, depth=depth, heads=2, head_dim=16,
                         modalities=modalities)


def desk_decoder(cross=False, depth=2):
    return DecoderConfig(depth=depth, heads=2, embed_dim=32, has_cross_attention=cross)


def jitter(params, seed=0, scale=0.2):
    """Move parameters off their structured init so every gradient path is exercised."""
    rng = np.random.default_rng(seed)
    for name, t in params.items():
        t.data[...] = t.data + rng.normal(0.0, scale, t.shape)
    return params


def random_images(n, size=32, seed=0):
    return np.random.default_rng(seed).integers(0, 256, (n, size, size, 3)).astype(np.uint8)
