"""
Utility functions shared by the training and inference code.
"""
import logging
import random

import numpy as np
import torch
import torch.nn.functional as F
from django.conf import settings

logger = logging.getLogger(__name__)


def seed_everything(seed):
    """Seed python, numpy and torch so runs are reproducible."""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


def configure_torch():
    threads = getattr(settings, 'WSI_TORCH_THREADS', 0)
    if threads:
        torch.set_num_threads(threads)
        logger.info(f"Torch limited to {threads} threads")


def pixels_to_tensor(pixels):
    """H x W x 3 uint8 raster (or a list of them) -> float tensor in [0, 1], channels first."""
    if isinstance(pixels, (list, tuple)):
        return torch.stack([pixels_to_tensor(p) for p in pixels])
    array = np.ascontiguousarray(pixels, dtype=np.float32) / 255.0
    return torch.from_numpy(array).permute(2, 0, 1).contiguous()


def mask_to_tensor(mask):
    return torch.from_numpy(np.ascontiguousarray(mask, dtype=np.float32)).unsqueeze(0)


def resize_images(batch, size):
    """Bilinear resize of a B x C x H x W batch to size x size."""
    if tuple(batch.shape[-2:]) == (size, size):
        return batch
    return F.interpolate(batch, size=(size, size), mode='bilinear', align_corners=False)


def resize_masks(batch, size):
    """Nearest-neighbour resize so binary masks stay binary."""
    if tuple(batch.shape[-2:]) == (size, size):
        return batch
    return F.interpolate(batch, size=(size, size), mode='nearest')


def derive_seed(seed, *parts):
    """Stable child seed for a (seed, index, ...) tuple."""
    return int(np.random.SeedSequence([seed, *parts]).generate_state(1)[0])
