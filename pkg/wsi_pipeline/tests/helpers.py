"""
Shared fixtures for the pipeline tests: stub scorers, a stub segmenter and
small slide factories.
"""
import numpy as np
import torch
import torch.nn as nn

from wsi_pipeline.tiling import PatchRecord, SlideImage


class ConstantScorer:
    """PatchScorer returning one probability for every patch, counting calls."""

    def __init__(self, p, model_id='constant'):
        self.p = p
        self.model_id = model_id
        self.calls = 0

    def score(self, pixels):
        self.calls += 1
        return self.p


class BrightnessScorer:
    """Darker patches score higher; deterministic in the pixels."""

    def __init__(self, model_id='brightness'):
        self.model_id = model_id

    def score(self, pixels):
        return 1.0 - float(np.asarray(pixels, dtype=np.float64).mean()) / 255.0


class ConstantSegmenter(nn.Module):
    """Segmentation stub predicting a constant probability everywhere."""

    def __init__(self, value=1.0):
        super().__init__()
        self.value = value
        self.calls = 0

    def forward(self, x):
        self.calls += x.shape[0]
        return torch.full((x.shape[0], 1, x.shape[2], x.shape[3]), self.value)


def noise_slide(slide_id='noise', size=128, seed=0, ground_truth=None):
    """Uniform-noise RGB slide; its pixel std is far above any RoI threshold."""
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
    return SlideImage(id=slide_id, pixels=pixels, ground_truth=ground_truth)


def blank_slide(slide_id='blank', size=128, value=255):
    return SlideImage(id=slide_id, pixels=np.full((size, size, 3), value, dtype=np.uint8))


def square_mask(size, top, left, side):
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[top:top + side, left:left + side] = 1
    return mask


def make_patch(slide_id='s', x=0, y=0, size=16, value=None, mask=None, seed=0):
    if value is None:
        pixels = np.random.default_rng(seed).integers(0, 256, size=(size, size, 3), dtype=np.uint8)
    else:
        pixels = np.full((size, size, 3), value, dtype=np.uint8)
    return PatchRecord(slide_id=slide_id, origin_x=x, origin_y=y, pixels=pixels, mask_crop=mask)
