"""
Patch labels for classifier training: hard labels from the malignant-area
ratio, area-guided smoothed label distributions, balanced sampling and
patch augmentation.
"""
from dataclasses import dataclass, replace
from typing import Optional, Sequence
import logging
import math

import numpy as np
from scipy import ndimage

from .exceptions import EmptyClass, InvalidConfig, NonDistribution, RatioOutOfRange
from .tiling import PatchRecord, malignant_area

logger = logging.getLogger(__name__)

BENIGN = 0
MALIGNANT = 1


@dataclass(frozen=True)
class SmoothedLabel:
    p_benign: float
    p_malignant: float

    def __post_init__(self):
        for value in (self.p_benign, self.p_malignant):
            if not -1e-12 <= value <= 1 + 1e-12:
                raise NonDistribution(f"label component {value} outside [0, 1]")
        if abs(self.p_benign + self.p_malignant - 1.0) > 1e-9:
            raise NonDistribution(f"label ({self.p_benign}, {self.p_malignant}) does not sum to 1")

    def as_tuple(self):
        return (self.p_benign, self.p_malignant)

    @classmethod
    def one_hot(cls, y):
        return cls(p_benign=float(y == BENIGN), p_malignant=float(y == MALIGNANT))


@dataclass(frozen=True)
class LabelingConfig:
    S: float = 0.05
    epsilon: float = 0.1
    a1_max: int = 1

    def __post_init__(self):
        if not 0 < self.S < 1:
            raise InvalidConfig(f"S must be in (0, 1), got {self.S}")
        if not 0 <= self.epsilon < 1:
            raise InvalidConfig(f"epsilon must be in [0, 1), got {self.epsilon}")
        if self.epsilon > 0 and self.a1_max < 1:
            raise InvalidConfig(f"a1_max must be >= 1 when smoothing is enabled, got {self.a1_max}")


@dataclass(frozen=True)
class AugmentConfig:
    """Augmentation policy; `fold_aug` enables the horizontal/vertical flips."""
    fold_aug: bool = True
    p_flip: float = 0.5
    p_brightness_contrast: float = 0.5
    p_grid_distortion: float = 0.5
    contrast_range: tuple = (0.8, 1.2)
    brightness_range: tuple = (-25.0, 25.0)
    grid_nodes: int = 4
    grid_max_shift: float = 0.1

    def __post_init__(self):
        for name in ('p_flip', 'p_brightness_contrast', 'p_grid_distortion', 'grid_max_shift'):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise InvalidConfig(f"{name} must be in [0, 1], got {value}")
        if self.grid_nodes < 2:
            raise InvalidConfig(f"grid_nodes must be >= 2, got {self.grid_nodes}")


@dataclass(eq=False)
class LabeledPatch:
    patch: PatchRecord
    slide_positive: bool
    a1: int
    ratio: float
    hard_label: int
    target: Optional[SmoothedLabel] = None


def hard_label(ratio: float, S: float) -> int:
    return MALIGNANT if ratio > S else BENIGN


def smooth_label(y: int, a1: int, cfg: LabelingConfig) -> SmoothedLabel:
    """
    Area-guided label smoothing: p_k = (1 - eps) * [k == y] + eps * a(k)
    with a(1) = r, a(0) = 1 - r and r = a1 / a1_max.
    """
    if a1 < 0 or a1 > cfg.a1_max:
        raise RatioOutOfRange(f"malignant area {a1} outside [0, {cfg.a1_max}]")
    r = a1 / cfg.a1_max
    eps = cfg.epsilon
    p_benign = (1 - eps) * (y == BENIGN) + eps * (1 - r)
    p_malignant = (1 - eps) * (y == MALIGNANT) + eps * r
    return SmoothedLabel(p_benign=float(p_benign), p_malignant=float(p_malignant))


def soft_target_cross_entropy(predicted_probs: Sequence[float], target: SmoothedLabel) -> float:
    probs = [float(p) for p in predicted_probs]
    if len(probs) != 2 or any(not p > 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-6:
        raise NonDistribution(f"prediction {probs} is not a positive 2-class distribution")
    return -math.fsum(t * math.log(p) for t, p in zip(target.as_tuple(), probs))


def label_patches(patches: Sequence[PatchRecord], slide_positive: bool, S: float) -> list:
    """Measure area and hard label of every patch of one slide."""
    labeled = []
    for patch in patches:
        if patch.mask_crop is None:
            a1, ratio = 0, 0.0
        else:
            a1 = malignant_area(patch.mask_crop)
            ratio = a1 / patch.mask_crop.size
        labeled.append(LabeledPatch(
            patch=patch,
            slide_positive=slide_positive,
            a1=a1,
            ratio=ratio,
            hard_label=hard_label(ratio, S) if slide_positive else BENIGN,
        ))
    return labeled


def compute_a1_max(labeled: Sequence[LabeledPatch]) -> int:
    """Largest malignant pixel count over the training patch set (at least 1)."""
    return max([item.a1 for item in labeled] + [1])


def attach_targets(labeled: Sequence[LabeledPatch], cfg: LabelingConfig):
    for item in labeled:
        item.target = smooth_label(item.hard_label, item.a1, cfg)
    return labeled


def sample_training_patches(candidates: Sequence[LabeledPatch], n_samples: int, seed: int,
                            within_positive_slides: bool = False) -> list:
    """
    Balanced positive/negative draw, capped by the minority class.

    Positives are malignant patches of positive slides. Negatives come from
    negative slides, or from benign patches of positive slides when
    `within_positive_slides` is set (the key-patch training rule).
    """
    positives = [c for c in candidates if c.slide_positive and c.hard_label == MALIGNANT]
    if within_positive_slides:
        negatives = [c for c in candidates if c.slide_positive and c.hard_label == BENIGN]
    else:
        negatives = [c for c in candidates if not c.slide_positive]
    if not positives or not negatives:
        raise EmptyClass(f"need both classes, got {len(positives)} positive and {len(negatives)} negative candidates")

    per_class = min(n_samples // 2, len(positives), len(negatives))
    rng = np.random.default_rng(seed)
    pos_idx = rng.choice(len(positives), size=per_class, replace=False)
    neg_idx = rng.choice(len(negatives), size=per_class, replace=False)
    selected = [positives[i] for i in pos_idx] + [negatives[i] for i in neg_idx]
    order = rng.permutation(len(selected))
    logger.info(f"Sampled {per_class} positive + {per_class} negative patches from {len(candidates)} candidates")
    return [selected[i] for i in order]


def flip_patch(patch: PatchRecord, axis: int) -> PatchRecord:
    """Flip pixels and mask together; axis 1 is horizontal, axis 0 vertical."""
    mask = None if patch.mask_crop is None else np.flip(patch.mask_crop, axis=axis).copy()
    return replace(patch, pixels=np.flip(patch.pixels, axis=axis).copy(), mask_crop=mask)


def brightness_contrast(pixels: np.ndarray, contrast: float, brightness: float) -> np.ndarray:
    out = pixels.astype(np.float64) * contrast + brightness
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def grid_distortion_field(size: int, rng: np.random.Generator, nodes: int, max_shift: float):
    """Dense (dy, dx) displacement, bilinear between random control-node shifts."""
    limit = max_shift * size
    coarse = rng.uniform(-limit, limit, size=(2, nodes, nodes))
    axis = np.linspace(0, nodes - 1, size)
    yy, xx = np.meshgrid(axis, axis, indexing='ij')
    dy = ndimage.map_coordinates(coarse[0], [yy, xx], order=1)
    dx = ndimage.map_coordinates(coarse[1], [yy, xx], order=1)
    return dy, dx


def apply_displacement(patch: PatchRecord, dy: np.ndarray, dx: np.ndarray) -> PatchRecord:
    h, w = patch.pixels.shape[:2]
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing='ij')
    coords = [yy + dy, xx + dx]
    channels = [
        ndimage.map_coordinates(patch.pixels[..., c].astype(np.float64), coords, order=1, mode='reflect')
        for c in range(patch.pixels.shape[2])
    ]
    pixels = np.clip(np.rint(np.stack(channels, axis=-1)), 0, 255).astype(np.uint8)
    mask = None
    if patch.mask_crop is not None:
        mask = ndimage.map_coordinates(patch.mask_crop, coords, order=0, mode='reflect').astype(patch.mask_crop.dtype)
    return replace(patch, pixels=pixels, mask_crop=mask)


def augment_patch(patch: PatchRecord, seed: int, cfg: AugmentConfig = AugmentConfig()) -> PatchRecord:
    """
    Random flips, brightness/contrast jitter and grid distortion, each gated by
    its own draw. The mask only receives the geometric transforms.
    """
    rng = np.random.default_rng(seed)
    draws = rng.random(4)
    out = patch
    if cfg.fold_aug and draws[0] < cfg.p_flip:
        out = flip_patch(out, axis=1)
    if cfg.fold_aug and draws[1] < cfg.p_flip:
        out = flip_patch(out, axis=0)
    if draws[2] < cfg.p_brightness_contrast:
        contrast = rng.uniform(*cfg.contrast_range)
        brightness = rng.uniform(*cfg.brightness_range)
        out = replace(out, pixels=brightness_contrast(out.pixels, contrast, brightness))
    if draws[3] < cfg.p_grid_distortion:
        dy, dx = grid_distortion_field(out.pixels.shape[0], rng, cfg.grid_nodes, cfg.grid_max_shift)
        out = apply_displacement(out, dy, dx)
    return out
