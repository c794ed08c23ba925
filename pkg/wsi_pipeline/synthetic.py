"""
Synthetic slides for desk-scale runs: stained tissue texture with elliptical
lesions and a pixel-exact ground-truth mask.
"""
from dataclasses import asdict, dataclass
import logging
import math

import numpy as np
from scipy import ndimage

from .exceptions import SpecInfeasible
from .tiling import SlideImage
from .utils import derive_seed

logger = logging.getLogger(__name__)

GLASS_COLOR = 245.0

# base stain color, noise grain (gaussian sigma, px), nuclei density
STAINS = {
    'A': {'color': (230.0, 170.0, 200.0), 'grain': 3.0, 'nuclei': 0.004},
    'B': {'color': (140.0, 90.0, 160.0), 'grain': 6.0, 'nuclei': 0.006},
}
LESION_TINT = np.array([0.78, 0.62, 0.90])
LESION_NUCLEI = 0.05
NUCLEUS_DARKENING = 0.6


@dataclass(frozen=True)
class SyntheticSlideSpec:
    height: int
    width: int
    n_lesions: int = 0
    lesion_radius_range: tuple = (60, 160)
    stain_domain: str = 'A'
    texture_noise: float = 0.12
    blank_margin: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise SpecInfeasible(f"slide must be at least 1x1, got {self.height}x{self.width}")
        if self.stain_domain not in STAINS:
            raise SpecInfeasible(f"stain_domain must be one of {sorted(STAINS)}, got {self.stain_domain!r}")
        if self.n_lesions < 0:
            raise SpecInfeasible(f"n_lesions must be >= 0, got {self.n_lesions}")
        if not 0 <= self.texture_noise < 1:
            raise SpecInfeasible(f"texture_noise must be in [0, 1), got {self.texture_noise}")
        if not 0 <= self.blank_margin < self.width:
            raise SpecInfeasible(f"blank_margin must be in [0, width), got {self.blank_margin}")
        r_min, r_max = self.lesion_radius_range
        if not 1 <= r_min <= r_max:
            raise SpecInfeasible(f"lesion_radius_range must satisfy 1 <= min <= max, got {self.lesion_radius_range}")
        if self.n_lesions and 2 * r_max > min(self.height, self.tissue_width):
            raise SpecInfeasible(
                f"lesions of radius up to {r_max} do not fit a {self.height}x{self.tissue_width} tissue area"
            )

    @property
    def tissue_width(self):
        return self.width - self.blank_margin

    def to_dict(self):
        data = asdict(self)
        data['lesion_radius_range'] = list(self.lesion_radius_range)
        return data


def ellipse_mask(height, width, cx, cy, rx, ry):
    """
    Pixels whose whole unit square lies inside the axis-aligned ellipse
    centred on grid point (cx, cy).
    """
    xs = np.arange(width)
    ys = np.arange(height)
    far_x = np.maximum(np.abs(xs - cx), np.abs(xs + 1 - cx)) / rx
    far_y = np.maximum(np.abs(ys - cy), np.abs(ys + 1 - cy)) / ry
    return (far_y[:, None] ** 2 + far_x[None, :] ** 2) <= 1.0


def _texture(rng, shape, grain, amplitude):
    noise = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=grain)
    std = noise.std()
    if std > 0:
        noise /= std
    return 1.0 + amplitude * noise


def _nuclei(rng, shape, density):
    seeds = rng.random(shape) < density
    return ndimage.binary_dilation(seeds, iterations=1)


def generate_synthetic_slide(spec: SyntheticSlideSpec, slide_id: str = None) -> SlideImage:
    """Deterministic in `spec.seed`: the same spec gives byte-identical pixels and mask."""
    rng = np.random.default_rng(spec.seed)
    stain = STAINS[spec.stain_domain]
    shape = (spec.height, spec.width)

    factor = _texture(rng, shape, stain['grain'], spec.texture_noise)
    pixels = np.asarray(stain['color'])[None, None, :] * factor[..., None]
    pixels[_nuclei(rng, shape, stain['nuclei'])] *= NUCLEUS_DARKENING

    truth = np.zeros(shape, dtype=np.uint8)
    r_min, r_max = spec.lesion_radius_range
    for _ in range(spec.n_lesions):
        rx, ry = (int(r) for r in rng.integers(r_min, r_max + 1, size=2))
        cx = int(rng.integers(rx, spec.tissue_width - rx + 1))
        cy = int(rng.integers(ry, spec.height - ry + 1))
        truth |= ellipse_mask(spec.height, spec.width, cx, cy, rx, ry).astype(np.uint8)

    lesion = truth.astype(bool)
    if lesion.any():
        lesion_nuclei = _nuclei(rng, shape, LESION_NUCLEI) & lesion
        pixels[lesion] *= LESION_TINT
        pixels[lesion_nuclei] *= NUCLEUS_DARKENING

    if spec.blank_margin:
        glass = GLASS_COLOR + 2.0 * rng.standard_normal((spec.height, spec.blank_margin, 3))
        pixels[:, spec.tissue_width:, :] = glass

    raster = np.clip(np.rint(pixels), 0, 255).astype(np.uint8)
    return SlideImage(id=slide_id or f"synthetic-{spec.seed}", pixels=raster, ground_truth=truth)


def lesion_area_bounds(radius):
    """[0.95, 1.0] * pi * r^2 band that a rasterized circle must fall in."""
    area = math.pi * radius ** 2
    return 0.95 * area, area


def generate_synthetic_dataset(n_slides: int, seed: int, min_size: int = 512, max_size: int = 1024,
                               positive_fraction: float = 0.5, lesion_radius_range=(60, 160),
                               size_step: int = 64, prefix: str = 'slide'):
    """
    A mixed set of positive and negative slides over both stain domains.
    Returns (SlideImage, SyntheticSlideSpec) pairs in slide-id order.
    """
    if n_slides < 1:
        raise SpecInfeasible(f"n_slides must be >= 1, got {n_slides}")
    if not 1 <= min_size <= max_size:
        raise SpecInfeasible(f"sizes must satisfy 1 <= min_size <= max_size, got {min_size}, {max_size}")
    if not 0 <= positive_fraction <= 1:
        raise SpecInfeasible(f"positive_fraction must be in [0, 1], got {positive_fraction}")

    rng = np.random.default_rng(seed)
    n_positive = int(round(n_slides * positive_fraction))
    positive_flags = np.zeros(n_slides, dtype=bool)
    positive_flags[rng.permutation(n_slides)[:n_positive]] = True
    domains = rng.choice(sorted(STAINS), size=n_slides)
    sizes = np.arange(min_size, max_size + 1, size_step) if size_step else np.array([min_size])

    dataset = []
    for index in range(n_slides):
        height, width = (int(s) for s in rng.choice(sizes, size=2))
        r_max = min(lesion_radius_range[1], min(height, width) // 2 - 1)
        r_min = min(lesion_radius_range[0], r_max)
        spec = SyntheticSlideSpec(
            height=height,
            width=width,
            n_lesions=int(rng.integers(1, 3)) if positive_flags[index] else 0,
            lesion_radius_range=(r_min, r_max),
            stain_domain=str(domains[index]),
            seed=derive_seed(seed, index),
        )
        slide = generate_synthetic_slide(spec, slide_id=f"{prefix}-{index:03d}")
        dataset.append((slide, spec))
        logger.debug(f"Generated {slide.id}: {width}x{height} domain={spec.stain_domain} lesions={spec.n_lesions}")

    logger.info(f"Generated {n_slides} synthetic slides ({n_positive} positive)")
    return dataset
