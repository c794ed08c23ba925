"""
Slide-level geometry: RoI filtering, sliding-window patch extraction,
malignant-area measurement, and stitching patch masks back into a
slide-resolution probability map.

Rasters are numpy arrays with a top-left origin in row-major order:
slides are H x W x 3 uint8, masks are H x W with values in {0, 1}.
"""
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union
import logging

import numpy as np

from .exceptions import InvalidConfig, PatchOutOfBounds, SlideTooSmall, ShapeMismatch

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class SlideImage:
    id: str
    pixels: np.ndarray
    ground_truth: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ShapeMismatch(f"slide {self.id}: expected H x W x 3 pixels, got {self.pixels.shape}")
        if self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise ShapeMismatch(f"slide {self.id}: empty raster")
        if self.ground_truth is not None and self.ground_truth.shape != self.pixels.shape[:2]:
            raise ShapeMismatch(
                f"slide {self.id}: ground truth {self.ground_truth.shape} does not match pixels {self.pixels.shape[:2]}"
            )

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def is_positive(self):
        """A slide is positive when its ground truth marks any malignant pixel."""
        return self.ground_truth is not None and bool(np.any(self.ground_truth))


@dataclass(frozen=True)
class TileSpec:
    patch_size: int = 1536
    stride: int = 512

    def __post_init__(self):
        if self.patch_size < 1:
            raise InvalidConfig(f"patch_size must be >= 1, got {self.patch_size}")
        if not 1 <= self.stride <= self.patch_size:
            raise InvalidConfig(f"stride must be in [1, patch_size], got {self.stride}")


@dataclass(eq=False)
class PatchRecord:
    slide_id: str
    origin_x: int
    origin_y: int
    pixels: np.ndarray
    mask_crop: Optional[np.ndarray] = None

    @property
    def key(self):
        return (self.slide_id, self.origin_x, self.origin_y)

    @property
    def size(self):
        return self.pixels.shape[0]


@dataclass(eq=False)
class StitchedMap:
    probabilities: np.ndarray
    coverage_counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.coverage_counts is None:
            self.coverage_counts = np.zeros(self.probabilities.shape, dtype=np.int32)

    def binarize(self, threshold=0.5):
        return (self.probabilities >= threshold).astype(np.uint8)


def roi_keep(patch: Union[PatchRecord, np.ndarray], R: float) -> bool:
    """
    Keep a patch unless the population standard deviation of all of its pixel
    values (all three channels jointly, 8-bit units) is strictly below R.
    """
    pixels = patch.pixels if isinstance(patch, PatchRecord) else patch
    std = float(np.asarray(pixels, dtype=np.float64).std())
    return not std < R


def window_origins(length: int, patch_size: int, stride: int) -> list:
    """Window origins along one axis, with a final window clamped to the edge."""
    origins = list(range(0, length - patch_size + 1, stride))
    if origins[-1] != length - patch_size:
        origins.append(length - patch_size)
    return origins


def extract_grid(slide: SlideImage, spec: TileSpec) -> list:
    P = spec.patch_size
    if slide.width < P or slide.height < P:
        raise SlideTooSmall(
            f"slide {slide.id} is {slide.width}x{slide.height}, smaller than patch size {P}"
        )
    xs = window_origins(slide.width, P, spec.stride)
    ys = window_origins(slide.height, P, spec.stride)
    patches = []
    for y in ys:
        for x in xs:
            mask_crop = None
            if slide.ground_truth is not None:
                mask_crop = slide.ground_truth[y:y + P, x:x + P]
            patches.append(PatchRecord(
                slide_id=slide.id,
                origin_x=x,
                origin_y=y,
                pixels=slide.pixels[y:y + P, x:x + P],
                mask_crop=mask_crop,
            ))
    logger.debug(f"Extracted {len(patches)} patches from slide {slide.id} ({len(xs)} x {len(ys)} grid)")
    return patches


def malignant_area(mask_crop: np.ndarray) -> int:
    """Malignant pixel count of a patch mask."""
    return int(np.count_nonzero(mask_crop))


def malignant_ratio(mask_crop: np.ndarray) -> float:
    return malignant_area(mask_crop) / mask_crop.size


def _origin_of(origin) -> Tuple[int, int]:
    if isinstance(origin, PatchRecord):
        return origin.origin_x, origin.origin_y
    x, y = origin
    return int(x), int(y)


class StitchAccumulator:
    """
    Running (sum, count) maps for one slide.

    A single owner adds patches; parallel workers each keep their own
    accumulator and the owner merges them before finalizing.
    """

    def __init__(self, height: int, width: int):
        self.height = height
        self.width = width
        self.sums = np.zeros((height, width), dtype=np.float64)
        self.counts = np.zeros((height, width), dtype=np.int32)

    def add(self, origin, probabilities: np.ndarray):
        x, y = _origin_of(origin)
        h, w = probabilities.shape[:2]
        if x < 0 or y < 0 or x + w > self.width or y + h > self.height:
            raise PatchOutOfBounds(
                f"patch {w}x{h} at ({x}, {y}) exceeds slide {self.width}x{self.height}"
            )
        self.sums[y:y + h, x:x + w] += probabilities
        self.counts[y:y + h, x:x + w] += 1

    def merge(self, other: 'StitchAccumulator'):
        if (other.height, other.width) != (self.height, self.width):
            raise ShapeMismatch("cannot merge accumulators of different slides")
        self.sums += other.sums
        self.counts += other.counts

    def finalize(self) -> StitchedMap:
        probabilities = np.zeros_like(self.sums)
        covered = self.counts > 0
        probabilities[covered] = self.sums[covered] / self.counts[covered]
        return StitchedMap(probabilities=probabilities, coverage_counts=self.counts.copy())


def stitch(patch_masks: Sequence, H: int, W: int) -> StitchedMap:
    """
    Average overlapping patch probability rasters into a slide-sized map.

    `patch_masks` holds (origin, raster) pairs where origin is a PatchRecord
    or an (x, y) tuple.
    """
    accumulator = StitchAccumulator(H, W)
    for origin, probabilities in patch_masks:
        accumulator.add(origin, np.asarray(probabilities, dtype=np.float64))
    return accumulator.finalize()
