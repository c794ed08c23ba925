"""
File persistence: raster IO, CSV tables, JSON reports and model checkpoints.
"""
from pathlib import Path
import csv
import json
import logging

import numpy as np
import torch
from PIL import Image

from .exceptions import DataError, ModelMissing
from .tiling import SlideImage, StitchedMap

logger = logging.getLogger(__name__)

PROBABILITY_SCALE = 65535

PATCH_MANIFEST_FIELDS = ['slide_id', 'origin_x', 'origin_y', 'kept_by_roi']
LABELED_MANIFEST_FIELDS = ['slide_id', 'origin_x', 'origin_y', 'a1_pixels', 'ratio', 'hard_label',
                           'p_benign', 'p_malignant']
SCORE_FIELDS = ['slide_id', 'origin_x', 'origin_y', 'model_id', 'score']
DECISION_FIELDS = ['slide_id', 'pre_label', 'score']
SLIDE_LABEL_FIELDS = ['slide_id', 'label']
ROC_FIELDS = ['fpr', 'tpr', 'threshold']


def _ensure_parent(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# Rasters

def save_slide(slide: SlideImage, directory):
    """Write `<id>.png` (RGB) and, with ground truth, `<id>_mask.png`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(slide.pixels)).save(directory / f"{slide.id}.png")
    if slide.ground_truth is not None:
        save_mask(slide.ground_truth, directory / f"{slide.id}_mask.png")
    return directory / f"{slide.id}.png"


def load_slide(path, mask_path=None, slide_id=None) -> SlideImage:
    path = Path(path)
    if not path.exists():
        raise DataError(f"slide file {path} not found")
    with Image.open(path) as image:
        pixels = np.array(image.convert('RGB'), dtype=np.uint8)
    if mask_path is None:
        candidate = path.with_name(f"{path.stem}_mask.png")
        mask_path = candidate if candidate.exists() else None
    truth = load_mask(mask_path) if mask_path is not None else None
    return SlideImage(id=slide_id or path.stem, pixels=pixels, ground_truth=truth)


def list_slides(directory):
    """Slide rasters in a directory, skipping mask and probability files."""
    return sorted(
        p for p in Path(directory).glob('*.png')
        if not p.stem.endswith(('_mask', '_prob'))
    )


def save_mask(mask: np.ndarray, path):
    """Binary mask as single-channel 8-bit with values {0, 255}."""
    raster = (np.asarray(mask) > 0).astype(np.uint8) * 255
    Image.fromarray(raster).save(_ensure_parent(path))


def load_mask(path) -> np.ndarray:
    with Image.open(path) as image:
        return (np.array(image.convert('L')) > 127).astype(np.uint8)


def save_probability_map(stitched: StitchedMap, path):
    """
    16-bit fixed point (value / 65535) PNG plus a `.coverage.npy` sidecar
    holding the coverage counts.
    """
    path = _ensure_parent(path)
    fixed = np.rint(np.clip(stitched.probabilities, 0.0, 1.0) * PROBABILITY_SCALE).astype(np.uint16)
    Image.fromarray(fixed).save(path)
    np.save(path.with_suffix('.coverage.npy'), stitched.coverage_counts.astype(np.int32))


def load_probability_map(path) -> StitchedMap:
    path = Path(path)
    with Image.open(path) as image:
        fixed = np.array(image).astype(np.float64)
    coverage_path = path.with_suffix('.coverage.npy')
    counts = np.load(coverage_path) if coverage_path.exists() else None
    return StitchedMap(probabilities=fixed / PROBABILITY_SCALE, coverage_counts=counts)


# CSV tables

def _write_rows(path, fieldnames, rows):
    path = _ensure_parent(path)
    with open(path, 'w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(fieldnames)
        for row in rows:
            writer.writerow(row)
    return path


def _read_rows(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"table {path} not found")
    with open(path, newline='') as handle:
        return list(csv.DictReader(handle))


def write_patch_manifest(path, entries):
    """`entries` are (PatchRecord, kept_by_roi) pairs."""
    return _write_rows(path, PATCH_MANIFEST_FIELDS, (
        [patch.slide_id, patch.origin_x, patch.origin_y, int(kept)] for patch, kept in entries
    ))


def write_labeled_manifest(path, labeled):
    rows = []
    for item in labeled:
        target = item.target.as_tuple() if item.target is not None else ('', '')
        rows.append([item.patch.slide_id, item.patch.origin_x, item.patch.origin_y,
                     item.a1, f"{item.ratio:.6f}", item.hard_label, *target])
    return _write_rows(path, LABELED_MANIFEST_FIELDS, rows)


def write_scores(path, entries):
    """`entries` are (PatchScore, model_id) pairs."""
    return _write_rows(path, SCORE_FIELDS, (
        [s.patch.slide_id, s.patch.origin_x, s.patch.origin_y, model_id, repr(float(s.p))]
        for s, model_id in entries
    ))


def write_decisions(path, decisions):
    """`decisions` are (slide_id, WsiDecision) pairs."""
    return _write_rows(path, DECISION_FIELDS, (
        [slide_id, d.pre_label.value, repr(float(d.score))] for slide_id, d in decisions
    ))


def write_slide_labels(path, labels):
    return _write_rows(path, SLIDE_LABEL_FIELDS, ([slide_id, int(label)] for slide_id, label in labels))


def write_roc_points(path, points):
    return _write_rows(path, ROC_FIELDS, ([repr(fpr), repr(tpr), repr(threshold)] for fpr, tpr, threshold in points))


def _row_key(row):
    if row.get('origin_x') not in (None, '') and row.get('origin_y') not in (None, ''):
        return (row['slide_id'], int(row['origin_x']), int(row['origin_y']))
    return (row['slide_id'],)


def read_score_table(path, model_id=None) -> dict:
    """
    key -> score, where key is (slide_id,) for decision tables and
    (slide_id, origin_x, origin_y) for patch score tables.
    """
    table = {}
    for row in _read_rows(path):
        if model_id is not None and row.get('model_id') not in (None, model_id):
            continue
        try:
            table[_row_key(row)] = float(row['score'])
        except (KeyError, ValueError) as exc:
            raise DataError(f"bad score row in {path}: {row}") from exc
    return table


def read_label_table(path) -> dict:
    """key -> {0, 1} from a `label` or `hard_label` column."""
    table = {}
    for row in _read_rows(path):
        value = row.get('label', row.get('hard_label'))
        if value not in ('0', '1'):
            raise DataError(f"bad label row in {path}: {row}")
        table[_row_key(row)] = int(value)
    return table


def read_decisions(path) -> list:
    return _read_rows(path)


# Reports and checkpoints

def write_json(path, data):
    path = _ensure_parent(path)
    with open(path, 'w') as handle:
        json.dump(data, handle, indent=2, sort_keys=True)
    return path


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path} not found")
    with open(path) as handle:
        return json.load(handle)


def save_checkpoint(directory, name, model: torch.nn.Module, sidecar: dict):
    """`<name>.pt` holds the parameters, `<name>.json` the config that built them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), directory / f"{name}.pt")
    write_json(directory / f"{name}.json", sidecar)
    logger.info(f"Saved checkpoint {directory / name}.pt")
    return directory / f"{name}.pt"


def load_checkpoint(directory, name):
    directory = Path(directory)
    weights = directory / f"{name}.pt"
    sidecar = directory / f"{name}.json"
    if not weights.exists() or not sidecar.exists():
        raise ModelMissing(f"checkpoint {name} not found in {directory}")
    state = torch.load(weights, map_location='cpu', weights_only=True)
    with open(sidecar) as handle:
        return state, json.load(handle)
