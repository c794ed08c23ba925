"""
End-to-end orchestration of the three-stage pipeline.

Inference: tile -> RoI filter -> Stage-1 WSI triage. Negative slides stop
there. Positive slides go through the Stage-2 ensemble, which selects key
patches, and Stage-3 segments the key patches and stitches a slide mask.

Training entry points build each stage's model from a list of slides with
ground truth, following the per-stage sampling rules, and write
checkpoints plus a JSON report.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence
import copy
import logging
import math
import time

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import Dataset

from . import storage
from .adversarial import DomainTag, build_discriminators, domain_split, run_schedule
from .backbone import BackboneConfig, build_backbone
from .classification import (
    PreLabel, WsiDecision, ensemble_average, score_patches, select_key_patches, wsi_score,
)
from .config import PipelineConfig
from .exceptions import DatasetRuleViolation, EmptyClass, ModelMissing
from .labeling import (
    MALIGNANT, attach_targets, compute_a1_max, label_patches, sample_training_patches,
)
from .metrics import auc, confusion, dice, rates_report
from .scorers import ClassifierConfig, TorchPatchScorer, build_patch_classifier, train_patch_classifier
from .tiling import SlideImage, StitchedMap, extract_grid, roi_keep, stitch
from .utils import derive_seed, mask_to_tensor, pixels_to_tensor, resize_images, resize_masks

logger = logging.getLogger(__name__)

STAGE1_CHECKPOINT = 'stage1'
GENERATOR_CHECKPOINT = 'generator'
SEGMENTATION_BATCH = 4


@dataclass
class StageReport:
    slide_id: str
    pre_label: str = PreLabel.NEGATIVE.value
    stage_reached: int = 1
    stage1_seconds: float = 0.0
    stage2_seconds: float = 0.0
    stage3_seconds: float = 0.0
    n_extracted: int = 0
    n_roi_kept: int = 0
    n_scored: int = 0
    n_key: int = 0
    stage2_calls: int = 0
    segmentation_calls: int = 0

    @property
    def total_seconds(self):
        return self.stage1_seconds + self.stage2_seconds + self.stage3_seconds

    def counts_monotone(self):
        return self.n_extracted >= self.n_roi_kept >= self.n_scored >= self.n_key

    def to_dict(self):
        data = asdict(self)
        data['total_seconds'] = self.total_seconds
        return data


@dataclass
class InferenceResult:
    slide_id: str
    decision: WsiDecision
    stitched: Optional[StitchedMap]
    report: StageReport
    trace: Optional["InferenceTrace"] = None

    @property
    def mask(self):
        return None if self.stitched is None else self.stitched.binarize(0.5)


@dataclass
class InferenceTrace:
    """Optional sink for the patch manifest and per-model patch scores of a run."""
    patches: list = field(default_factory=list)
    scores: list = field(default_factory=list)


@dataclass
class PipelineModels:
    stage1: object
    stage2: list
    segmenter: torch.nn.Module

    def replica(self):
        return PipelineModels(
            stage1=copy.deepcopy(self.stage1),
            stage2=[copy.deepcopy(s) for s in self.stage2],
            segmenter=copy.deepcopy(self.segmenter),
        )


# Inference

@torch.no_grad()
def segment_patches(model: torch.nn.Module, patches, input_size: int) -> list:
    """Per-patch probability rasters at patch resolution."""
    model.eval()
    rasters = []
    for start in range(0, len(patches), SEGMENTATION_BATCH):
        chunk = patches[start:start + SEGMENTATION_BATCH]
        batch = pixels_to_tensor([p.pixels for p in chunk])
        size = batch.shape[-2:]
        probabilities = model(resize_images(batch, input_size))
        if tuple(probabilities.shape[-2:]) != tuple(size):
            probabilities = F.interpolate(probabilities, size=size, mode='bilinear', align_corners=False)
        rasters.extend(probabilities[:, 0].clamp(0.0, 1.0).double().numpy())
    return rasters


def run_inference(slide: SlideImage, cfg: PipelineConfig, stage1_scorer, stage2_scorers: Sequence,
                  seg_model: torch.nn.Module, workers: int = 1, trace: Optional[InferenceTrace] = None):
    """
    Returns (WsiDecision, StitchedMap or None, StageReport). The map is only
    produced for slides pre-predicted positive. A `trace` collects the patch
    manifest and every model's patch scores.
    """
    if stage1_scorer is None or not stage2_scorers or seg_model is None:
        raise ModelMissing("inference needs a Stage-1 scorer, Stage-2 scorers and a segmentation model")
    report = StageReport(slide_id=slide.id)

    started = time.perf_counter()
    patches = extract_grid(slide, cfg.tile)
    flags = [roi_keep(p, cfg.R) for p in patches]
    kept = [p for p, keep in zip(patches, flags) if keep]
    report.n_extracted = len(patches)
    report.n_roi_kept = len(kept)
    if trace is not None:
        trace.patches.extend(zip(patches, flags))
    if not kept:
        report.stage1_seconds = time.perf_counter() - started
        logger.info(f"Slide {slide.id}: no tissue after RoI filtering, negative")
        return WsiDecision.no_tissue(), None, report

    scores = score_patches(stage1_scorer, kept, workers)
    report.n_scored = len(scores)
    if trace is not None:
        trace.scores.extend((s, stage1_scorer.model_id) for s in scores)
    decision = wsi_score(scores, cfg.stage1_config)
    report.pre_label = decision.pre_label.value
    report.stage1_seconds = time.perf_counter() - started
    if decision.pre_label == PreLabel.NEGATIVE:
        logger.info(f"Slide {slide.id}: negative at Stage-1 (score {decision.score:.4f})")
        return decision, None, report

    started = time.perf_counter()
    per_model = [score_patches(scorer, kept, workers) for scorer in stage2_scorers]
    report.stage2_calls = sum(len(s) for s in per_model)
    ensembled = ensemble_average(per_model)
    key_patches = select_key_patches(ensembled, cfg.key_threshold)
    if trace is not None:
        for scorer, model_scores in zip(stage2_scorers, per_model):
            trace.scores.extend((s, scorer.model_id) for s in model_scores)
        trace.scores.extend((s, 'ensemble') for s in ensembled)
    report.n_key = len(key_patches)
    report.stage2_seconds = time.perf_counter() - started
    report.stage_reached = 2

    started = time.perf_counter()
    rasters = segment_patches(seg_model, key_patches, cfg.backbone.input_size) if key_patches else []
    report.segmentation_calls = len(rasters)
    stitched = stitch(list(zip(key_patches, rasters)), slide.height, slide.width)
    report.stage3_seconds = time.perf_counter() - started
    report.stage_reached = 3
    logger.info(f"Slide {slide.id}: positive (score {decision.score:.4f}), "
                f"{report.n_key}/{report.n_scored} key patches segmented")
    return decision, stitched, report


def run_batch_inference(slides: Sequence[SlideImage], cfg: PipelineConfig, models: PipelineModels,
                        workers: int = 1, scoring_workers: int = 1, collect_trace: bool = False) -> list:
    """
    Slide-level parallelism: slides are split into contiguous shards, each
    processed by a worker owning its own model replicas. Results keep input order.
    With `collect_trace` each result carries its own InferenceTrace.
    """
    slides = list(slides)

    def run_one(shard_models, slide):
        trace = InferenceTrace() if collect_trace else None
        decision, stitched, report = run_inference(
            slide, cfg, shard_models.stage1, shard_models.stage2, shard_models.segmenter,
            scoring_workers, trace=trace,
        )
        return InferenceResult(slide.id, decision, stitched, report, trace)

    def run_shard(shard_models, shard):
        return [run_one(shard_models, slide) for slide in shard]

    if workers <= 1 or len(slides) < 2:
        return run_shard(models, slides)
    shards = [[slides[i] for i in idx] for idx in np.array_split(np.arange(len(slides)), workers) if len(idx)]
    with ThreadPoolExecutor(max_workers=len(shards)) as pool:
        results = pool.map(lambda shard: run_shard(models.replica(), shard), shards)
    return [result for shard_results in results for result in shard_results]


def timing_report(reports: Sequence[StageReport]) -> dict:
    """Per-slide timings plus means split by final decision."""

    def summarize(group):
        if not group:
            return {'count': 0}
        return {
            'count': len(group),
            **{
                f"mean_{name}": math.fsum(getattr(r, name) for r in group) / len(group)
                for name in ('stage1_seconds', 'stage2_seconds', 'stage3_seconds', 'total_seconds')
            },
        }

    positives = [r for r in reports if r.pre_label == PreLabel.POSITIVE.value]
    negatives = [r for r in reports if r.pre_label == PreLabel.NEGATIVE.value]
    return {
        'slides': [r.to_dict() for r in reports],
        'overall': summarize(list(reports)),
        'positive': summarize(positives),
        'negative': summarize(negatives),
    }


# Training

@dataclass
class TrainingOutcome:
    kind: str
    checkpoints: list = field(default_factory=list)
    report: dict = field(default_factory=dict)

    def final_losses(self) -> dict:
        """Last value of every loss curve in the report."""
        if self.kind == 'segmentation':
            return {name: values[-1] for name, values in self.report.get('series', {}).items() if values}
        if self.kind == 'stage2':
            return {
                arch: entry['epoch_losses'][-1]
                for arch, entry in self.report.get('models', {}).items() if entry['epoch_losses']
            }
        losses = self.report.get('epoch_losses')
        return {'loss': losses[-1]} if losses else {}


def collect_labeled_patches(slides: Sequence[SlideImage], cfg: PipelineConfig) -> list:
    """RoI-kept grid patches of every slide with area and hard label."""
    labeled = []
    for slide in slides:
        kept = [p for p in extract_grid(slide, cfg.tile) if roi_keep(p, cfg.R)]
        labeled.extend(label_patches(kept, slide.is_positive, cfg.S))
    return labeled


def _require_ground_truth(slides, stage):
    missing = [s.id for s in slides if s.ground_truth is None]
    if missing:
        raise DatasetRuleViolation(f"{stage}: every training slide needs a ground-truth mask",
                                   f"missing for {missing}")


def _sample(labeled, n_samples, seed, within_positive_slides, rule):
    try:
        return sample_training_patches(labeled, n_samples, seed, within_positive_slides=within_positive_slides)
    except EmptyClass as exc:
        raise DatasetRuleViolation(rule, str(exc)) from exc


def _classifier_sidecar(kind, classifier_cfg: ClassifierConfig, labeling_cfg, seed):
    return {
        'kind': kind,
        'classifier': classifier_cfg.to_dict(),
        'labeling': asdict(labeling_cfg),
        'seed': seed,
    }


def train_stage1(cfg: PipelineConfig, slides: Sequence[SlideImage], out_dir) -> TrainingOutcome:
    """
    Positive patches from positive slides against patches from negative
    slides, with area-guided smoothed targets.
    """
    _require_ground_truth(slides, 'stage1')
    if not any(s.is_positive for s in slides) or all(s.is_positive for s in slides):
        raise DatasetRuleViolation('stage1: training needs both positive and negative slides')
    labeled = collect_labeled_patches(slides, cfg)
    labeling_cfg = cfg.labeling_config(compute_a1_max(labeled))
    attach_targets(labeled, labeling_cfg)
    sampled = _sample(labeled, cfg.stage1.samples, cfg.seed, False,
                      'stage1: positives from positive slides and negatives from negative slides')

    model, classifier_report = train_patch_classifier(sampled, cfg.stage1, cfg.seed, cfg.augment)
    sidecar = _classifier_sidecar('stage1', cfg.stage1, labeling_cfg, cfg.seed)
    checkpoint = storage.save_checkpoint(out_dir, STAGE1_CHECKPOINT, model, sidecar)
    report = {**classifier_report.to_dict(), 'n_train_patches': len(sampled), 'a1_max': labeling_cfg.a1_max}
    storage.write_labeled_manifest(Path(out_dir) / 'stage1_labeled.csv', sampled)
    storage.write_json(Path(out_dir) / 'stage1_report.json', report)
    return TrainingOutcome('stage1', [checkpoint], report)


def _holdout_metrics(scores, items):
    preds = [int(p >= 0.5) for p in scores]
    labels = [item.hard_label for item in items]
    return rates_report(confusion(preds, labels))


def train_stage2(cfg: PipelineConfig, slides: Sequence[SlideImage], out_dir) -> TrainingOutcome:
    """
    Ensemble members are trained on patches of positive slides only: key
    malignant patches against benign patches of the same slides. A held-out
    fraction compares each member with the ensemble.
    """
    negatives = [s.id for s in slides if not s.is_positive]
    if negatives:
        raise DatasetRuleViolation('stage2: training patches come from positive slides only',
                                   f"negative slides supplied: {negatives}")
    if not slides:
        raise DatasetRuleViolation('stage2: training needs at least one positive slide')
    _require_ground_truth(slides, 'stage2')
    labeled = collect_labeled_patches(slides, cfg)
    labeling_cfg = cfg.labeling_config(compute_a1_max(labeled))
    attach_targets(labeled, labeling_cfg)
    sampled = _sample(labeled, cfg.stage2.samples, cfg.seed, True,
                      'stage2: positives and negatives both drawn from positive slides')
    n_holdout = int(len(sampled) * cfg.stage2.holdout)
    held_out, train_items = sampled[:n_holdout], sampled[n_holdout:]

    checkpoints = []
    report = {'n_train_patches': len(train_items), 'n_holdout_patches': len(held_out), 'models': {}}
    holdout_scores = []
    for index, arch in enumerate(cfg.stage2.archs):
        classifier_cfg = cfg.stage2.classifier(arch)
        seed = derive_seed(cfg.seed, index)
        model, classifier_report = train_patch_classifier(train_items, classifier_cfg, seed, cfg.augment)
        sidecar = _classifier_sidecar('stage2', classifier_cfg, labeling_cfg, seed)
        checkpoints.append(storage.save_checkpoint(out_dir, f"stage2_{arch}", model, sidecar))
        entry = classifier_report.to_dict()
        if held_out:
            scorer = TorchPatchScorer(model, classifier_cfg.input_size, f"stage2_{arch}")
            scores = scorer.score_batch([item.patch.pixels for item in held_out])
            holdout_scores.append(scores)
            entry['holdout'] = _holdout_metrics(scores, held_out)
        report['models'][arch] = entry
    if holdout_scores:
        ensembled = [math.fsum(column) / len(column) for column in zip(*holdout_scores)]
        report['ensemble'] = _holdout_metrics(ensembled, held_out)
        logger.info(f"Stage-2 held-out ensemble: {report['ensemble']}")
    storage.write_json(Path(out_dir) / 'stage2_report.json', report)
    return TrainingOutcome('stage2', checkpoints, report)


class MaskedPatchDataset(Dataset):
    """(image, mask) tensors resized to the segmentation input size."""

    def __init__(self, patches, input_size: int):
        self.patches = list(patches)
        self.input_size = input_size

    def __len__(self):
        return len(self.patches)

    def __getitem__(self, index):
        patch = self.patches[index]
        image = resize_images(pixels_to_tensor(patch.pixels).unsqueeze(0), self.input_size)[0]
        mask = resize_masks(mask_to_tensor(patch.mask_crop).unsqueeze(0), self.input_size)[0]
        return image, mask


def segmentation_training_patches(slides: Sequence[SlideImage], cfg: PipelineConfig) -> list:
    """Key positive patches (malignant by hard label) of positive slides, with masks."""
    _require_ground_truth(slides, 'segmentation')
    labeled = collect_labeled_patches([s for s in slides if s.is_positive], cfg)
    patches = [item.patch for item in labeled if item.hard_label == MALIGNANT]
    if len(patches) < 2:
        raise DatasetRuleViolation('segmentation: training needs at least two key positive patches with masks',
                                   f"found {len(patches)}")
    if len(patches) > cfg.seg_samples:
        rng = np.random.default_rng(cfg.seed)
        chosen = sorted(rng.choice(len(patches), size=cfg.seg_samples, replace=False))
        patches = [patches[i] for i in chosen]
    return patches


def train_segmentation(cfg: PipelineConfig, slides: Sequence[SlideImage], out_dir) -> TrainingOutcome:
    patches = segmentation_training_patches(slides, cfg)
    tags = domain_split(patches, cfg.seed)
    size = cfg.backbone.input_size
    data_a = MaskedPatchDataset([p for p, t in zip(patches, tags) if t == DomainTag.A], size)
    data_b = MaskedPatchDataset([p for p, t in zip(patches, tags) if t == DomainTag.B], size)

    torch.manual_seed(cfg.seed)
    model = build_backbone(cfg.backbone)
    discs = build_discriminators(model, size, cfg.segmentation.disc_width)
    training = run_schedule(model, discs, data_a, data_b, cfg.schedule, cfg.adv_weights,
                            cfg.segmentation, cfg.seed)
    model.eval()

    checkpoints = [storage.save_checkpoint(out_dir, GENERATOR_CHECKPOINT, model,
                                           {'kind': 'generator', **model.describe()})]
    for name, disc in (('disc_encoder', discs.encoder), ('disc_decoder', discs.decoder), ('disc_mask', discs.mask)):
        sidecar = {'kind': name, 'width': cfg.segmentation.disc_width,
                   'tap_shapes': [list(s) for s in getattr(disc, 'tap_shapes', [])]}
        checkpoints.append(storage.save_checkpoint(out_dir, name, disc, sidecar))
    report = {
        **training.to_dict(),
        'n_patches': len(patches),
        'n_domain_a': len(data_a),
        'n_domain_b': len(data_b),
    }
    storage.write_json(Path(out_dir) / 'segmentation_report.json', report)
    return TrainingOutcome('segmentation', checkpoints, report)


# Model loading

def _load_scorer(directory, name):
    state, sidecar = storage.load_checkpoint(directory, name)
    classifier_cfg = ClassifierConfig.from_dict(sidecar['classifier'])
    model = build_patch_classifier(classifier_cfg)
    model.load_state_dict(state)
    return TorchPatchScorer(model, classifier_cfg.input_size, name)


def load_stage1_scorer(directory) -> TorchPatchScorer:
    return _load_scorer(directory, STAGE1_CHECKPOINT)


def load_stage2_scorers(directory, archs=None) -> list:
    directory = Path(directory)
    names = [f"stage2_{arch}" for arch in archs] if archs else sorted(
        p.stem for p in directory.glob('stage2_*.pt')
    )
    if not names:
        raise ModelMissing(f"no Stage-2 checkpoints in {directory}")
    return [_load_scorer(directory, name) for name in names]


def load_segmenter(directory) -> torch.nn.Module:
    state, sidecar = storage.load_checkpoint(directory, GENERATOR_CHECKPOINT)
    model = build_backbone(BackboneConfig.from_dict(sidecar['backbone']))
    model.load_state_dict(state)
    return model.eval()


def load_models(directory, archs=None) -> PipelineModels:
    return PipelineModels(
        stage1=load_stage1_scorer(directory),
        stage2=load_stage2_scorers(directory, archs),
        segmenter=load_segmenter(directory),
    )


# Evaluation

def evaluate_scores(scores: dict, labels: dict, threshold: float = 0.5) -> dict:
    """AUC and thresholded rates over the keys present in both tables."""
    keys = sorted(set(scores) & set(labels))
    values = [scores[k] for k in keys]
    truth = [labels[k] for k in keys]
    report = {'n': len(keys), 'auc': auc(values, truth), 'threshold': threshold}
    report.update(rates_report(confusion([int(v >= threshold) for v in values], truth)))
    return report


def evaluate_masks(pairs) -> dict:
    """`pairs` are (slide_id, predicted mask, ground-truth mask)."""
    per_slide = {slide_id: dice(pred, truth) for slide_id, pred, truth in pairs}
    mean = math.fsum(per_slide.values()) / len(per_slide) if per_slide else None
    return {'per_slide': per_slide, 'mean_dice': mean}
