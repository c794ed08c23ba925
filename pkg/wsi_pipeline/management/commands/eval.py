"""
Management command to score pipeline outputs against ground truth.

Score mode: --scores (decisions.csv or patch_scores.csv) with --labels
(labels.csv or a labeled patch manifest) gives AUC and thresholded rates.
Mask mode: --pred-masks with --truth-dir gives per-slide and mean dice; a
slide without a predicted mask counts as all-negative.

Run: python manage.py eval --scores runs/inference/decisions.csv --labels data/test/labels.csv
"""
from pathlib import Path

import numpy as np

from wsi_pipeline import storage
from wsi_pipeline.exceptions import InvalidConfig
from wsi_pipeline.metrics import roc_points
from wsi_pipeline.pipeline import evaluate_masks, evaluate_scores

from ._pipeline_command import PipelineCommand

MASK_SUFFIX = '_mask'


class Command(PipelineCommand):
    help = 'Compute AUC, rates and dice for inference outputs'
    uses_config = False
    default_out_name = 'evaluation'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--scores', help='Score CSV (decisions or patch scores)')
        parser.add_argument('--labels', help='Label CSV with a label or hard_label column')
        parser.add_argument('--model-id', help='Only use rows of this model_id from a patch score table')
        parser.add_argument('--threshold', type=float, default=0.5, help='Decision threshold for the rates')
        parser.add_argument('--roc', help='Also write ROC points to this CSV')
        parser.add_argument('--pred-masks', help='Directory of predicted <id>_mask.png files')
        parser.add_argument('--truth-dir', help='Directory of ground-truth <id>_mask.png files')

    def run(self, cfg, out_dir, **options):
        score_mode = options['scores'] or options['labels']
        mask_mode = options['pred_masks'] or options['truth_dir']
        if not score_mode and not mask_mode:
            raise InvalidConfig('eval needs --scores/--labels or --pred-masks/--truth-dir')

        metrics = {}
        if score_mode:
            metrics['scores'] = self.evaluate_score_table(options)
        if mask_mode:
            metrics['masks'] = self.evaluate_mask_dirs(options)

        storage.write_json(out_dir / 'metrics.json', metrics)
        self.stdout.write(self.style.SUCCESS(f'Metrics written to {out_dir / "metrics.json"}'))

    def evaluate_score_table(self, options):
        if not (options['scores'] and options['labels']):
            raise InvalidConfig('score evaluation needs both --scores and --labels')
        scores = storage.read_score_table(options['scores'], options['model_id'])
        labels = storage.read_label_table(options['labels'])
        report = evaluate_scores(scores, labels, options['threshold'])
        self.stdout.write(f"  n={report['n']} AUC={report['auc']:.4f}")
        for name in ('accuracy', 'recall', 'precision', 'specificity'):
            if report.get(name) is not None:
                self.stdout.write(f'  {name}={report[name]:.4f}')

        if options['roc']:
            keys = sorted(set(scores) & set(labels))
            points = roc_points([scores[k] for k in keys], [labels[k] for k in keys])
            storage.write_roc_points(options['roc'], points)
            self.stdout.write(f"  ROC points written to {options['roc']}")
        return report

    def evaluate_mask_dirs(self, options):
        if not (options['pred_masks'] and options['truth_dir']):
            raise InvalidConfig('mask evaluation needs both --pred-masks and --truth-dir')
        pred_dir = Path(options['pred_masks'])
        pairs = []
        for truth_path in sorted(Path(options['truth_dir']).glob(f'*{MASK_SUFFIX}.png')):
            slide_id = truth_path.stem[:-len(MASK_SUFFIX)]
            truth = storage.load_mask(truth_path)
            pred_path = pred_dir / truth_path.name
            pred = storage.load_mask(pred_path) if pred_path.exists() else np.zeros_like(truth)
            pairs.append((slide_id, pred, truth))
        report = evaluate_masks(pairs)
        if report['mean_dice'] is None:
            self.stdout.write(self.style.WARNING('  No ground-truth masks found'))
        else:
            self.stdout.write(f"  slides={len(pairs)} mean dice={report['mean_dice']:.4f}")
        return report
