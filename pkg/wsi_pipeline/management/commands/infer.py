"""
Management command to run the three-stage pipeline over a directory of slides.

Outputs in --out-dir:
  decisions.csv         slide_id, pre_label, score
  patch_scores.csv      per-patch scores of every model, plus the Stage-2 ensemble
  patches.csv           patch manifest with the RoI decision
  <id>_mask.png         binarized stitched mask (positive slides only)
  <id>_prob.png         16-bit stitched probability map (positive slides only)
  timing_report.json    per-slide and aggregate stage timings

Run: python manage.py infer --data-dir data/test --models-dir runs/models --config configs/desk.json
"""
from django.conf import settings
from django.db import transaction

from wsi_pipeline import storage
from wsi_pipeline.models import SlideDecisionRecord
from wsi_pipeline.pipeline import load_models, run_batch_inference, timing_report

from ._pipeline_command import PipelineCommand, load_slides


class Command(PipelineCommand):
    help = 'Triage, select key patches and segment every slide in a directory'
    default_out_name = 'inference'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--data-dir', required=True, help='Directory of slide rasters')
        parser.add_argument('--models-dir', required=True, help='Directory holding the trained checkpoints')
        parser.add_argument('--workers', type=int, default=1, help='Slides processed in parallel')
        parser.add_argument('--scoring-workers', type=int,
                            help='Patch-scoring replicas per slide (default: WSI_SCORING_WORKERS)')

    def run(self, cfg, out_dir, **options):
        slides = load_slides(options['data_dir'])
        models = load_models(options['models_dir'], cfg.stage2.archs)
        scoring_workers = options['scoring_workers'] or settings.WSI_SCORING_WORKERS
        self.stdout.write(f'Running inference on {len(slides)} slides...')

        results = run_batch_inference(
            slides, cfg, models,
            workers=options['workers'],
            scoring_workers=scoring_workers,
            collect_trace=True,
        )

        records = []
        for result in results:
            mask_path = ''
            if result.stitched is not None:
                mask_path = out_dir / f"{result.slide_id}_mask.png"
                storage.save_mask(result.mask, mask_path)
                storage.save_probability_map(result.stitched, out_dir / f"{result.slide_id}_prob.png")
            records.append(SlideDecisionRecord.from_result(result, out_dir, mask_path))
            style = self.style.WARNING if result.decision.pre_label.value == 'positive' else self.style.SUCCESS
            self.stdout.write(style(
                f'  {result.slide_id}: {result.decision.pre_label.value} '
                f'(score {result.decision.score:.4f}, stage {result.report.stage_reached})'
            ))

        storage.write_decisions(out_dir / 'decisions.csv', [(r.slide_id, r.decision) for r in results])
        storage.write_scores(out_dir / 'patch_scores.csv', [entry for r in results for entry in r.trace.scores])
        storage.write_patch_manifest(out_dir / 'patches.csv', [entry for r in results for entry in r.trace.patches])
        storage.write_json(out_dir / 'timing_report.json', timing_report([r.report for r in results]))

        with transaction.atomic():
            SlideDecisionRecord.objects.bulk_create(records)

        n_positive = sum(1 for r in results if r.stitched is not None)
        self.stdout.write(self.style.SUCCESS(
            f'Done. {n_positive} positive, {len(results) - n_positive} negative. Outputs in {out_dir}'
        ))
