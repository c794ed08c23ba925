"""
Management command to summarize inference timings.

Reads timing_report.json from an inference run directory; when that file is
missing the per-slide reports are rebuilt from the SlideDecisionRecord rows
stored for the run. --xlsx also exports the summary as a spreadsheet.

Run: python manage.py report --run-dir runs/inference --xlsx runs/inference/timings.xlsx
"""
from pathlib import Path

from wsi_pipeline import storage
from wsi_pipeline.exceptions import DataError
from wsi_pipeline.models import SlideDecisionRecord
from wsi_pipeline.pipeline import StageReport, timing_report

from ._pipeline_command import PipelineCommand

SLIDE_COLUMNS = ['slide_id', 'pre_label', 'stage_reached', 'n_extracted', 'n_roi_kept', 'n_scored', 'n_key',
                 'stage1_seconds', 'stage2_seconds', 'stage3_seconds', 'total_seconds']
SUMMARY_COLUMNS = ['count', 'mean_stage1_seconds', 'mean_stage2_seconds', 'mean_stage3_seconds',
                   'mean_total_seconds']


def reports_from_records(run_dir):
    records = SlideDecisionRecord.objects.filter(run_dir=str(run_dir)).order_by('slide_id')
    return [
        StageReport(
            slide_id=r.slide_id,
            pre_label=r.pre_label,
            stage_reached=r.stage_reached,
            stage1_seconds=r.stage1_seconds,
            stage2_seconds=r.stage2_seconds,
            stage3_seconds=r.stage3_seconds,
            n_extracted=r.n_extracted,
            n_roi_kept=r.n_roi_kept,
            n_scored=r.n_scored,
            n_key=r.n_key,
        )
        for r in records
    ]


def export_xlsx(summary, path):
    try:
        import openpyxl
    except ImportError:
        raise DataError('Excel export requires openpyxl. Install it with: pip install openpyxl')

    wb = openpyxl.Workbook()
    ws = wb.active
    ws.title = 'Summary'
    ws.append(['group', *SUMMARY_COLUMNS])
    for group in ('overall', 'positive', 'negative'):
        ws.append([group, *(summary[group].get(column) for column in SUMMARY_COLUMNS)])

    slides = wb.create_sheet('Slides')
    slides.append(SLIDE_COLUMNS)
    for row in summary['slides']:
        slides.append([row.get(column) for column in SLIDE_COLUMNS])

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    wb.save(path)
    return path


class Command(PipelineCommand):
    help = 'Summarize per-stage inference timings, split by final decision'
    uses_config = False
    default_out_name = 'report'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--run-dir', required=True, help='Inference output directory')
        parser.add_argument('--xlsx', help='Also export the summary to this .xlsx file')

    def run(self, cfg, out_dir, **options):
        run_dir = Path(options['run_dir'])
        timing_path = run_dir / 'timing_report.json'
        if timing_path.exists():
            summary = storage.read_json(timing_path)
        else:
            reports = reports_from_records(run_dir)
            if not reports:
                raise DataError(f"no timing_report.json and no recorded decisions for {run_dir}")
            self.stdout.write(self.style.NOTICE(f'Rebuilding timings from {len(reports)} stored decisions'))
            summary = timing_report(reports)

        for group in ('overall', 'positive', 'negative'):
            stats = summary[group]
            if not stats['count']:
                self.stdout.write(f'  {group}: no slides')
                continue
            self.stdout.write(
                f"  {group}: {stats['count']} slides, mean total {stats['mean_total_seconds']:.3f}s "
                f"(stage1 {stats['mean_stage1_seconds']:.3f}s, stage2 {stats['mean_stage2_seconds']:.3f}s, "
                f"stage3 {stats['mean_stage3_seconds']:.3f}s)"
            )

        storage.write_json(out_dir / 'timing_summary.json', summary)
        if options['xlsx']:
            path = export_xlsx(summary, options['xlsx'])
            self.stdout.write(f'  Spreadsheet written to {path}')
        self.stdout.write(self.style.SUCCESS(f'Summary written to {out_dir / "timing_summary.json"}'))
