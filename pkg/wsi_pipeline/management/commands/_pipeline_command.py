"""
Shared base for the pipeline management commands.

Handles the common flags (--config, --seed, --out-dir and the config
overrides), writes effective_config.json, and turns PipelineError into a
CommandError carrying the pipeline exit code (2 config, 3 data, 4 model).
"""
from pathlib import Path
import logging

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from wsi_pipeline import storage
from wsi_pipeline.config import load_pipeline_config, read_config_file
from wsi_pipeline.exceptions import DataError, PipelineError
from wsi_pipeline.models import TrainingRun
from wsi_pipeline.utils import configure_torch, seed_everything

logger = logging.getLogger(__name__)

# flag -> (flattened config key, type)
OVERRIDE_FLAGS = {
    '--R': ('R', float),
    '--tau': ('tau', float),
    '--T': ('T', float),
    '--epsilon': ('epsilon', float),
    '--S': ('S', float),
    '--key-threshold': ('key_threshold', float),
    '--alpha-e': ('alpha_e', float),
    '--alpha-d': ('alpha_d', float),
    '--alpha-m': ('alpha_m', float),
    '--seg-samples': ('seg_samples', int),
    '--patch-size': ('tile_patch_size', int),
    '--stride': ('tile_stride', int),
    '--preset': ('backbone_encoder_depth_preset', str),
    '--input-size': ('backbone_input_size', int),
    '--s0': ('schedule_s0', int),
    '--d0': ('schedule_d0', int),
    '--alt-epochs': ('schedule_alt_epochs', int),
    '--steps-per-phase': ('schedule_steps_per_phase', int),
    '--dm-adv-form': ('segmentation_dm_adv_form', str),
    '--lookahead-k': ('segmentation_lookahead_k', int),
    '--stage1-arch': ('stage1_arch', str),
    '--stage1-epochs': ('stage1_epochs', int),
    '--stage2-archs': ('stage2_archs', str),
    '--stage2-epochs': ('stage2_epochs', int),
}


def load_slides(data_dir, require=True):
    """Every slide raster in `data_dir`, ground-truth masks attached when present."""
    paths = storage.list_slides(data_dir)
    if require and not paths:
        raise DataError(f"no slide rasters found in {data_dir}")
    return [storage.load_slide(path) for path in paths]


class PipelineCommand(BaseCommand):
    """
    Subclasses implement `run(cfg, out_dir, **options)`; set
    `uses_config = False` for commands that only read artifacts.
    """
    uses_config = True
    default_out_name = ''

    def add_arguments(self, parser):
        parser.add_argument('--out-dir', help='Output directory (default: WSI_OUT_DIR/<command>)')
        if not self.uses_config:
            return
        parser.add_argument('--config', help='JSON pipeline config file')
        parser.add_argument('--seed', type=int, help='Global seed (default: config file, then WSI_DEFAULT_SEED)')
        group = parser.add_argument_group('config overrides')
        for flag, (key, cast) in OVERRIDE_FLAGS.items():
            group.add_argument(flag, dest=f"override_{key}", type=cast, help=f"Override {key}")

    def handle(self, *args, **options):
        try:
            out_dir = self.resolve_out_dir(options.pop('out_dir', None))
            cfg = None
            if self.uses_config:
                cfg = self.load_config(options)
                configure_torch()
                seed_everything(cfg.seed)
                storage.write_json(out_dir / 'effective_config.json', cfg.to_dict())
                logger.info(f"Effective config written to {out_dir / 'effective_config.json'}")
            return self.run(cfg, out_dir, **options)
        except PipelineError as exc:
            logger.error(f"{type(exc).__name__}: {exc}")
            raise CommandError(f"{type(exc).__name__}: {exc}", returncode=exc.exit_code) from exc

    def resolve_out_dir(self, value):
        out_dir = Path(value) if value else Path(settings.WSI_OUT_DIR) / (self.default_out_name or 'run')
        out_dir.mkdir(parents=True, exist_ok=True)
        return out_dir

    def load_config(self, options):
        overrides = {
            key: options.get(f"override_{key}") for key, _ in OVERRIDE_FLAGS.values()
        }
        seed = options.get('seed')
        if seed is None:
            file_seed = read_config_file(options['config']).get('seed') if options.get('config') else None
            seed = file_seed if file_seed is not None else settings.WSI_DEFAULT_SEED
        overrides['seed'] = seed
        return load_pipeline_config(options.get('config'), overrides)

    def run(self, cfg, out_dir, **options):
        raise NotImplementedError('subclasses of PipelineCommand must provide a run() method')


class TrainingCommand(PipelineCommand):
    """
    Loads slides from --data-dir, calls `train(cfg, slides, out_dir)` and
    tracks the invocation as a TrainingRun row.
    """
    kind = ''

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--data-dir', required=True, help='Directory of slide rasters with ground-truth masks')

    def select_slides(self, slides):
        return slides

    def train(self, cfg, slides, out_dir):
        raise NotImplementedError('subclasses of TrainingCommand must provide a train() method')

    def run(self, cfg, out_dir, **options):
        slides = self.select_slides(load_slides(options['data_dir']))
        self.stdout.write(f'Training {self.kind} on {len(slides)} slides from {options["data_dir"]}...')

        run = TrainingRun.objects.create(
            kind=self.kind, out_dir=str(out_dir), seed=cfg.seed, effective_config=cfg.to_dict(),
        )
        try:
            outcome = self.train(cfg, slides, out_dir)
        except PipelineError as exc:
            run.mark_failed(exc)
            raise
        run.mark_completed(outcome.report, outcome.final_losses())

        for checkpoint in outcome.checkpoints:
            self.stdout.write(f'  {checkpoint}')
        losses = ', '.join(f'{name}={value:.4f}' for name, value in outcome.final_losses().items())
        self.stdout.write(self.style.SUCCESS(f'Done. {self.kind} checkpoints in {out_dir} ({losses})'))
