"""
Management command to generate a synthetic slide dataset.

Writes `<id>.png`, `<id>_mask.png` and `labels.csv` (slide_id, label) to the
output directory and records one SyntheticSlide row per slide.

Run: python manage.py synth --n-slides 20 --out-dir data/train
"""
from django.conf import settings
from django.db import transaction

from wsi_pipeline import storage
from wsi_pipeline.models import SyntheticSlide
from wsi_pipeline.synthetic import generate_synthetic_dataset

from ._pipeline_command import PipelineCommand


class Command(PipelineCommand):
    help = 'Generate a deterministic synthetic WSI dataset with ground-truth masks'
    uses_config = False
    default_out_name = 'synthetic'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--n-slides', type=int, default=20, help='Number of slides (default 20)')
        parser.add_argument('--seed', type=int, help='Dataset seed (default: WSI_DEFAULT_SEED)')
        parser.add_argument('--min-size', type=int, default=512, help='Smallest slide side in px')
        parser.add_argument('--max-size', type=int, default=1024, help='Largest slide side in px')
        parser.add_argument('--size-step', type=int, default=64, help='Slide sides are multiples of this step')
        parser.add_argument('--positive-fraction', type=float, default=0.5)
        parser.add_argument('--lesion-radius', type=int, nargs=2, default=[60, 160], metavar=('MIN', 'MAX'))
        parser.add_argument('--prefix', default='slide', help='Slide id prefix')

    def run(self, cfg, out_dir, **options):
        seed = options['seed'] if options['seed'] is not None else settings.WSI_DEFAULT_SEED
        dataset = generate_synthetic_dataset(
            options['n_slides'],
            seed,
            min_size=options['min_size'],
            max_size=options['max_size'],
            positive_fraction=options['positive_fraction'],
            lesion_radius_range=tuple(options['lesion_radius']),
            size_step=options['size_step'],
            prefix=options['prefix'],
        )

        records = []
        for slide, spec in dataset:
            image_path = storage.save_slide(slide, out_dir)
            records.append(SyntheticSlide(
                slide_id=slide.id,
                dataset_dir=str(out_dir),
                height=slide.height,
                width=slide.width,
                stain_domain=spec.stain_domain,
                n_lesions=spec.n_lesions,
                is_positive=slide.is_positive,
                seed=spec.seed,
                image_path=str(image_path),
                mask_path=str(out_dir / f"{slide.id}_mask.png"),
            ))
        storage.write_slide_labels(out_dir / 'labels.csv', [(slide.id, slide.is_positive) for slide, _ in dataset])
        storage.write_json(out_dir / 'dataset.json', {
            'seed': seed,
            'slides': [{'slide_id': slide.id, **spec.to_dict()} for slide, spec in dataset],
        })

        with transaction.atomic():
            SyntheticSlide.objects.bulk_create(records)

        n_positive = sum(1 for slide, _ in dataset if slide.is_positive)
        self.stdout.write(self.style.SUCCESS(
            f'Generated {len(dataset)} slides ({n_positive} positive) in {out_dir}'
        ))
