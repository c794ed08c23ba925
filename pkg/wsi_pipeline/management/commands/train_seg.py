"""
Management command to train the adversarial CAC-UNet segmentation model.

Run: python manage.py train_seg --data-dir data/train --config configs/desk.json
"""
from wsi_pipeline.pipeline import train_segmentation

from ._pipeline_command import TrainingCommand


class Command(TrainingCommand):
    help = 'Train the segmentation generator with encoder, decoder and mask discriminators'
    kind = 'segmentation'
    default_out_name = 'models'

    def train(self, cfg, slides, out_dir):
        outcome = train_segmentation(cfg, slides, out_dir)
        report = outcome.report
        if not report.get('adversarial', True):
            self.stdout.write(self.style.WARNING('Only one stain domain found; adversarial phases were skipped'))
        self.stdout.write(f"  domain A: {report['n_domain_a']} patches, domain B: {report['n_domain_b']} patches")
        return outcome
