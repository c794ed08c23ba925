"""
Management command to train the Stage-2 key-patch ensemble.

Only positive slides of --data-dir are used; negative slides are skipped
with a warning.

Run: python manage.py train_stage2 --data-dir data/train --config configs/desk.json
"""
from wsi_pipeline.pipeline import train_stage2

from ._pipeline_command import TrainingCommand


class Command(TrainingCommand):
    help = 'Train the Stage-2 ensemble on patches of positive slides'
    kind = 'stage2'
    default_out_name = 'models'

    def select_slides(self, slides):
        positives = [s for s in slides if s.is_positive]
        skipped = len(slides) - len(positives)
        if skipped:
            self.stdout.write(self.style.WARNING(f'Skipping {skipped} negative slides'))
        return positives

    def train(self, cfg, slides, out_dir):
        return train_stage2(cfg, slides, out_dir)
