"""
Management command to train the Stage-1 WSI triage classifier.

Run: python manage.py train_stage1 --data-dir data/train --config configs/desk.json
"""
from wsi_pipeline.pipeline import train_stage1

from ._pipeline_command import TrainingCommand


class Command(TrainingCommand):
    help = 'Train the Stage-1 patch classifier on positive and negative slides'
    kind = 'stage1'
    default_out_name = 'models'

    def train(self, cfg, slides, out_dir):
        return train_stage1(cfg, slides, out_dir)
